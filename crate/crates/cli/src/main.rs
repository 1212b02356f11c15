//! `nsf`: admissibility check, single solve, checkpoint re-audit and sweeps.
//!
//! Any config key can be overridden on the command line as `--key value` or
//! `--key=value`, e.g. `nsf solve --constitutive.gamma 1.7 --approx.n_x 4`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nsf_periodic::admissibility::{a_window, estimate_chain_report};
use nsf_periodic::cli_io::{
    audit_checkpoint, run_single, run_sweep, RunConfig, RunOutcome, SweepAxis, EXIT_ADMISSIBILITY, EXIT_CONFIG,
    EXIT_OK, KEYS,
};
use nsf_periodic::Error;

#[derive(Parser, Debug)]
#[command(name = "nsf", version, about = "Time-periodic Navier-Stokes-Fourier Galerkin solver")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Report the Bogovskii exponent window and the estimate chain.
    Admissibility {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Solve, audit and write a run directory.
    Solve {
        #[arg(short, long)]
        config: Option<PathBuf>,
    },
    /// Re-audit a checkpoint written by `solve`.
    Audit { dir: PathBuf },
    /// Cartesian sweep: `--axis key=v1,v2` (repeatable).
    Sweep {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
    },
    /// Print the resolved canonical config and its hash.
    Config {
        #[arg(short, long)]
        config: Option<PathBuf>,
    },
}

/// Pull `--key value` / `--key=value` pairs for config keys out of argv.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut ov = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.contains('.')) else {
            rest.push(a);
            continue;
        };
        let (k, v) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| format!("--{flag} needs a value"))?;
                (flag.to_string(), v)
            }
        };
        if !KEYS.contains(&k.as_str()) {
            return Err(format!("unknown key {k}"));
        }
        ov.push((k, v));
    }
    Ok((rest, ov))
}

fn report(out: &RunOutcome) -> ExitCode {
    println!("{} exit={} dir={} hash={}", out.message, out.exit_code, out.dir.display(), &out.config_hash[..12]);
    ExitCode::from(out.exit_code as u8)
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_CONFIG as u8)
}

fn main() -> ExitCode {
    let (args, ov) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    let cli = Cli::parse_from(args);
    let load = |c: &Option<PathBuf>| RunConfig::load(c.as_deref(), &ov);
    match cli.cmd {
        Cmd::Admissibility { config, json } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let gamma = cfg.constitutive.gamma;
            let win = a_window(gamma, cfg.case());
            let a = cfg.audit.a_bog.or(win.a_chosen).unwrap_or(1.0);
            let chain = estimate_chain_report(gamma, a, cfg.case());
            if json {
                println!("{}", serde_json::json!({ "window": win, "chain": chain }));
            } else {
                match win.a_high {
                    Some(h) => println!("window: ({}, {h})  chosen a = {a}", win.a_low),
                    None => println!("window: {:?}  admissible = {}", win.a_chosen, win.admissible),
                }
                print!("{}", chain.table());
            }
            ExitCode::from(if win.is_empty() { EXIT_ADMISSIBILITY } else { EXIT_OK } as u8)
        }
        Cmd::Solve { config } => match load(&config).and_then(|c| run_single(&c)) {
            Ok(out) => report(&out),
            Err(e) => fail(e),
        },
        Cmd::Audit { dir } => match audit_checkpoint(&dir) {
            Ok(out) => report(&out),
            Err(e) => fail(e),
        },
        Cmd::Sweep { config, axes } => {
            let run = || -> Result<_, Error> {
                let cfg = load(&config)?;
                let axes = axes.iter().map(|s| SweepAxis::parse(s)).collect::<Result<Vec<_>, _>>()?;
                run_sweep(&cfg, &axes)
            };
            match run() {
                Ok(s) => {
                    for r in &s.runs {
                        println!("run {:>4} exit={} {:?} {}", r.index, r.exit_code, r.overrides, r.message);
                    }
                    println!("sweep dir={} exit={}", s.dir.display(), s.exit_code);
                    ExitCode::from(s.exit_code as u8)
                }
                Err(e) => fail(e),
            }
        }
        Cmd::Config { config } => match load(&config) {
            Ok(c) => {
                print!("{}", c.canonical_text());
                println!("# sha256 {}", c.hash());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
    }
}
