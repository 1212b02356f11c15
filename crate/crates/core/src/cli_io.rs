//! Run configuration, single-run and sweep drivers, and on-disk artifacts.
//!
//! Configs are flat `key = value` text with dotted namespaces; `#` starts a
//! comment.  Keys not given explicitly take defaults, some of which depend
//! on others (`approx.gamma_reg = max(2γ, 4)`, `approx.eps = δ²`), so the
//! explicit pairs are kept and overrides are merged into them before the
//! defaults are resolved.  The resolved config is written back in canonical
//! form (sorted keys, shortest round-trip floats) and hashed with SHA-256.
//!
//! A run directory holds:
//!
//! | file | content |
//! |---|---|
//! | `config.txt` | canonical config |
//! | `admissibility.json` | exponent window and estimate-chain report |
//! | `rho.pfield`, `u.pfield`, `log_theta.pfield` | state checkpoint |
//! | `meta.json` | convergence flags of the checkpoint |
//! | `trace.jsonl` | Picard history |
//! | `balance.jsonl`, `balance.csv` | audit report and flattened metrics |
//! | `manifest.json` | config hash, version, status, file digests, wall time |
//!
//! Only `manifest.json` carries wall time, so every other file is a pure
//! function of the config.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::admissibility::{a_window, estimate_chain_report, ExponentCase};
use crate::auditors::{balance_audit, pressure_estimate_test, AuditOptions, BalanceReport, PressureTestReport};
use crate::constitutive::{BoundaryVariant, ConstitutiveParams};
use crate::discretization::{DomainSpec, Forcing, PeriodicField};
use crate::error::{Error, Result};
use crate::solvers::{fixed_point, ApproxParams, ApproxState, Controls, Problem};

/// Environment variable naming the root for relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "NSF_OUTPUT_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_ADMISSIBILITY: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_AUDIT: i32 = 4;
pub const EXIT_SWEEP_FAILED: i32 = 5;

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "approx.b_exp",
    "approx.delta",
    "approx.eps",
    "approx.gamma_reg",
    "approx.lambda",
    "approx.n_t",
    "approx.n_x",
    "approx.tau",
    "approx.zeta",
    "audit.a_bog",
    "audit.energy_tol",
    "audit.helmholtz_h",
    "audit.mass_tol",
    "audit.pressure_test",
    "audit.sign_tol",
    "constitutive.a_rad",
    "constitutive.c_v",
    "constitutive.d0",
    "constitutive.d_variant",
    "constitutive.eta0",
    "constitutive.gamma",
    "constitutive.kappa0",
    "constitutive.mu0",
    "controls.inner_max_iter",
    "controls.inner_tol",
    "controls.lambda_steps",
    "controls.max_iter",
    "controls.omega",
    "controls.tol",
    "domain.box",
    "domain.force",
    "domain.force_amplitude",
    "domain.mass",
    "domain.period",
    "domain.theta0",
    "output.dir",
    "output.formats",
    "sweep.max_runs",
    "sweep.threads",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AuditConfig {
    /// Bogovskii exponent; `None` takes the window's choice.
    pub a_bog: Option<f64>,
    pub helmholtz_h: bool,
    pub pressure_test: bool,
    /// Relative energy-identity residual above which the run fails.
    pub energy_tol: f64,
    /// Mass error bound relative to `M₀`.
    pub mass_tol: f64,
    /// Entropy-production density below `−sign_tol` fails.
    pub sign_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub jsonl: bool,
    pub csv: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepConfig {
    pub max_runs: usize,
    /// Worker threads across runs; 0 lets rayon decide.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub constitutive: ConstitutiveParams,
    pub domain: DomainSpec,
    pub approx: ApproxParams,
    pub controls: Controls,
    pub audit: AuditConfig,
    pub output: OutputConfig,
    pub sweep: SweepConfig,
    /// Explicitly given pairs; defaults are resolved from these.
    explicit: BTreeMap<String, String>,
}

/// Parse `key = value` lines.  Duplicate keys within one text are rejected.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
        }
    }
    Ok(out)
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::Config(format!("{key}: expected a finite number, got {v:?}")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_pairs(BTreeMap::new()).expect("defaults are valid")
    }
}

impl RunConfig {
    /// Resolve defaults and validate every component.
    pub fn from_pairs(explicit: BTreeMap<String, String>) -> Result<Self> {
        if let Some(k) = explicit.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key {k}")));
        }
        let get = |k: &str| explicit.get(k).map(String::as_str);
        let f = |k: &str, dflt: f64| get(k).map_or(Ok(dflt), |v| parse_f64(k, v));
        let n = |k: &str, dflt: usize| get(k).map_or(Ok(dflt), |v| parse_usize(k, v));
        let b = |k: &str, dflt: bool| get(k).map_or(Ok(dflt), |v| parse_bool(k, v));

        let c0 = ConstitutiveParams::default();
        let d_variant = match get("constitutive.d_variant").map(str::to_ascii_lowercase).as_deref() {
            None => c0.d_variant,
            Some("temp_dependent") => BoundaryVariant::TempDependent,
            Some("temp_independent") => BoundaryVariant::TempIndependent,
            Some(v) => {
                return Err(Error::Config(format!(
                    "constitutive.d_variant: expected temp_dependent or temp_independent, got {v:?}"
                )))
            }
        };
        let constitutive = ConstitutiveParams {
            gamma: f("constitutive.gamma", c0.gamma)?,
            c_v: f("constitutive.c_v", c0.c_v)?,
            a_rad: f("constitutive.a_rad", c0.a_rad)?,
            mu0: f("constitutive.mu0", c0.mu0)?,
            eta0: f("constitutive.eta0", c0.eta0)?,
            kappa0: f("constitutive.kappa0", c0.kappa0)?,
            d0: f("constitutive.d0", c0.d0)?,
            d_variant,
        };
        constitutive.validate().map_err(|e| Error::Config(e.to_string()))?;

        let dm0 = DomainSpec::default();
        let lengths = match get("domain.box") {
            None => dm0.lengths,
            Some(v) => {
                let xs: Vec<f64> = v.split(',').map(|s| parse_f64("domain.box", s.trim())).collect::<Result<_>>()?;
                <[f64; 3]>::try_from(xs)
                    .map_err(|_| Error::Config("domain.box: expected three comma-separated lengths".into()))?
            }
        };
        let amplitude = f("domain.force_amplitude", dm0.forcing.sup_norm())?;
        let forcing = match get("domain.force").unwrap_or("uniform") {
            "zero" => Forcing::Zero,
            "uniform" => Forcing::Uniform { amplitude },
            "shear" => Forcing::Shear { amplitude },
            v => return Err(Error::Config(format!("domain.force: expected zero, uniform or shear, got {v:?}"))),
        };
        let domain = DomainSpec {
            period: f("domain.period", dm0.period)?,
            lengths,
            mass: f("domain.mass", dm0.mass)?,
            theta0: f("domain.theta0", dm0.theta0)?,
            forcing,
        };
        domain.validate().map_err(|e| Error::Config(e.to_string()))?;

        let a0 = ApproxParams::defaults(constitutive.gamma);
        let delta = f("approx.delta", a0.delta)?;
        let approx = ApproxParams {
            n_t: n("approx.n_t", a0.n_t)?,
            n_x: n("approx.n_x", a0.n_x)?,
            tau: f("approx.tau", a0.tau)?,
            zeta: f("approx.zeta", a0.zeta)?,
            eps: f("approx.eps", delta * delta)?,
            delta,
            gamma_reg: f("approx.gamma_reg", a0.gamma_reg)?,
            b_exp: f("approx.b_exp", a0.b_exp)?,
            lambda: f("approx.lambda", a0.lambda)?,
        };
        approx.validate(constitutive.gamma).map_err(|e| Error::Config(e.to_string()))?;

        let k0 = Controls::default();
        let controls = Controls {
            omega: f("controls.omega", k0.omega)?,
            tol: f("controls.tol", k0.tol)?,
            max_iter: n("controls.max_iter", k0.max_iter)?,
            lambda_steps: n("controls.lambda_steps", k0.lambda_steps)?,
            inner_tol: f("controls.inner_tol", k0.inner_tol)?,
            inner_max_iter: n("controls.inner_max_iter", k0.inner_max_iter)?,
        };
        controls.validate().map_err(|e| Error::Config(e.to_string()))?;

        let a_bog = match get("audit.a_bog") {
            None | Some("auto") => None,
            Some(v) => Some(parse_f64("audit.a_bog", v)?),
        };
        let audit = AuditConfig {
            a_bog,
            helmholtz_h: b("audit.helmholtz_h", true)?,
            pressure_test: b("audit.pressure_test", true)?,
            energy_tol: f("audit.energy_tol", 1e-6)?,
            mass_tol: f("audit.mass_tol", 1e-9)?,
            sign_tol: f("audit.sign_tol", 1e-9)?,
        };
        if [audit.energy_tol, audit.mass_tol, audit.sign_tol].iter().any(|t| *t < 0.0) {
            return Err(Error::Config("audit tolerances must be non-negative".into()));
        }

        let formats = get("output.formats").unwrap_or("jsonl,csv");
        let mut output = OutputConfig { dir: PathBuf::from(get("output.dir").unwrap_or("runs")), jsonl: false, csv: false };
        for fmt in formats.split(',').map(str::trim) {
            match fmt {
                "jsonl" => output.jsonl = true,
                "csv" => output.csv = true,
                v => return Err(Error::Config(format!("output.formats: unknown format {v:?}"))),
            }
        }
        let sweep = SweepConfig { max_runs: n("sweep.max_runs", 64)?, threads: n("sweep.threads", 0)? };
        if sweep.max_runs == 0 {
            return Err(Error::Config("sweep.max_runs must be positive".into()));
        }
        Ok(Self { constitutive, domain, approx, controls, audit, output, sweep, explicit })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(parse_pairs(text)?)
    }

    /// Read a config file (or start from defaults) and apply overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => parse_pairs(&fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)?,
            None => BTreeMap::new(),
        };
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(pairs)
    }

    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = self.explicit.clone();
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(pairs)
    }

    /// Every key with its resolved value.
    pub fn resolved_pairs(&self) -> BTreeMap<String, String> {
        let (c, d, a, k, au) = (&self.constitutive, &self.domain, &self.approx, &self.controls, &self.audit);
        let (force, amp) = match d.forcing {
            Forcing::Zero => ("zero", 0.0),
            Forcing::Uniform { amplitude } => ("uniform", amplitude),
            Forcing::Shear { amplitude } => ("shear", amplitude),
        };
        let mut formats = Vec::new();
        if self.output.jsonl {
            formats.push("jsonl");
        }
        if self.output.csv {
            formats.push("csv");
        }
        let variant = match c.d_variant {
            BoundaryVariant::TempDependent => "temp_dependent",
            BoundaryVariant::TempIndependent => "temp_independent",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("approx.b_exp", fmt_f64(a.b_exp)),
            ("approx.delta", fmt_f64(a.delta)),
            ("approx.eps", fmt_f64(a.eps)),
            ("approx.gamma_reg", fmt_f64(a.gamma_reg)),
            ("approx.lambda", fmt_f64(a.lambda)),
            ("approx.n_t", a.n_t.to_string()),
            ("approx.n_x", a.n_x.to_string()),
            ("approx.tau", fmt_f64(a.tau)),
            ("approx.zeta", fmt_f64(a.zeta)),
            ("audit.a_bog", au.a_bog.map_or("auto".into(), fmt_f64)),
            ("audit.energy_tol", fmt_f64(au.energy_tol)),
            ("audit.helmholtz_h", au.helmholtz_h.to_string()),
            ("audit.mass_tol", fmt_f64(au.mass_tol)),
            ("audit.pressure_test", au.pressure_test.to_string()),
            ("audit.sign_tol", fmt_f64(au.sign_tol)),
            ("constitutive.a_rad", fmt_f64(c.a_rad)),
            ("constitutive.c_v", fmt_f64(c.c_v)),
            ("constitutive.d0", fmt_f64(c.d0)),
            ("constitutive.d_variant", variant.into()),
            ("constitutive.eta0", fmt_f64(c.eta0)),
            ("constitutive.gamma", fmt_f64(c.gamma)),
            ("constitutive.kappa0", fmt_f64(c.kappa0)),
            ("constitutive.mu0", fmt_f64(c.mu0)),
            ("controls.inner_max_iter", k.inner_max_iter.to_string()),
            ("controls.inner_tol", fmt_f64(k.inner_tol)),
            ("controls.lambda_steps", k.lambda_steps.to_string()),
            ("controls.max_iter", k.max_iter.to_string()),
            ("controls.omega", fmt_f64(k.omega)),
            ("controls.tol", fmt_f64(k.tol)),
            ("domain.box", d.lengths.map(fmt_f64).join(",")),
            ("domain.force", force.into()),
            ("domain.force_amplitude", fmt_f64(amp)),
            ("domain.mass", fmt_f64(d.mass)),
            ("domain.period", fmt_f64(d.period)),
            ("domain.theta0", fmt_f64(d.theta0)),
            ("output.dir", self.output.dir.display().to_string()),
            ("output.formats", formats.join(",")),
            ("sweep.max_runs", self.sweep.max_runs.to_string()),
            ("sweep.threads", self.sweep.threads.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Sorted `key = value` lines of every resolved key.
    pub fn canonical_text(&self) -> String {
        self.resolved_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_text().as_bytes())
    }

    pub fn problem(&self) -> Result<Problem> {
        Problem::new(self.constitutive, self.domain, self.approx)
    }

    /// Output directory, resolved against `$NSF_OUTPUT_ROOT` when relative.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output.dir.is_relative() => PathBuf::from(root).join(&self.output.dir),
            _ => self.output.dir.clone(),
        }
    }

    pub fn case(&self) -> ExponentCase {
        ExponentCase::from_variant(self.constitutive.d_variant)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    ConfigError,
    AdmissibilityFailure,
    NotConverged,
    AuditViolation,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Ok => EXIT_OK,
            RunStatus::ConfigError => EXIT_CONFIG,
            RunStatus::AdmissibilityFailure => EXIT_ADMISSIBILITY,
            RunStatus::NotConverged => EXIT_NOT_CONVERGED,
            RunStatus::AuditViolation => EXIT_AUDIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub exit_code: i32,
    pub dir: PathBuf,
    pub config_hash: String,
    pub message: String,
    /// Flattened audit metrics (empty when no audit ran).
    #[serde(skip)]
    pub metrics: BTreeMap<String, f64>,
}

/// Flatten numbers and booleans of a JSON value into dotted names.
/// Arrays of objects with an `id` field are keyed by that id.
pub fn flatten_metrics(v: &Value) -> BTreeMap<String, f64> {
    fn go(prefix: &str, v: &Value, out: &mut BTreeMap<String, f64>) {
        let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
        match v {
            Value::Number(n) => {
                if let Some(x) = n.as_f64() {
                    out.insert(prefix.to_string(), x);
                }
            }
            Value::Bool(b) => {
                out.insert(prefix.to_string(), if *b { 1.0 } else { 0.0 });
            }
            Value::Object(m) => m.iter().for_each(|(k, v)| go(&join(k), v, out)),
            Value::Array(xs) => {
                for (i, x) in xs.iter().enumerate() {
                    let key = x.get("id").and_then(Value::as_str).map_or(i.to_string(), str::to_string);
                    go(&join(&key), x, out);
                }
            }
            _ => {}
        }
    }
    let mut out = BTreeMap::new();
    go("", v, &mut out);
    out
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn write_csv(path: &Path, metrics: &BTreeMap<String, f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(metrics.keys())?;
    w.write_record(metrics.values().map(|v| fmt_f64(*v)))?;
    w.flush()?;
    Ok(())
}

/// Audit report as written to `balance.jsonl`.
#[derive(Debug, Clone, Serialize)]
pub struct AuditRecord {
    pub balance: BalanceReport,
    pub pressure: Option<PressureTestReport>,
    pub violations: Vec<String>,
}

/// Run the audits configured in `cfg` on a state.
pub fn audit_state(cfg: &RunConfig, problem: &Problem, state: &ApproxState) -> Result<AuditRecord> {
    let win = a_window(cfg.constitutive.gamma, cfg.case());
    let a = cfg.audit.a_bog.or(win.a_chosen);
    let balance = balance_audit(problem, state, &AuditOptions { a_bog: a, helmholtz_h: cfg.audit.helmholtz_h })?;
    let pressure = match (cfg.audit.pressure_test, a) {
        (true, Some(a)) => Some(pressure_estimate_test(problem, state, a)?),
        _ => None,
    };
    let mut violations = Vec::new();
    if !state.density_ok {
        violations.push(format!("negative density: min ρ = {:e}", state.min_rho));
    }
    if balance.mass_err > cfg.audit.mass_tol * cfg.domain.mass {
        violations.push(format!("mass error {:e}", balance.mass_err));
    }
    if balance.entropy_sign_min < -cfg.audit.sign_tol {
        violations.push(format!("negative entropy production {:e}", balance.entropy_sign_min));
    }
    if !(balance.energy_identity_err <= cfg.audit.energy_tol) {
        violations.push(format!("energy identity residual {:e}", balance.energy_identity_err));
    }
    if !balance.psi1_holds {
        violations.push("entropy inequality with ψ ≡ 1 violated".into());
    }
    if let Some(p) = &pressure {
        if !p.identity_ok {
            violations.push(format!("pressure test residual {:e} > {:e}", p.identity_residual, p.bound));
        }
    }
    Ok(AuditRecord { balance, pressure, violations })
}

fn write_audit(cfg: &RunConfig, dir: &Path, name: &str, rec: &AuditRecord) -> Result<BTreeMap<String, f64>> {
    let v = serde_json::to_value(rec)?;
    let metrics = flatten_metrics(&v);
    if cfg.output.jsonl {
        let mut f = fs::File::create(dir.join(format!("{name}.jsonl")))?;
        writeln!(f, "{}", serde_json::to_string(&v)?)?;
    }
    if cfg.output.csv {
        write_csv(&dir.join(format!("{name}.csv")), &metrics)?;
    }
    Ok(metrics)
}

fn write_state(dir: &Path, state: &ApproxState) -> Result<()> {
    state.rho.write_file(&dir.join("rho.pfield"))?;
    state.u.write_file(&dir.join("u.pfield"))?;
    state.log_theta.write_file(&dir.join("log_theta.pfield"))?;
    write_json(
        &dir.join("meta.json"),
        &json!({
            "lambda": state.lambda,
            "converged": state.converged,
            "density_ok": state.density_ok,
            "min_rho": state.min_rho,
            "min_theta": state.min_theta,
            "mass_error": state.mass_error,
            "iterations": state.trace.len(),
        }),
    )?;
    let mut f = fs::File::create(dir.join("trace.jsonl"))?;
    for r in &state.trace {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

/// Load a checkpoint written by [`run_single`].
pub fn read_state(dir: &Path) -> Result<ApproxState> {
    let meta: Value = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let num = |k: &str| meta[k].as_f64().ok_or_else(|| Error::Io(format!("meta.json: missing {k}")));
    let flag = |k: &str| meta[k].as_bool().ok_or_else(|| Error::Io(format!("meta.json: missing {k}")));
    Ok(ApproxState {
        rho: PeriodicField::read_file(&dir.join("rho.pfield"))?,
        u: PeriodicField::read_file(&dir.join("u.pfield"))?,
        log_theta: PeriodicField::read_file(&dir.join("log_theta.pfield"))?,
        lambda: num("lambda")?,
        trace: Vec::new(),
        converged: flag("converged")?,
        min_rho: num("min_rho")?,
        min_theta: num("min_theta")?,
        mass_error: num("mass_error")?,
        density_ok: flag("density_ok")?,
    })
}

fn write_manifest(dir: &Path, cfg: &RunConfig, status: RunStatus, message: &str, started: Instant) -> Result<()> {
    let mut files = BTreeMap::new();
    let mut names: Vec<_> = fs::read_dir(dir)?.filter_map(|e| e.ok()).map(|e| e.file_name()).collect();
    names.sort();
    for n in names {
        let n = n.to_string_lossy().to_string();
        if n != "manifest.json" {
            files.insert(n.clone(), sha256_hex(&fs::read(dir.join(&n))?));
        }
    }
    write_json(
        &dir.join("manifest.json"),
        &json!({
            "config_hash": cfg.hash(),
            "version": env!("CARGO_PKG_VERSION"),
            "status": status,
            "exit_code": status.exit_code(),
            "message": message,
            "files": files,
            "wall_time_s": started.elapsed().as_secs_f64(),
        }),
    )
}

/// Admissibility check → solve → audits, with artifacts in `dir`.
pub fn run_in(cfg: &RunConfig, dir: &Path) -> Result<RunOutcome> {
    let started = Instant::now();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.canonical_text())?;
    let finish = |status: RunStatus, message: String, metrics: BTreeMap<String, f64>| -> Result<RunOutcome> {
        write_manifest(dir, cfg, status, &message, started)?;
        Ok(RunOutcome {
            status,
            exit_code: status.exit_code(),
            dir: dir.to_path_buf(),
            config_hash: cfg.hash(),
            message,
            metrics,
        })
    };

    let gamma = cfg.constitutive.gamma;
    let win = a_window(gamma, cfg.case());
    let a = cfg.audit.a_bog.or(win.a_chosen).unwrap_or(1.0);
    let chain = estimate_chain_report(gamma, a, cfg.case());
    write_json(&dir.join("admissibility.json"), &json!({ "window": win, "chain": chain }))?;
    if win.is_empty() {
        return finish(RunStatus::AdmissibilityFailure, format!("empty exponent window for γ = {gamma}"), BTreeMap::new());
    }
    if let Some(ab) = cfg.audit.a_bog {
        if !win.contains(ab) {
            return finish(RunStatus::AdmissibilityFailure, format!("a = {ab} outside the exponent window"), BTreeMap::new());
        }
    }

    let problem = match cfg.problem() {
        Ok(p) => p,
        Err(e) => return finish(RunStatus::ConfigError, e.to_string(), BTreeMap::new()),
    };
    let state = match fixed_point(&problem, None, &cfg.controls) {
        Ok(s) => s,
        Err(e) => return finish(RunStatus::NotConverged, e.to_string(), BTreeMap::new()),
    };
    write_state(dir, &state)?;
    if !state.converged {
        let last = state.trace.last().map_or(f64::NAN, |r| r.update);
        return finish(
            RunStatus::NotConverged,
            format!("no convergence after {} iterations (last update {last:e})", state.trace.len()),
            BTreeMap::new(),
        );
    }
    let rec = audit_state(cfg, &problem, &state)?;
    let metrics = write_audit(cfg, dir, "balance", &rec)?;
    if rec.violations.is_empty() {
        finish(RunStatus::Ok, "ok".into(), metrics)
    } else {
        finish(RunStatus::AuditViolation, rec.violations.join("; "), metrics)
    }
}

/// [`run_in`] under `<output>/run-<hash prefix>`.
pub fn run_single(cfg: &RunConfig) -> Result<RunOutcome> {
    run_in(cfg, &cfg.output_dir().join(format!("run-{}", &cfg.hash()[..12])))
}

/// Re-audit a checkpoint; writes `audit.jsonl`/`audit.csv` next to it.
pub fn audit_checkpoint(dir: &Path) -> Result<RunOutcome> {
    let cfg = RunConfig::parse(&fs::read_to_string(dir.join("config.txt"))?)?;
    let problem = cfg.problem()?;
    let state = read_state(dir)?;
    let rec = audit_state(&cfg, &problem, &state)?;
    let metrics = write_audit(&cfg, dir, "audit", &rec)?;
    let (status, message) = if rec.violations.is_empty() {
        (RunStatus::Ok, "ok".to_string())
    } else {
        (RunStatus::AuditViolation, rec.violations.join("; "))
    };
    Ok(RunOutcome { status, exit_code: status.exit_code(), dir: dir.to_path_buf(), config_hash: cfg.hash(), message, metrics })
}

/// One swept key and its values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl SweepAxis {
    /// Parse `key=v1,v2,…`.
    pub fn parse(s: &str) -> Result<Self> {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("sweep axis {s:?}: expected key=v1,v2")))?;
        let key = k.trim().to_string();
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown key {key}")));
        }
        if key == "domain.box" || key.starts_with("output.") || key.starts_with("sweep.") {
            return Err(Error::Config(format!("{key} cannot be swept")));
        }
        let values: Vec<String> = v.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("sweep axis {key} has no values")));
        }
        Ok(Self { key, values })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRun {
    pub index: usize,
    /// Relative to the sweep directory.
    pub dir: String,
    pub overrides: Vec<(String, String)>,
    pub config_hash: Option<String>,
    pub status: RunStatus,
    pub exit_code: i32,
    pub message: String,
    #[serde(skip)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepOutcome {
    pub dir: PathBuf,
    pub exit_code: i32,
    pub runs: Vec<SweepRun>,
}

/// Cartesian product of the axes, last axis fastest.
pub fn sweep_points(axes: &[SweepAxis]) -> Vec<Vec<(String, String)>> {
    let mut pts = vec![Vec::new()];
    for ax in axes {
        pts = pts
            .into_iter()
            .flat_map(|p| {
                ax.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((ax.key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    pts
}

fn sweep_one(base: &RunConfig, sweep_dir: &Path, index: usize, ov: Vec<(String, String)>) -> Result<SweepRun> {
    let rel = format!("run-{index:04}");
    let dir = sweep_dir.join(&rel);
    let mut run = SweepRun {
        index,
        dir: rel,
        overrides: ov.clone(),
        config_hash: None,
        status: RunStatus::ConfigError,
        exit_code: EXIT_CONFIG,
        message: String::new(),
        metrics: BTreeMap::new(),
    };
    let cfg = match base.with_overrides(&ov) {
        Ok(c) => c,
        Err(e) => {
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("error.txt"), format!("{e}\n"))?;
            run.message = e.to_string();
            return Ok(run);
        }
    };
    let out = run_in(&cfg, &dir)?;
    run.config_hash = Some(out.config_hash);
    run.status = out.status;
    run.exit_code = out.exit_code;
    run.message = out.message;
    run.metrics = out.metrics;
    Ok(run)
}

/// Run every point of the sweep; results are ordered by point index.
pub fn run_sweep(base: &RunConfig, axes: &[SweepAxis]) -> Result<SweepOutcome> {
    let points = sweep_points(axes);
    if points.len() > base.sweep.max_runs {
        return Err(Error::Config(format!(
            "sweep has {} runs, more than sweep.max_runs = {}",
            points.len(),
            base.sweep.max_runs
        )));
    }
    let id = sha256_hex(format!("{}{}", base.canonical_text(), serde_json::to_string(axes)?).as_bytes());
    let dir = base.output_dir().join(format!("sweep-{}", &id[..12]));
    fs::create_dir_all(&dir)?;
    let jobs: Vec<_> = points.into_iter().enumerate().collect();
    let runs: Vec<SweepRun> = if base.sweep.threads == 1 {
        jobs.into_iter().map(|(i, ov)| sweep_one(base, &dir, i, ov)).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(base.sweep.threads)
            .build()
            .map_err(|e| Error::Resource(e.to_string()))?;
        pool.install(|| jobs.into_par_iter().map(|(i, ov)| sweep_one(base, &dir, i, ov)).collect::<Result<_>>())?
    };

    // Single writer: aggregate CSV and manifest.
    let mut metric_names: Vec<&String> = runs.iter().flat_map(|r| r.metrics.keys()).collect();
    metric_names.sort();
    metric_names.dedup();
    let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
    let mut header = vec!["index".to_string(), "exit_code".into(), "status".into()];
    header.extend(axes.iter().map(|a| a.key.clone()));
    header.extend(metric_names.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for r in &runs {
        let mut row = vec![r.index.to_string(), r.exit_code.to_string(), serde_json::to_value(r.status)?.as_str().unwrap_or("").to_string()];
        row.extend(r.overrides.iter().map(|(_, v)| v.clone()));
        row.extend(metric_names.iter().map(|m| r.metrics.get(*m).map_or(String::new(), |v| fmt_f64(*v))));
        w.write_record(&row)?;
    }
    w.flush()?;
    let exit_code = if runs.iter().any(|r| r.exit_code == EXIT_OK) { EXIT_OK } else { EXIT_SWEEP_FAILED };
    write_json(
        &dir.join("manifest.json"),
        &json!({
            "base_config_hash": base.hash(),
            "axes": axes,
            "version": env!("CARGO_PKG_VERSION"),
            "exit_code": exit_code,
            "runs": &runs,
        }),
    )?;
    Ok(SweepOutcome { dir, exit_code, runs })
}

/// Check that every run referenced by a sweep manifest exists and that its
/// `config.txt` hashes to the recorded value.
pub fn verify_sweep_manifest(dir: &Path) -> Result<usize> {
    let m: Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let runs = m["runs"].as_array().ok_or_else(|| Error::Io("manifest has no runs".into()))?;
    for r in runs {
        let rd = dir.join(r["dir"].as_str().ok_or_else(|| Error::Io("run without dir".into()))?);
        if !rd.is_dir() {
            return Err(Error::Io(format!("{} is missing", rd.display())));
        }
        if let Some(h) = r["config_hash"].as_str() {
            let got = RunConfig::parse(&fs::read_to_string(rd.join("config.txt"))?)?.hash();
            if got != h {
                return Err(Error::Io(format!("{}: config hash mismatch", rd.display())));
            }
        }
    }
    Ok(runs.len())
}
