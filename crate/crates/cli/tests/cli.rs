use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nsf_periodic::cli_io::verify_sweep_manifest;

fn nsf(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nsf"))
        .args(args)
        .env("NSF_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

const SMALL: &[&str] = &["--approx.n_t", "1", "--approx.n_x", "2", "--domain.force", "zero"];

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(SMALL).copied().collect()
}

fn only_dir(p: &Path) -> std::path::PathBuf {
    let mut d: Vec<_> = fs::read_dir(p).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(d.len(), 1, "{d:?}");
    d.pop().unwrap()
}

#[test]
fn trivial_solve_then_reaudit() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nsf(tmp.path(), &with_small(&["solve"]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let run = only_dir(&tmp.path().join("runs"));
    for f in ["config.txt", "admissibility.json", "rho.pfield", "u.pfield", "log_theta.pfield", "meta.json", "trace.jsonl", "balance.jsonl", "balance.csv", "manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let bal: serde_json::Value = serde_json::from_str(fs::read_to_string(run.join("balance.jsonl")).unwrap().trim()).unwrap();
    assert!(bal["balance"]["energy_identity_err"].as_f64().unwrap() < 1e-6);
    assert!(bal["balance"]["mass_err"].as_f64().unwrap() < 1e-12);
    let out = nsf(tmp.path(), &["audit", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read(run.join("audit.jsonl")).unwrap(), fs::read(run.join("balance.jsonl")).unwrap());
}

#[test]
fn admissibility_failure_is_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let args = with_small(&["solve", "--constitutive.gamma", "1.5", "--constitutive.d_variant", "temp_dependent"]);
    assert_eq!(nsf(tmp.path(), &args).status.code(), Some(2));
    let out = nsf(tmp.path(), &["admissibility", "--constitutive.gamma=1.5", "--json"]);
    assert_eq!(out.status.code(), Some(2));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["window"]["admissible"], false);
    let out = nsf(tmp.path(), &["admissibility", "--constitutive.gamma", "1.7"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn malformed_config_is_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nsf(tmp.path(), &["solve", "--approx.delta", "-0.01"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("delta"));
    assert_eq!(nsf(tmp.path(), &["solve", "--approx.nope", "1"]).status.code(), Some(1));
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "constitutive.gamma = 1.7\nunknown.key = 3\n").unwrap();
    assert_eq!(nsf(tmp.path(), &["solve", "-c", cfg.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn sweep_delta_on_trivial_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nsf(tmp.path(), &with_small(&["sweep", "--axis", "approx.delta=0.1,0.01"]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let sweep = only_dir(&tmp.path().join("runs"));
    assert_eq!(verify_sweep_manifest(&sweep).unwrap(), 2);
    let csv = fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("0,0,ok,0.1,") && rows[2].starts_with("1,0,ok,0.01,"));
}

#[test]
fn sweep_gamma_across_the_radiation_threshold() {
    let tmp = tempfile::tempdir().unwrap();
    let args = with_small(&["sweep", "--axis", "constitutive.gamma=1.5,1.6,1.7", "--sweep.threads", "2"]);
    let out = nsf(tmp.path(), &args);
    assert_eq!(out.status.code(), Some(0));
    let sweep = only_dir(&tmp.path().join("runs"));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(sweep.join("manifest.json")).unwrap()).unwrap();
    let codes: Vec<i64> = m["runs"].as_array().unwrap().iter().map(|r| r["exit_code"].as_i64().unwrap()).collect();
    assert_eq!(codes[0], 2);
    assert!(codes[1..].iter().all(|c| *c != 2), "{codes:?}");
}

#[test]
fn sweep_over_cap_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let args = with_small(&["sweep", "--axis", "approx.delta=0.1,0.01,0.001", "--sweep.max_runs", "2"]);
    assert_eq!(nsf(tmp.path(), &args).status.code(), Some(1));
}

#[test]
fn all_runs_failing_is_exit_5() {
    let tmp = tempfile::tempdir().unwrap();
    let args = with_small(&["sweep", "--axis", "constitutive.gamma=1.5,1.52", "--constitutive.d_variant", "temp_dependent"]);
    assert_eq!(nsf(tmp.path(), &args).status.code(), Some(5));
}

#[test]
fn repeated_solves_are_bit_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = with_small(&["solve", "--domain.force", "shear", "--domain.force_amplitude", "0.3"]);
    assert_eq!(nsf(a.path(), &args).status.code(), Some(0));
    assert_eq!(nsf(b.path(), &args).status.code(), Some(0));
    let (ra, rb) = (only_dir(&a.path().join("runs")), only_dir(&b.path().join("runs")));
    assert_eq!(ra.file_name(), rb.file_name());
    for e in fs::read_dir(&ra).unwrap() {
        let name = e.unwrap().file_name();
        if name == "manifest.json" {
            continue;
        }
        assert_eq!(fs::read(ra.join(&name)).unwrap(), fs::read(rb.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn config_subcommand_prints_canonical_text() {
    let tmp = tempfile::tempdir().unwrap();
    let out = nsf(tmp.path(), &["config", "--approx.delta", "0.1"]);
    assert_eq!(out.status.code(), Some(0));
    let s = String::from_utf8_lossy(&out.stdout);
    assert!(s.contains("approx.eps = 0.010000000000000002") || s.contains("approx.eps = 0.01"));
    assert!(s.contains("# sha256 "));
}
