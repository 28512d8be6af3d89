use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config() -> PathBuf {
    workspace().join("configs/default.txt")
}

/// Small-sample overrides so every run finishes in well under a second.
const FAST: [&str; 6] = [
    "--override",
    "mc_outer=120",
    "--override",
    "n_steps=4",
    "--override",
    "quad_order=16",
];

fn mfg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfg"))
        .args(args)
        .env_remove("MFG_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn required(def: &str) -> Vec<String> {
    let schema = read_json(&workspace().join("docs/report.schema.json"));
    schema["$defs"][def]["required"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect()
}

fn assert_has_keys(v: &Value, def: &str) {
    for key in required(def) {
        assert!(v.get(&key).is_some(), "missing `{key}` for {def}: {v}");
    }
}

#[test]
fn validate_prints_ok() {
    let out = mfg(&["validate", config().to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("ok\n"));
    assert!(stdout.contains("lambda = 2"));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let cfg = config();
    let cfg = cfg.to_str().unwrap();
    let out = mfg(&["converge", cfg, "--study", "bogus"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--study"));
    assert_eq!(code(&mfg(&["validate", "/definitely/not/here.txt"])), 2);
    assert_eq!(code(&mfg(&["validate", cfg, "--override", "nope=1"])), 2);
    assert_eq!(code(&mfg(&["validate", cfg, "--override", "alpha=abc"])), 2);
    assert_eq!(code(&mfg(&["validate", cfg, "--frobnicate"])), 2);
    assert_eq!(code(&mfg(&["forward", cfg, "--out", "/definitely/not/here/r.json"])), 2);
    assert_eq!(code(&mfg(&["verify", cfg, "--perturbations", "3"])), 2);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "[model]\nalpha = 2\n").unwrap();
    let out = mfg(&["validate", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing required key `gamma`"));
}

#[test]
fn thread_cap_must_be_positive() {
    let out = Command::new(env!("CARGO_BIN_EXE_mfg"))
        .args(["validate", config().to_str().unwrap()])
        .env("MFG_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_mfg"))
        .args(["validate", config().to_str().unwrap()])
        .env("MFG_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
}

#[test]
fn converge_is_byte_identical_and_records_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config();
    let run = |name: &str| {
        let out_path = dir.path().join(name);
        let mut args = vec![
            "converge",
            cfg.to_str().unwrap(),
            "--study",
            "forward",
            "--n-list",
            "4,8,16",
            "--reps",
            "100",
            "--seed",
            "7",
            "--out",
            out_path.to_str().unwrap(),
        ];
        args.extend(FAST);
        let out = mfg(&args);
        assert!(matches!(code(&out), 0 | 1), "{}", String::from_utf8_lossy(&out.stderr));
        out_path
    };
    let a = run("a.json");
    let b = run("b.json");
    let csv_a = std::fs::read(a.with_extension("csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(b.with_extension("csv")).unwrap());
    let text = String::from_utf8(csv_a).unwrap();
    assert!(text.starts_with("study,N,reps,err_mean,err_std,excluded\nforward,4,100,"));

    let report = read_json(&a);
    assert_has_keys(&report, "convergence_report");
    assert_eq!(report["study"], "forward");
    assert_eq!(report["seed"], 7);
    let overrides: Vec<&str> = report["overrides"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(overrides, ["mc_outer=120", "n_steps=4", "quad_order=16", "seed=7"]);
    assert_eq!(report["points"].as_array().unwrap().len(), 3);
}

#[test]
fn failing_study_exits_1_with_failures() {
    // Null terminal and driver: every point sits at the floor, so no slope can be fitted.
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("null.json");
    let cfg = config();
    let mut args = vec![
        "converge",
        cfg.to_str().unwrap(),
        "--study",
        "bsde",
        "--n-list",
        "2,4,8",
        "--reps",
        "1",
        "--override",
        "kappa_phi=0",
        "--override",
        "kappa_g=0",
        "--override",
        "a_lin=0",
        "--override",
        "c_lin=0",
        "--out",
        out_path.to_str().unwrap(),
    ];
    args.extend(FAST);
    let out = mfg(&args);
    assert_eq!(code(&out), 1);
    let report = read_json(&out_path);
    assert_eq!(report["pass"], false);
    assert!(!report["failures"].as_array().unwrap().is_empty());
}

#[test]
fn single_runs_write_envelopes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config();
    for cmd in [
        &["validate"][..],
        &["forward", "--n", "3"],
        &["bsde", "--n", "3"],
        &["saddle", "--n", "3"],
        &["limit"],
    ] {
        let out_path = dir.path().join(format!("{}.json", cmd[0]));
        let mut args = vec![cmd[0], cfg.to_str().unwrap()];
        args.extend(&cmd[1..]);
        args.extend(["--out", out_path.to_str().unwrap()]);
        args.extend(FAST);
        let out = mfg(&args);
        assert_eq!(code(&out), 0, "{cmd:?}: {}", String::from_utf8_lossy(&out.stderr));
        let v = read_json(&out_path);
        assert_has_keys(&v, "envelope");
        assert_eq!(v["command"], cmd[0]);
        assert_eq!(v["pass"], true);
    }
}

#[test]
fn verify_reports_checks() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("v.json");
    let cfg = config();
    let mut args = vec![
        "verify",
        cfg.to_str().unwrap(),
        "--n",
        "3",
        "--perturbations",
        "20",
        "--delta",
        "0.3",
        "--out",
        out_path.to_str().unwrap(),
    ];
    args.extend(FAST);
    let out = mfg(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = read_json(&out_path);
    assert_has_keys(&v["result"], "verification_report");
    assert_eq!(v["result"]["checks"].as_array().unwrap().len(), 120);
    assert!(v["failures"].as_array().unwrap().is_empty());
}
