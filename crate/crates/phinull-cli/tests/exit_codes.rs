use std::path::PathBuf;
use std::process::Command;

fn scratch(name: &str, config: &str) -> (PathBuf, PathBuf) {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, config).unwrap();
    (cfg, dir.join("out"))
}

fn run(sub: &str, cfg: &PathBuf, out: &PathBuf, extra: &[&str]) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_phinull"))
        .arg(sub)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap();
    (o.status.code().unwrap(), String::from_utf8_lossy(&o.stderr).into_owned())
}

#[test]
fn default_operators_check_passes() {
    let (cfg, out) = scratch("ops", "{}");
    let (code, err) = run("operators-check", &cfg, &out, &[]);
    assert_eq!(code, 0, "{err}");
    for f in ["report.json", "operators.csv", "catalog.csv", "plot.gp"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn malformed_config_reports_line() {
    let (cfg, out) = scratch("bad", "{\n  \"steps\": 6,\n  \"n_values\": [7,\n}");
    let (code, err) = run("hum", &cfg, &out, &[]);
    assert_eq!(code, 2);
    assert!(err.contains("line 4"), "{err}");
}

#[test]
fn empty_grid_is_config_error() {
    let (cfg, out) = scratch("empty", r#"{"n_values": []}"#);
    assert_eq!(run("decay-sweep", &cfg, &out, &[]).0, 2);
}

#[test]
fn resource_cap_exit() {
    let (cfg, out) = scratch("cap", r#"{"dims": [2], "n_values": [63], "steps": 12}"#);
    assert_eq!(run("hum", &cfg, &out, &[]).0, 3);
}

#[test]
fn strict_gates_refuse() {
    let (cfg, out) = scratch("strict", r#"{"weights": {"tau": 40.0}}"#);
    assert_eq!(run("hum", &cfg, &out, &["--strict-gates"]).0, 2);
}

#[test]
fn assertion_failure_exit() {
    let (cfg, out) = scratch("fail", r#"{"n_values": [15], "taus": [1.0, 2.0, 4.0]}"#);
    let (code, _) = run("carleman", &cfg, &out, &[]);
    assert_eq!(code, 1);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], false);
}

#[test]
fn seed_override_is_recorded() {
    let (cfg, out) = scratch("seed", r#"{"n_values": [7]}"#);
    assert_eq!(run("semilinear", &cfg, &out, &["--seed", "42"]).0, 0);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 42);
}
