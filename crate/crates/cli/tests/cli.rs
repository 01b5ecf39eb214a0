use std::path::Path;
use std::process::{Command, Output};

fn amm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amm")).args(args).output().expect("spawn amm")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Header and first data row of a small unquoted CSV, as a field lookup.
fn first_row(path: &Path) -> Vec<(String, String)> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    header.into_iter().zip(row).map(|(h, v)| (h.to_string(), v.to_string())).collect()
}

fn field(row: &[(String, String)], name: &str) -> f64 {
    row.iter().find(|(h, _)| h == name).unwrap().1.parse().unwrap()
}

#[test]
fn toy_min_exp_reaches_the_oracle_margin() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let run = amm(&["toy", "--agg", "min", "--shrink", "exp", "--out", out]);
    assert!(run.status.success(), "{}", stderr(&run));
    let summary = first_row(&dir.path().join("summary.csv"));
    assert!(field(&summary, "margin_ratio") >= 0.95);
    for f in ["grid.csv", "history.csv", "manifest.json"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.toml");
    std::fs::write(&cfg, "[regularizer]\nlambda = 0.5\nc = 2.0\n\n[train]\nmax_epochs = 5\n").unwrap();
    let out = dir.path().join("run");
    let run = amm(&["toy", "--config", cfg.to_str().unwrap(), "--lambda", "3", "--out", out.to_str().unwrap()]);
    assert!(run.status.success(), "{}", stderr(&run));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let reg = &manifest["config"]["regularizer"];
    assert_eq!(reg["lambda"], 3.0);
    assert_eq!(reg["c"], 2.0);
    assert_eq!(manifest["config"]["train"]["max_epochs"], 5);
    assert_eq!(std::fs::read_to_string(out.join("history.csv")).unwrap().lines().count(), 6);
}

#[test]
fn misspelled_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[regularizer]\nlamda = 1.0\n").unwrap();
    let run = amm(&["toy", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!run.status.success());
    assert!(stderr(&run).contains("lamda"), "{}", stderr(&run));
}

#[test]
fn unknown_subcommand_prints_usage() {
    let run = amm(&["fit"]);
    assert!(!run.status.success());
    assert!(stderr(&run).contains("Usage"), "{}", stderr(&run));
}

#[test]
fn gradcheck_passes_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let run = amm(&["gradcheck", "--networks", "3", "--out", dir.path().to_str().unwrap()]);
    assert!(run.status.success(), "{}", stderr(&run));
    let norm = std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert!(norm.starts_with("network,dims,parameter,iterations,max_rel_error\n"));
    assert!(norm.lines().count() > 3);
    assert!(dir.path().join("primitives.csv").is_file());
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    let run = amm(&["eval", "--checkpoint", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(1));
    assert!(stderr(&run).starts_with("error:"), "{}", stderr(&run));
}
