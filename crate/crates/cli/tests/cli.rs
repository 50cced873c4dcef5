//! End-to-end checks of the command-line surface: artifacts on disk, exit
//! codes, and config-echo reproducibility.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fleet-align"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn tiny_fleet(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("fleet");
    let o = run(&[
        "generate-fleet",
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "5",
        "--set",
        "fleet.units=4",
        "--set",
        "fleet.targets=1",
        "--set",
        "fleet.rows=400",
        "--set",
        "fleet.channels=6",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn generate_fleet_writes_manifest_csvs_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    let fleet = tiny_fleet(dir.path());
    assert!(fleet.join("fleet.csv").exists());
    assert!(fleet.join("unit00.csv").exists());
    assert!(fleet.join("unit03.csv").exists());
    assert!(fleet.join("generator-meta.json").exists());
    let echo = std::fs::read_to_string(fleet.join("config-echo.txt")).unwrap();
    assert!(echo.contains("seed = 5"), "{echo}");
    assert!(echo.contains("fleet.units = 4"));
}

#[test]
fn unknown_kind_exits_with_config_error_naming_valid_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let fleet = tiny_fleet(dir.path());
    let o = bin()
        .args([
            "train",
            "--out",
            dir.path().join("run").to_str().unwrap(),
            "--set",
            &format!("data.manifest={}", fleet.join("fleet.csv").display()),
            "--set",
            "kind=quantum",
            "--set",
            "pair.target=unit00",
            "--set",
            "pair.source=unit01",
        ])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("hafas") && err.contains("beta-vae"), "{err}");
}

#[test]
fn missing_config_file_is_a_config_error() {
    let o = run(&["sweep", "--config", "/nonexistent/path.cfg"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_bundle_and_run_record() {
    let dir = tempfile::tempdir().unwrap();
    let fleet = tiny_fleet(dir.path());
    let out = dir.path().join("run");
    let o = run(&[
        "train",
        "--out",
        out.to_str().unwrap(),
        "--set",
        &format!("data.manifest={}", fleet.join("fleet.csv").display()),
        "--set",
        "kind=hafas",
        "--set",
        "pair.target=unit00",
        "--set",
        "pair.source=unit01",
        "--set",
        "epochs=2",
        "--set",
        "batch_size=64",
        "--set",
        "elm.hidden=20",
        "--set",
        "split.target_train_rows=80",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("model.bundle").exists());
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["kind"], "hafas");
    assert!(record["evaluation"]["fpr"].is_number());
}

#[test]
fn sweep_emits_results_and_tables_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let fleet = tiny_fleet(dir.path());
    let sweep_args = |out: &Path| {
        vec![
            "sweep".to_string(),
            "--out".into(),
            out.to_str().unwrap().into(),
            "--seed".into(),
            "9".into(),
            "--workers".into(),
            "1".into(),
            "--set".into(),
            format!("data.manifest={}", fleet.join("fleet.csv").display()),
            "--set".into(),
            "architectures=helm,hfa".into(),
            "--set".into(),
            "epochs=2".into(),
            "--set".into(),
            "batch_size=64".into(),
            "--set".into(),
            "elm.hidden=20".into(),
            "--set".into(),
            "split.target_train_rows=80".into(),
        ]
    };
    let out1 = dir.path().join("sweep1");
    let o = bin().args(sweep_args(&out1)).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let results = std::fs::read_to_string(out1.join("results.jsonl")).unwrap();
    assert_eq!(results.lines().count(), 3 * 2);
    let table = std::fs::read_to_string(out1.join("table1_aligned_counts.csv")).unwrap();
    assert!(table.starts_with("unit,helm,hfa"), "{table}");
    assert!(table.contains("R%(5%)"));
    assert!(out1.join("table2_best_fpr.csv").exists());
    assert!(out1.join("summary.json").exists());

    let out2 = dir.path().join("sweep2");
    let o = bin().args(sweep_args(&out2)).output().unwrap();
    assert!(o.status.success());
    let results2 = std::fs::read_to_string(out2.join("results.jsonl")).unwrap();
    assert_eq!(results, results2, "same master seed must give identical bytes");
}

#[test]
fn select_source_then_report_renders_mmd_table() {
    let dir = tempfile::tempdir().unwrap();
    let fleet = tiny_fleet(dir.path());
    let manifest = format!("data.manifest={}", fleet.join("fleet.csv").display());
    let sel_out = dir.path().join("sel");
    let o = run(&[
        "select-source",
        "--out",
        sel_out.to_str().unwrap(),
        "--set",
        &manifest,
        "--set",
        "split.target_train_rows=80",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let selection = std::fs::read_to_string(sel_out.join("selection.csv")).unwrap();
    assert!(selection.starts_with("target,source\nunit00,"), "{selection}");
    assert!(sel_out.join("mmd_values.csv").exists());

    let sweep_out = dir.path().join("swp");
    let o = run(&[
        "sweep",
        "--out",
        sweep_out.to_str().unwrap(),
        "--workers",
        "1",
        "--set",
        &manifest,
        "--set",
        "architectures=helm",
        "--set",
        "epochs=1",
        "--set",
        "batch_size=64",
        "--set",
        "elm.hidden=20",
        "--set",
        "split.target_train_rows=80",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let rep_out = dir.path().join("rep");
    let o = run(&[
        "report",
        "--out",
        rep_out.to_str().unwrap(),
        "--set",
        &format!("results={}", sweep_out.join("results.jsonl").display()),
        "--set",
        &format!("selection={}", sel_out.join("selection.csv").display()),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t3 = std::fs::read_to_string(rep_out.join("table3_mmd_selection.csv")).unwrap();
    assert!(t3.starts_with("unit,helm"), "{t3}");
    assert!(t3.contains("#AP"), "{t3}");
}

#[test]
fn inputs_are_never_mutated() {
    let dir = tempfile::tempdir().unwrap();
    let fleet = tiny_fleet(dir.path());
    let before = std::fs::read(fleet.join("unit00.csv")).unwrap();
    let out = dir.path().join("p");
    let o = run(&[
        "prepare",
        "--out",
        out.to_str().unwrap(),
        "--set",
        &format!("data.manifest={}", fleet.join("fleet.csv").display()),
        "--set",
        "split.target_train_rows=80",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("unit00.clean.csv").exists());
    assert!(out.join("unit00.norm.csv").exists());
    assert!(out.join("unit00.params").exists());
    let after = std::fs::read(fleet.join("unit00.csv")).unwrap();
    assert_eq!(before, after);
}
