use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use twostage_vae::diagnostics::REPORT_FIELDS;

fn twostage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twostage")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, json: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p.to_str().unwrap().to_string()
}

const TINY_RUN: &str = r#"{
    "manifold": "circle-arc",
    "n_train": 200,
    "n_heldout": 100,
    "kappa": 2,
    "hidden_stage1": [8],
    "hidden_stage2": [8],
    "stage1": {"epochs": 3, "batch_size": 50, "base_lr": 0.001},
    "stage2": {"epochs": 2, "batch_size": 50, "base_lr": 0.001},
    "seed": 11,
    "n_eval": 100,
    "n_permutations": 10
}"#;

#[test]
fn missing_preset_exits_2_and_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"n_train": 100}"#);
    let out = dir.path().join("out");
    let o = twostage(&["two-stage", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("manifold"), "{err}");
}

#[test]
fn unknown_preset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"manifold": "torus"}"#);
    let o = twostage(&["two-stage", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unreadable_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = twostage(&[
        "two-stage",
        "--config",
        dir.path().join("absent.json").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn two_stage_writes_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", TINY_RUN);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = twostage(&["two-stage", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let traces = fs::read_to_string(a.join("traces.csv")).unwrap();
    assert_eq!(traces, fs::read_to_string(b.join("traces.csv")).unwrap());
    let lines: Vec<&str> = traces.lines().collect();
    assert_eq!(lines[0], "stage,epoch,neg_elbo,recon_mse,kl,log_gamma");
    assert_eq!(lines.len(), 1 + 3 + 2);
    assert!(lines[1].starts_with("1,0,"));
    assert!(lines[4].starts_with("2,0,"));
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
    assert_eq!(fs::read(a.join("stage1.ckpt")).unwrap(), fs::read(b.join("stage1.ckpt")).unwrap());
    assert!(a.join("stage2.ckpt").exists());

    let report: Value = serde_json::from_str(&fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    let keys: Vec<&String> = report.as_object().unwrap().keys().collect();
    let mut expected: Vec<&str> = REPORT_FIELDS.to_vec();
    expected.sort_unstable();
    let mut got: Vec<&str> = keys.iter().map(|k| k.as_str()).collect();
    got.sort_unstable();
    assert_eq!(got, expected);

    let mut entries: Vec<String> =
        fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    entries.sort();
    assert_eq!(entries, ["report.json", "stage1.ckpt", "stage2.ckpt", "traces.csv"]);
}

#[test]
fn diagnose_reads_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", TINY_RUN);
    let run_dir = dir.path().join("run");
    assert!(twostage(&["two-stage", "--config", &cfg, "--out", run_dir.to_str().unwrap()]).status.success());
    let dcfg = write_config(dir.path(), "d.json", r#"{"manifold": "circle-arc", "n": 150, "n_permutations": 5}"#);
    let out = dir.path().join("diag");
    let o = twostage(&[
        "diagnose",
        run_dir.join("stage1.ckpt").to_str().unwrap(),
        "--config",
        &dcfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("diagnose.json")).unwrap()).unwrap();
    assert_eq!(report["kappa"], 2);
    assert_eq!(report["ambient_dim"], 2);
    assert_eq!(report["posterior_mean_variances"].as_array().unwrap().len(), 2);
}

#[test]
fn diagnose_rejects_corrupt_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    fs::write(&ckpt, b"NOTAMODEL").unwrap();
    let o = twostage(&["diagnose", ckpt.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));
}

#[test]
fn oracle_normal_matches_closed_forms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "o.json",
        r#"{"density": "normal-1d", "gammas": [0.01, 0.001, 0.0001], "n_pushforward": 20000}"#,
    );
    let out = dir.path().join("o");
    let o = twostage(&["oracle-theorem1", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("oracle_report.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for row in rows {
        let tv = row["tv"].as_f64().unwrap();
        let tv_cf = row["tv_closed_form"].as_f64().unwrap();
        assert!((tv - tv_cf).abs() < 1e-6, "{tv} vs {tv_cf}");
        let kl = row["posterior_kl"].as_f64().unwrap();
        let kl_cf = row["posterior_kl_closed_form"].as_f64().unwrap();
        assert!((kl - kl_cf).abs() < 1e-6, "{kl} vs {kl_cf}");
    }
}

#[test]
fn oracle_unknown_density_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "o.json", r#"{"density": "cauchy-1d"}"#);
    let o = twostage(&["oracle-theorem1", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn kappa_sweep_writes_one_row_per_kappa() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "s.json", &format!(r#"{{"kappas": [1, 2], "run": {TINY_RUN}}}"#));
    let out = dir.path().join("s");
    let o = twostage(&["kappa-sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("kappa,recon_mse,active_dim_estimate,energy_distance_1stage,energy_distance_2stage"));
    assert!(lines[1].starts_with("1,"));
    assert!(lines[2].starts_with("2,"));
}

#[test]
fn default_config_on_benchmark_orders_mmd() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"manifold": "tanh-embed-2-10"}"#);
    let out = dir.path().join("run");
    let o = twostage(&["two-stage", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let m1 = report["mmd_stage1"].as_f64().unwrap();
    let m2 = report["mmd_stage2"].as_f64().unwrap();
    assert!(m2 < m1, "mmd_stage2 {m2} >= mmd_stage1 {m1}");
}
