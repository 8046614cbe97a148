use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mamba3-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mamba3-lab-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).expect("report is json")
}

/// Checks the shape the shipped schema promises.
fn assert_report_shape(v: &Value) {
    let obj = v.as_object().unwrap();
    for k in obj.keys() {
        assert!(["config", "checks", "wall_time_s", "result"].contains(&k.as_str()), "stray key {k}");
    }
    assert!(v["config"]["subcommand"].is_string());
    assert!(v["wall_time_s"].as_f64().unwrap() >= 0.0);
    for c in v["checks"].as_array().unwrap() {
        assert!(c["name"].is_string());
        assert!(c["max_err"].is_number());
        assert!(c["pass"].is_boolean());
    }
}

fn csv_rows(path: &PathBuf) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn schema_file_parses_and_names_the_required_fields() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/report.schema.json")).unwrap();
    let schema: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(schema["required"], serde_json::json!(["config", "checks", "wall_time_s"]));
}

#[test]
fn verify_all_passes_and_reports() {
    let o = lab(&["verify", "--suite", "all", "--tol", "1e-10", "--seed", "42", "--trials", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_report_shape(&v);
    assert_eq!(v["config"]["seed"], 42);
    let checks = v["checks"].as_array().unwrap();
    for suite in ["equivalence", "rope", "mimo", "mask", "grad"] {
        assert!(checks.iter().any(|c| c["name"].as_str().unwrap().starts_with(suite)), "{suite} missing");
    }
}

#[test]
fn verify_rope_with_zero_theta_passes() {
    let o = lab(&["verify", "--suite", "rope", "--zero-theta", "--trials", "4"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn corrupted_mask_exits_one_naming_mask() {
    let o = lab(&["verify", "--suite", "mask", "--trials", "3", "--corrupt-mask"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("FAIL mask."), "{err}");
    assert!(err.contains("seed 42"), "{err}");
    let v = stdout_json(&o);
    let failed: Vec<&Value> = v["checks"].as_array().unwrap().iter().filter(|c| c["pass"] == false).collect();
    assert!(!failed.is_empty());
    assert!(failed.iter().all(|c| c["failure"]["dims"].as_str().unwrap().contains("T=")));
}

#[test]
fn verify_is_deterministic() {
    let strip = |o: &Output| {
        let mut v = stdout_json(o);
        v.as_object_mut().unwrap().remove("wall_time_s");
        v
    };
    let a = lab(&["verify", "--suite", "mimo", "--trials", "3", "--seed", "7"]);
    let b = lab(&["verify", "--suite", "mimo", "--trials", "3", "--seed", "7"]);
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(lab(&["bogus"]).status.code(), Some(2));
    assert_eq!(lab(&["verify", "--suite", "nope"]).status.code(), Some(2));
    assert_eq!(lab(&["converge", "--rule", "runge_kutta"]).status.code(), Some(2));
    assert_eq!(lab(&["sweep", "flops", "--t", ""]).status.code(), Some(2));
    assert_eq!(lab(&["--config", "/nonexistent/cfg", "verify"]).status.code(), Some(2));
    assert_eq!(lab(&["train", "--task", "sorting"]).status.code(), Some(2));
    assert_eq!(lab(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_supplies_flags_and_explicit_flags_win() {
    let cfg = scratch("mask.cfg");
    std::fs::write(&cfg, "# negative control\nsuite = mask\ntrials = 2\ncorrupt_mask = true\n").unwrap();
    let o = lab(&["--config", cfg.to_str().unwrap(), "verify"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stdout_json(&o)["config"]["trials"], 2);

    let o = lab(&["--config", cfg.to_str().unwrap(), "verify", "--suite", "rope"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout_json(&o)["config"]["suite"], "rope");

    std::fs::write(&cfg, "flavour = mint\n").unwrap();
    assert_eq!(lab(&["--config", cfg.to_str().unwrap(), "verify"]).status.code(), Some(2));
}

fn slope(rule: &str) -> f64 {
    let out = scratch(&format!("conv_{rule}.csv"));
    let o = lab(&["converge", "--rule", rule, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let line = String::from_utf8_lossy(&o.stdout);
    let (header, rows) = csv_rows(&out);
    assert_eq!(header, ["rule", "delta", "error", "fitted_slope"]);
    assert!(rows.len() >= 4);
    line.trim().strip_prefix("fitted_slope=").unwrap().parse().unwrap()
}

#[test]
fn converge_slopes_match_orders() {
    let trap = slope("exp_trapezoidal");
    assert!((1.8..=2.2).contains(&trap), "{trap}");
    let euler = slope("exp_euler");
    assert!((0.8..=1.2).contains(&euler), "{euler}");
    let fwd = slope("forward_euler");
    assert!((fwd - euler).abs() <= 0.2, "{fwd} vs {euler}");
}

#[test]
fn converge_report_carries_the_slope() {
    let out = scratch("conv_report.csv");
    let rep = scratch("conv_report.json");
    let o = lab(&["converge", "--rule", "exp_euler", "--out", out.to_str().unwrap(), "--report", rep.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&rep).unwrap()).unwrap();
    assert_report_shape(&v);
    assert_eq!(v["result"]["rule"], "exp-euler");
}

#[test]
fn intensity_sweep_is_monotone_in_rank() {
    let out = scratch("intensity.csv");
    let o = lab(&["sweep", "intensity", "--n", "128", "--p", "64", "--r", "1,2,3,4,5,6,7,8", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let (header, rows) = csv_rows(&out);
    assert_eq!(header, ["N", "P", "R", "dtype_bytes", "flops", "bytes", "intensity", "asymptote"]);
    assert_eq!(rows.len(), 8);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let vals: Vec<f64> = rows.iter().map(|r| r[col("intensity")].parse().unwrap()).collect();
    assert!(vals.windows(2).all(|w| w[1] > w[0]), "{vals:?}");
    let lim: f64 = rows[0][col("asymptote")].parse().unwrap();
    assert!(vals.iter().all(|&v| v < lim));
}

#[test]
fn flop_sweep_reproduces_eight_t_r_n_squared() {
    let out = scratch("flops.csv");
    // Step-chunk N/R keeps the widened chunk at N.
    let o = lab(&["sweep", "flops", "--t", "512,1024", "--c", "64", "--n", "64", "--p", "64", "--r", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let (header, rows) = csv_rows(&out);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    for r in &rows {
        assert_eq!(r[col("leading_order")], r[col("eight_trn2")]);
    }
    let o = lab(&["sweep", "flops", "--t", "1024", "--c", "16", "--n", "64", "--p", "64", "--r", "4", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let (_, rows) = csv_rows(&out);
    assert_eq!(rows[0][col("leading_order")], rows[0][col("eight_trn2")]);
}

#[test]
fn rank_one_sweep_rows_equal_siso_rows() {
    let out = scratch("flops_r1.csv");
    let o = lab(&["sweep", "flops", "--t", "256", "--c", "32", "--n", "32", "--p", "16", "--r", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let (header, rows) = csv_rows(&out);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let siso = mamba3_core::ssd::flop_count_siso(256, 32, 32, 16).unwrap();
    assert_eq!(rows[0][col("total")], siso.total.to_string());
    assert_eq!(rows[0][col("intra")], siso.intra.to_string());
}

#[test]
fn tiny_training_run_writes_history_and_checkpoint() {
    let hist = scratch("history.csv");
    let ckpt = scratch("model.ckpt");
    let o = lab(&[
        "train", "--task", "parity", "--lr", "3e-3", "--d-model", "8", "--state", "8", "--heads", "2",
        "--stages", "6,8", "--min-len", "2", "--eval-len", "12", "--steps-per-stage", "4", "--batch", "4", "--length-buckets", "2",
        "--eval-samples", "8", "--log-every", "2", "--history", hist.to_str().unwrap(),
        "--checkpoint", ckpt.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_report_shape(&v);
    let (header, rows) = csv_rows(&hist);
    assert_eq!(header, ["step", "stage", "max_len", "train_loss", "eval_scaled_acc"]);
    assert_eq!(rows.len(), 4);
    let model = mamba3_core::model::Model::load(&ckpt).unwrap();
    assert_eq!(model.config.block.d_model, 8);
}

#[test]
fn unmet_training_target_exits_one() {
    let o = lab(&[
        "train", "--lr", "1e-3", "--d-model", "8", "--state", "8", "--heads", "2", "--stages", "6",
        "--eval-len", "12", "--steps-per-stage", "2", "--batch", "4", "--length-buckets", "2", "--eval-samples", "8", "--target", "1.01",
    ]);
    assert_eq!(o.status.code(), Some(1));
}
