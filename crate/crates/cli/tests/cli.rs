use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn moekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moekit")).args(args).output().expect("spawn moekit")
}

fn json_stdout(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_fit_loss_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let truth = dir.path().join("truth.json");
    let fitted = dir.path().join("fitted.json");

    let sim = json_stdout(&moekit(&["simulate", "--theorem", "2", "--n", "300", "--seed", "3", "--out", p(&data)]));
    assert_eq!(sim["n"], 300);
    let header = std::fs::read_to_string(&data).unwrap();
    assert!(header.starts_with("x_0,y"));

    let fit = json_stdout(&moekit(&[
        "fit", "--data", p(&data), "--k1", "1", "--k2", "2", "--restarts", "1", "--max-iter", "30", "--out", p(&fitted),
    ]));
    assert!(fit["loglik"].as_f64().unwrap().is_finite());

    // The fitted model doubles as a truth file for the loss command.
    std::fs::copy(&fitted, &truth).unwrap();
    let loss = json_stdout(&moekit(&["loss", "--fitted", p(&fitted), "--truth", p(&truth), "--loss", "d2"]));
    assert!(loss["loss"].as_f64().unwrap().abs() < 1e-12);
    assert!(loss["cells"].is_object());

    let tv = json_stdout(&moekit(&["tv", "--a", p(&fitted), "--b", p(&truth), "--n-x", "20"]));
    assert!(tv["tv"].as_f64().unwrap() < 1e-9);
}

#[test]
fn d2_on_gelu_models_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let model = dir.path().join("m.json");
    json_stdout(&moekit(&["simulate", "--theorem", "1", "--n", "60", "--out", p(&data)]));
    json_stdout(&moekit(&[
        "fit", "--data", p(&data), "--k1", "1", "--k2", "2", "--shared-family", "gelu-bias", "--routed-family", "gelu",
        "--restarts", "1", "--max-iter", "3", "--out", p(&model),
    ]));
    let out = moekit(&["loss", "--fitted", p(&model), "--truth", p(&model), "--loss", "d2"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: "), "{err}");
    assert!(err.contains("linear family required"), "{err}");
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(moekit(&["bench", "--theorem", "9", "--out", "x.csv"]).status.code(), Some(2));
    assert_eq!(moekit(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(moekit(&["polysys", "--system", "r1", "--m", "two", "--r", "3"]).status.code(), Some(2));
}

#[test]
fn missing_input_file_exits_with_one() {
    let out = moekit(&["ident", "--model", "/nonexistent/model.json", "--mode", "weak"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn polysys_reports_trivial_system() {
    let v = json_stdout(&moekit(&["polysys", "--system", "r1", "--m", "1", "--r", "1", "--restarts", "5", "--seed", "1"]));
    assert_eq!(v["found"], false);
    assert!(v["vars"].is_null());
}

#[test]
fn ident_weak_passes_for_linear_truth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    // A fitted model serves as truth for a tiny bench config.
    let data = dir.path().join("d.csv");
    let model = dir.path().join("m.json");
    json_stdout(&moekit(&["simulate", "--theorem", "2", "--n", "80", "--out", p(&data)]));
    json_stdout(&moekit(&["fit", "--data", p(&data), "--k1", "1", "--k2", "2", "--restarts", "1", "--max-iter", "5", "--out", p(&model)]));
    let v = json_stdout(&moekit(&["ident", "--model", p(&model), "--mode", "weak", "--grid", "128"]));
    assert_eq!(v["pass"], true);

    let truth: Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    let config = serde_json::json!({
        "truth": truth, "fitted_k1": 1, "fitted_k2": 2, "loss": "d2",
        "n_grid": [40, 80], "reps": 2,
        "em": { "tol": 1e-4, "max_iter": 20, "restarts": 1, "inner_steps": 5, "seed": 0, "init_box_scale": 1.0 },
        "init_noise": 0.1
    });
    std::fs::write(&cfg, config.to_string()).unwrap();
    let out_csv = dir.path().join("bench.csv");
    let b = json_stdout(&moekit(&["bench", "--config", p(&cfg), "--out", p(&out_csv)]));
    assert_eq!(b["records"], 4);
    let csv = std::fs::read_to_string(&out_csv).unwrap();
    assert!(csv.starts_with("n,rep,loss,loglik,iterations,converged,seed"));
}

#[test]
fn router_single_metric_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("layer0.csv");
    std::fs::write(
        &log,
        "checkpoint,token,experts\n0,0,0\n0,1,1\n0,2,0\n1,0,0\n1,1,1\n1,2,1\n2,0,0\n2,1,1\n2,2,1\n",
    )
    .unwrap();
    let sat = json_stdout(&moekit(&["router", "--log", p(&log), "--metric", "saturation", "--t", "0", "--num-experts", "2"]));
    assert!((sat["value"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    let jain = json_stdout(&moekit(&["router", "--log", p(&log), "--metric", "jain", "--t", "2", "--num-experts", "2"]));
    assert!((jain["value"].as_f64().unwrap() - 0.9).abs() < 1e-12);

    let curve = dir.path().join("curve.csv");
    json_stdout(&moekit(&["router", "--log", p(&log), "--curve", p(&curve), "--num-experts", "2"]));
    let text = std::fs::read_to_string(&curve).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "label,checkpoint,checkpoint_fraction,saturation,change_rate,jain");
    assert!(lines.next().unwrap().starts_with("layer0,0,"));
    assert_eq!(lines.count(), 2);
}
