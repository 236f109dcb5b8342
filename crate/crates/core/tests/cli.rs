use std::path::Path;
use std::process::{Command, Output};

use nalgebra::{DMatrix, DVector};
use recurrent_index::data::{save_sample_json, Sample};
use recurrent_index::measure::design_support;
use recurrent_index::simulation::{generate_sample, SimulationConfig, LIGHT_CENSORING_SCALE};
use serde_json::Value;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recurrent-index"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(output: &Output) -> Value {
    serde_json::from_slice(&output.stdout).expect("stdout is JSON")
}

/// No censoring and death past the weight support: the mean is `(theta'z + c) t` there.
/// Returns the first replication whose least-squares solution lies inside the default domain.
fn linear_sample(n: usize, intercept: f64) -> Sample {
    let mut config = SimulationConfig::design(LIGHT_CENSORING_SCALE);
    config.n = n;
    config.censoring.scale = 1e6;
    config.death.scale = 2.0;
    (0..100)
        .map(|rep| generate_sample(&config, rep).unwrap())
        .find(|s| wls_oracle(s, intercept).iter().all(|v| (0.05..2.95).contains(v)))
        .expect("an interior fixture")
}

fn design_sample(n: usize) -> Sample {
    let config = SimulationConfig {
        n,
        ..SimulationConfig::design(LIGHT_CENSORING_SCALE)
    };
    generate_sample(&config, 1).unwrap()
}

fn write_sample(dir: &Path, name: &str, sample: &Sample) -> String {
    let path = dir.join(name);
    save_sample_json(sample, &path).unwrap();
    path.to_str().unwrap().to_string()
}

fn wls_oracle(sample: &Sample, intercept: f64) -> Vec<f64> {
    let upper = sample.max_observation_time();
    let mut lhs = DMatrix::<f64>::zeros(3, 3);
    let mut rhs = DVector::<f64>::zeros(3);
    for s in sample.subjects() {
        let b = DVector::from_column_slice(&s.covariates[1..]);
        let a = s.covariates[0] + intercept;
        for t in design_support().into_iter().filter(|&t| t <= upper) {
            lhs += &b * b.transpose() * (t * t);
            rhs += &b * (t * (s.count(t) as f64 - a * t));
        }
    }
    lhs.lu().solve(&rhs).unwrap().as_slice().to_vec()
}

fn floats(value: &Value) -> Vec<f64> {
    value.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect()
}

#[test]
fn missing_data_file_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("absent.json");
    let result = cli(&["fit", "--data", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(2));
    assert!(result.stdout.is_empty());
    assert!(!out.exists());
    assert!(String::from_utf8_lossy(&result.stderr).contains("absent.json"));
}

#[test]
fn parametric_fit_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let sample = linear_sample(80, 5.0);
    let data = write_sample(dir.path(), "linear.json", &sample);
    let result = cli(&["fit", "--model", "parametric", "--mu0", "linear", "--weights", "fixed", "--data", &data]);
    assert_eq!(result.status.code(), Some(0), "{}", String::from_utf8_lossy(&result.stderr));
    let theta = floats(&json(&result)["report"]["theta_hat"]);
    assert_eq!(theta[0], 1.0);
    let oracle = wls_oracle(&sample, 5.0);
    for (got, want) in theta[1..].iter().zip(&oracle) {
        assert!((got - want).abs() < 1e-5, "{theta:?} vs {oracle:?}");
    }
}

#[test]
fn custom_mean_model_file() {
    let dir = tempfile::tempdir().unwrap();
    let sample = linear_sample(60, 3.0);
    let data = write_sample(dir.path(), "linear.json", &sample);
    let model = dir.path().join("mu0.json");
    std::fs::write(&model, r#"{"intercept": 3.0}"#).unwrap();
    let result = cli(&["fit", "--model", "parametric", "--mu0", model.to_str().unwrap(), "--data", &data]);
    assert_eq!(result.status.code(), Some(0));
    let theta = floats(&json(&result)["report"]["theta_hat"]);
    for (got, want) in theta[1..].iter().zip(wls_oracle(&sample, 3.0)) {
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }
}

#[test]
fn adaptive_single_index_fit_reports_variance() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_sample(dir.path(), "design.json", &design_sample(100));
    let out = dir.path().join("fit");
    let result = cli(&[
        "fit", "--model", "single-index", "--weights", "adaptive", "--bandwidth", "0.2", "--data", &data, "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(0), "{}", String::from_utf8_lossy(&result.stderr));
    let value = json(&result);
    let report = &value["report"];
    assert_eq!(floats(&report["theta_hat"]).len(), 4);
    assert_eq!(floats(&report["weights"]["masses"]).len(), 12);
    let variance = &report["variance"];
    assert_eq!(variance["v_hat"].as_array().unwrap().len(), 3);
    assert!(variance["mse_hat"].as_f64().unwrap() >= 0.0);
    assert!(value["selected_index"].as_u64().unwrap() < 256);
    let file: Value = serde_json::from_slice(&std::fs::read(out.join("fit.json")).unwrap()).unwrap();
    assert_eq!(file, value);
    // the resolved configuration goes to stderr before any result
    assert!(String::from_utf8_lossy(&result.stderr).starts_with("resolved configuration"));
}

#[test]
fn auto_bandwidth_uses_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_sample(dir.path(), "design.json", &design_sample(60));
    let result = cli(&["fit", "--data", &data, "--bandwidth", "auto"]);
    assert_eq!(result.status.code(), Some(2));
    let result = cli(&["fit", "--data", &data, "--bandwidth", "auto", "--h-grid", "0.3:0.2:0.7", "--format", "text"]);
    assert_eq!(result.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&result.stdout).contains("bandwidth"));
}

#[test]
fn simulate_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let result = cli(&["simulate", "--reps", "1", "--n", "10", "--seed", "7", "--out", out.to_str().unwrap()]);
        assert_eq!(result.status.code(), Some(0), "{}", String::from_utf8_lossy(&result.stderr));
        (
            result.stdout,
            std::fs::read(out.join("summary.json")).unwrap(),
            std::fs::read(out.join("records.csv")).unwrap(),
        )
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn simulate_summary_obeys_decomposition() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    let mut design = SimulationConfig::design(LIGHT_CENSORING_SCALE);
    design.n = 40;
    design.reps = 4;
    design.bandwidth = 0.5;
    std::fs::write(&config, serde_json::to_string(&design).unwrap()).unwrap();
    let result = cli(&["simulate", "--config", config.to_str().unwrap(), "--seed", "5"]);
    assert_eq!(result.status.code(), Some(0), "{}", String::from_utf8_lossy(&result.stderr));
    let value = json(&result);
    for arm in value["summary"]["arms"].as_array().unwrap() {
        let bias = floats(&arm["bias"]);
        let cov = arm["variance"].as_array().unwrap();
        let trace: f64 = (0..3).map(|j| cov[j][j].as_f64().unwrap()).sum();
        let bias_sq: f64 = bias.iter().map(|b| b * b).sum();
        assert!((arm["mse"].as_f64().unwrap() - bias_sq - trace).abs() < 1e-12);
    }
}

#[test]
fn configuration_errors_exit_2() {
    assert_eq!(cli(&["reproduce", "--table", "4"]).status.code(), Some(2));
    assert_eq!(cli(&["simulate", "--require-seed", "--reps", "1"]).status.code(), Some(2));
    assert_eq!(cli(&["reproduce", "--table", "1", "--require-seed"]).status.code(), Some(2));
    assert_eq!(cli(&["simulate", "--n", "1", "--seed", "1"]).status.code(), Some(2));
    assert_eq!(cli(&["fit", "--data", "x.json", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn reproduce_reports_failure_with_exit_5() {
    let result = cli(&["reproduce", "--table", "1", "--seed", "1", "--reps", "2", "--n", "40"]);
    let text = String::from_utf8_lossy(&result.stdout).to_string();
    assert!(text.contains("fixed-w mse"));
    let any_fail = text.lines().any(|l| l.trim_end().ends_with("FAIL"));
    assert_eq!(result.status.code(), Some(if any_fail { 5 } else { 0 }));
}
