use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use strat_tte::data::SchemaConfig;
use strat_tte::sim::{generate_trial, DgmConfig};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_strat-tte")).args(args).env_remove("STRAT_TTE_THREADS").output().unwrap()
}

fn write_toy(dir: &Path) -> String {
    let ds = generate_trial(&DgmConfig { n: 300, seed: 42, ..DgmConfig::default() }).unwrap();
    let path = dir.join("trial.csv");
    fs::write(&path, ds.to_csv(&SchemaConfig::default()).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const KM_AND_LASSO: &str = r#"{
  "estimands": [{"kind": "rd", "time": 3}],
  "methods": [
    {"method": "km", "nuisance": {"learner": {"kind": "intercept-only"}}},
    {"method": "tmle", "nuisance": {"learner": {"kind": "lasso"}, "features": {"covariates": ["W1", "W3", "W5"]}}}
  ]
}"#;

#[test]
fn missing_data_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("res");
    let o = run(&["analyze", "--data", "/nonexistent/trial.csv", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("trial.csv"));
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_toy(dir.path());
    let cfg = write(dir.path(), "bad.json", r#"{"estimands": [{"kind": "rd", "time": 3}], "bogus": 1}"#);
    let o = run(&["analyze", "--data", &data, "--config", &cfg, "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let late = write(dir.path(), "late.json", r#"{"estimands": [{"kind": "rd", "time": 9}]}"#);
    let o = run(&["analyze", "--data", &data, "--config", &late, "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_row_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "t.csv", "id,a,u,delta,w\n1,1,2,1,A\n2,0,1,0,A\n3,1,x,1,B\n4,0,1,1,B\n");
    let o = run(&["analyze", "--data", &data, "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 4"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn estimation_failure_exits_3_and_names_the_cell() {
    // nobody survives to t = 2 in the control arm, so the risk ratio is undefined
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "t.csv", "id,a,u,delta,w\n1,1,2,0,A\n2,0,1,1,A\n3,1,2,1,B\n4,0,1,1,B\n5,1,2,0,A\n");
    let cfg = write(
        dir.path(),
        "c.json",
        r#"{"estimands": [{"kind": "rr", "time": 2}], "methods": [{"method": "km"}], "design_p": 0.5}"#,
    );
    let o = run(&["analyze", "--data", &data, "--config", &cfg, "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("KM"));
}

#[test]
fn toy_analysis_writes_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_toy(dir.path());
    let cfg = write(dir.path(), "a.json", KM_AND_LASSO);
    let out = dir.path().join("res");
    let o = run(&["--threads", "1", "analyze", "--data", &data, "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let mut reader = csv::Reader::from_path(out.join("results.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["Method", "Randomization", "Model", "Estimate", "CI", "Variance", "p-value", "Estimand"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    let keys: Vec<(String, String, String)> =
        rows.iter().map(|r| (r[0].to_string(), r[1].to_string(), r[2].to_string())).collect();
    assert!(keys.contains(&("TMLE".into(), "Stratified".into(), "Lasso".into())));
    assert!(keys.contains(&("KM".into(), "Simple".into(), "--".into())));
    for r in &rows {
        let ci = &r[4];
        assert!(ci.starts_with('(') && ci.ends_with(')') && ci.contains(", "));
        r[3].parse::<f64>().unwrap();
        r[5].parse::<f64>().unwrap();
    }

    let forest = fs::read_to_string(out.join("forest_plot.csv")).unwrap();
    assert_eq!(forest.lines().count(), 5);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 64);
    assert!(meta["git_describe"].is_string());
    let full: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("results.json")).unwrap()).unwrap();
    assert_eq!(full["analyses"].as_array().unwrap().len(), 2);
    assert_eq!(full["metadata"], meta);
}

#[test]
fn analysis_is_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_toy(dir.path());
    let cfg = write(dir.path(), "a.json", KM_AND_LASSO);
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(format!("res{threads}"));
        let o = run(&["--threads", threads, "analyze", "--data", &data, "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        outputs.push((fs::read(out.join("results.csv")).unwrap(), fs::read(out.join("results.json")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn simulate_smoke_run_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "sim.json",
        r#"{"sample_sizes": [150], "n_reps": 2, "truth_draws": 100000,
            "estimators": [{"label": "KM", "method": "km", "learner": {"kind": "intercept-only"}},
                           {"label": "TMLE-lasso-correct", "method": "tmle", "preset": "correct"}]}"#,
    );
    let mut files = Vec::new();
    for (threads, tag) in [("1", "a"), ("8", "b")] {
        let summary = dir.path().join(tag).join("summary.csv");
        let plots = dir.path().join(tag).join("plots");
        let start = std::time::Instant::now();
        let o = Command::new(env!("CARGO_BIN_EXE_strat-tte"))
            .args(["simulate", "--config", &cfg, "--out", summary.to_str().unwrap(), "--plots-dir", plots.to_str().unwrap()])
            .env("STRAT_TTE_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(start.elapsed().as_secs() < 30);
        let stdout = String::from_utf8_lossy(&o.stdout);
        assert_eq!(stdout.lines().filter(|l| l.starts_with("n=")).count(), 4);
        files.push([
            fs::read(&summary).unwrap(),
            fs::read(plots.join("replications.csv")).unwrap(),
            fs::read(plots.join("coverage.csv")).unwrap(),
            fs::read(summary.with_extension("meta.json")).unwrap(),
        ]);
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn defaults_round_trip_through_configs() {
    for which in ["analyze", "analyze-mean", "simulate"] {
        let o = run(&["print-defaults", which]);
        assert!(o.status.success());
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert!(v.is_object());
    }
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["print-defaults", "simulate"]);
    let cfg = write(dir.path(), "d.json", &String::from_utf8(o.stdout).unwrap());
    let parsed: strat_tte::sim::StudyConfig = serde_json::from_str(&fs::read_to_string(cfg).unwrap()).unwrap();
    assert_eq!(parsed, strat_tte::sim::StudyConfig::default());
}

#[test]
fn mean_analysis_runs_on_a_generated_table() {
    let dir = tempfile::tempdir().unwrap();
    let ds = strat_tte::mean_outcome::generate_mean_trial(&strat_tte::mean_outcome::MeanDgmConfig {
        n: 200,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let mut text = String::from("a,y,w");
    for name in &ds.base.covariate_names {
        text.push_str(&format!(",{name}"));
    }
    text.push('\n');
    for (s, y) in ds.base.subjects.iter().zip(&ds.y) {
        text.push_str(&format!("{},{y},{}", s.a, ds.base.stratum_levels[s.stratum]));
        for v in &s.x {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    let data = write(dir.path(), "mean.csv", &text);
    let out = dir.path().join("m");
    let o = run(&["analyze-mean", "--data", &data, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv::Reader::from_path(out.join("results.csv")).unwrap().records().count();
    assert_eq!(rows, 12);
}
