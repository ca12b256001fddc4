mod common;

use std::fs;
use std::path::{Path, PathBuf};

use common::{cascaded, entangled};
use serde_json::json;
use tempo_prune::cli::run_cli;
use tempo_prune::executor::FlopReport;
use tempo_prune::model::ModelConfig;

fn write_config(dir: &Path, model: &ModelConfig, gamma: f64, corpus_size: usize) -> PathBuf {
    let cfg = json!({
        "version": 1,
        "model": model,
        "corpus_size": corpus_size,
        "corpus_seed": 7,
        "gamma": gamma,
        "beta": 0.1,
        "alpha": 0.5,
        "alphas": [0.0, 0.25, 0.5, 0.75],
        "policy": "ranked",
        "output_dir": dir.join("out"),
        "repetitions": 1,
    });
    let path = dir.join("experiment.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn cli(cmd: &str, config: &Path, extra: &[&str]) -> i32 {
    let mut args = vec!["tempo-prune".to_string(), cmd.to_string(), "--config".into()];
    args.push(config.display().to_string());
    args.extend(extra.iter().map(|s| s.to_string()));
    run_cli(args)
}

fn pipeline(config: &Path, out: &Path) {
    let out = out.display().to_string();
    for cmd in ["synth", "profile", "plan", "run", "sweep", "report"] {
        assert_eq!(cli(cmd, config, &["--out", &out]), 0, "{cmd}");
    }
}

fn strip_times(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.remove("wall_time_baseline_s");
            map.remove("wall_time_pruned_s");
            map.values_mut().for_each(strip_times);
        }
        serde_json::Value::Array(xs) => xs.iter_mut().for_each(strip_times),
        _ => {}
    }
}

fn json_without_times(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    strip_times(&mut v);
    v
}

fn csv_without_times(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().take(4).map(str::to_string).collect())
        .collect()
}

#[test]
fn full_pipeline_is_reproducible() {
    for model in [entangled(2, 3, 2, 8, 2, 4, false), cascaded(2, 3, 2, 8, 2, 1, 4, true)] {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path(), &model, 1.0, 3);
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        pipeline(&config, &a);
        pipeline(&config, &b);

        for file in ["weights.bin", "corpus/sample_0002.bin", "profile.json", "aas_curve.csv", "plan.json"] {
            assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
        }
        for file in ["run_report.json", "sweep.json"] {
            assert_eq!(json_without_times(&a.join(file)), json_without_times(&b.join(file)), "{file}");
        }
        for file in ["run_report.csv", "sweep.csv"] {
            assert_eq!(csv_without_times(&a.join(file)), csv_without_times(&b.join(file)), "{file}");
        }

        let report = FlopReport::load(a.join("run_report.json")).unwrap();
        assert!(report.wall_time_baseline_s.is_some());
        report.check_invariants().unwrap();
    }
}

#[test]
fn output_directory_is_created_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &entangled(2, 2, 2, 4, 1, 2, false), 0.5, 1);
    assert_eq!(cli("synth", &config, &[]), 0);
    assert!(dir.path().join("out/weights.bin").exists());
    assert!(dir.path().join("out/corpus/sample_0000.bin").exists());
}

#[test]
fn empty_corpus_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &entangled(2, 2, 2, 4, 1, 2, false), 0.5, 0);
    assert_eq!(cli("synth", &config, &[]), 1);
}

#[test]
fn missing_weights_are_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &entangled(2, 2, 2, 4, 1, 2, false), 0.5, 1);
    assert_eq!(cli("profile", &config, &[]), 1);
    assert_eq!(cli("report", &config, &[]), 1);
}

#[test]
fn artifacts_from_another_config_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &entangled(2, 2, 2, 4, 1, 2, false), 0.5, 1);
    assert_eq!(cli("synth", &config, &[]), 0);
    // a different seed changes the config hash
    assert_eq!(cli("profile", &config, &["--seed", "99"]), 1);
    assert_eq!(cli("profile", &config, &[]), 0);
}

#[test]
fn bad_arguments_fail() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &entangled(2, 2, 2, 4, 1, 2, false), 0.5, 1);
    assert_eq!(cli("plan", &config, &["--alpha", "1.5"]), 1);
    assert_eq!(cli("plan", &config, &["--policy", "random"]), 1);
    assert_eq!(run_cli(["tempo-prune", "frobnicate"]), 1);
    assert_eq!(run_cli(["tempo-prune", "--help"]), 0);
}

#[test]
fn strong_decay_curve_is_strictly_decreasing() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &entangled(2, 4, 2, 8, 2, 8, false), 10.0, 2);
    assert_eq!(cli("synth", &config, &[]), 0);
    assert_eq!(cli("profile", &config, &[]), 0);
    let mut r = csv::Reader::from_path(dir.path().join("out/aas_curve.csv")).unwrap();
    let scores: Vec<f64> = r.records().map(|rec| rec.unwrap()[1].parse().unwrap()).collect();
    assert_eq!(scores.len(), 8);
    assert!(scores.windows(2).all(|w| w[1] < w[0]), "{scores:?}");
}

#[test]
fn run_rejects_plan_from_another_profile() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &entangled(2, 3, 2, 8, 2, 4, false), 1.0, 2);
    for cmd in ["synth", "profile", "plan"] {
        assert_eq!(cli(cmd, &config, &[]), 0);
    }
    let profile_path = dir.path().join("out/profile.json");
    let mut profile: serde_json::Value = serde_json::from_str(&fs::read_to_string(&profile_path).unwrap()).unwrap();
    profile["num_samples"] = json!(5);
    fs::write(&profile_path, profile.to_string()).unwrap();
    assert_eq!(cli("run", &config, &[]), 1);
}
