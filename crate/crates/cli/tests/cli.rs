use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lefl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lefl")).args(args).output().unwrap()
}

fn write_config(dir: &Path, sampler: &str, seed: Option<u64>) -> PathBuf {
    let seed = seed.map(|s| format!(r#""seed": {s},"#)).unwrap_or_default();
    let text = format!(
        r#"{{
            "dataset": {{"kind": "synthetic", "num_classes": 3, "dim": 4, "per_class": 20, "spread": 0.3, "test_per_class": 10}},
            "partition": {{"kind": "quantity", "labels_per_client": 1}},
            "n_clients": 6,
            "hidden_layers": [8],
            "algorithm": "fedavg",
            "sampler": "{sampler}",
            "sample_ratio": 0.5,
            "rounds": 3,
            "local_epochs": 2,
            "lr": 0.05,
            "public_count": 30,
            {seed}
            "output_dir": {:?}
        }}"#,
        dir.join("runs")
    );
    let path = dir.join(format!("{sampler}.json"));
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_then_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let uni = write_config(tmp.path(), "uniform", Some(5));
    let lefl_cfg = write_config(tmp.path(), "lefl", Some(5));

    let a = lefl(&["run", "--config", uni.to_str().unwrap()]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = lefl(&["run", "--config", lefl_cfg.to_str().unwrap(), "--workers", "3"]);
    assert!(b.status.success(), "{}", String::from_utf8_lossy(&b.stderr));

    let dir_a = String::from_utf8(a.stdout).unwrap().trim().to_string();
    let dir_b = String::from_utf8(b.stdout).unwrap().trim().to_string();
    for f in ["config.json", "metrics.csv", "summary.json"] {
        assert!(Path::new(&dir_a).join(f).exists());
    }
    assert!(Path::new(&dir_b).join("clusters.json").exists());
    assert!(Path::new(&dir_b).join("similarity_matrix.csv").exists());

    let c = lefl(&["compare", "--target", "0.99", &dir_a, &dir_b]);
    assert!(c.status.success(), "{}", String::from_utf8_lossy(&c.stderr));
    let json: serde_json::Value = serde_json::from_slice(&c.stdout).unwrap();
    assert_eq!(json["runs"].as_array().unwrap().len(), 2);
    assert_eq!(json["baseline"], "fedavg_uniform_s5");
}

#[test]
fn seed_flag_overrides_and_is_required() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "uniform", None);
    let missing = lefl(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("seed"));

    let ok = lefl(&["run", "--config", cfg.to_str().unwrap(), "--seed", "9"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("fedavg_uniform_s9"));
}

#[test]
fn rerun_from_echoed_config_is_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "lefl", Some(2));
    let first = lefl(&["run", "--config", cfg.to_str().unwrap(), "--run-name", "first"]);
    assert!(first.status.success());
    let dir = PathBuf::from(String::from_utf8(first.stdout).unwrap().trim());
    let echoed = dir.join("config.json");
    let second = lefl(&["run", "--config", echoed.to_str().unwrap(), "--run-name", "second", "--workers", "4"]);
    assert!(second.status.success(), "{}", String::from_utf8_lossy(&second.stderr));
    let dir2 = PathBuf::from(String::from_utf8(second.stdout).unwrap().trim());
    for f in ["metrics.csv", "clusters.json", "similarity_matrix.csv"] {
        assert_eq!(fs::read(dir.join(f)).unwrap(), fs::read(dir2.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "uniform", Some(1));
    let bad_ratio = lefl(&["run", "--config", cfg.to_str().unwrap(), "--sample-ratio", "0.1"]);
    assert!(!bad_ratio.status.success());
    assert!(String::from_utf8_lossy(&bad_ratio.stderr).contains("sample_ratio"));

    let missing = lefl(&["run", "--config", tmp.path().join("nope.json").to_str().unwrap()]);
    assert!(!missing.status.success());

    let single = lefl(&["compare", "--target", "0.5", tmp.path().to_str().unwrap()]);
    assert!(!single.status.success());

    let empty = tempfile::tempdir().unwrap();
    let no_metrics = lefl(&[
        "compare",
        "--target",
        "0.5",
        empty.path().to_str().unwrap(),
        empty.path().to_str().unwrap(),
    ]);
    assert!(!no_metrics.status.success());
    assert!(String::from_utf8_lossy(&no_metrics.stderr).contains("metrics.csv"));
}
