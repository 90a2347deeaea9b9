mod common;

use std::path::Path;
use std::process::{Command, Output};

fn shield(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shield")).arg("--config").arg(config).args(args).output().expect("run shield")
}

fn small_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let data = common::mnist_dir();
    let text = format!(
        "arch = \"784-20-10\"\nmode = \"layerwise\"\nmodels = 3\nepochs = 1\ntrain_limit = 1000\ntest_limit = 200\n\
         n_traces = 400\ncheckpoints = [100, 200, 400]\ncalibration_images = 8\n\
         train_images = {:?}\ntrain_labels = {:?}\ntest_images = {:?}\ntest_labels = {:?}\nout_dir = {:?}\n{extra}",
        data.join("train-images-idx3-ubyte"),
        data.join("train-labels-idx1-ubyte"),
        data.join("t10k-images-idx3-ubyte"),
        data.join("t10k-labels-idx1-ubyte"),
        dir.join("out"),
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_config_is_an_error() {
    let out = shield(Path::new("/nonexistent/config.toml"), &["train"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "noise_sigma = -1.0\n");
    let out = shield(&cfg, &["train"]);
    assert!(!out.status.success());
}

#[test]
fn corrupted_bundle_fails_to_compile() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let bad = dir.path().join("bad.sshd");
    std::fs::write(&bad, b"XXXX0000000000000000").unwrap();
    let out = shield(&cfg, &["compile", "--bundle", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn small_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out_dir = dir.path().join("out");
    for stage in [&["train"][..], &["compile"], &["eval", "--trials", "2"], &["tvla"], &["report"]] {
        let out = shield(&cfg, stage);
        assert!(out.status.success(), "{stage:?}: {}", String::from_utf8_lossy(&out.stderr));
    }

    let validation = std::fs::read_to_string(out_dir.join("validation.txt")).unwrap();
    assert!(validation.contains("selection_bit_count=4"), "{validation}");
    assert!(validation.contains("violations=0"));

    let bad = shield(&cfg, &["eval", "--trials", "0"]);
    assert!(!bad.status.success());

    for c in ["I", "II", "III"] {
        let text = std::fs::read_to_string(out_dir.join(format!("evolution_{c}.csv"))).unwrap();
        let rows = text.lines().filter(|l| !l.starts_with('#')).skip(1).count();
        assert_eq!(rows, 3);
    }
    let hash = std::fs::read_to_string(out_dir.join("tvla_summary.csv")).unwrap();
    let first = hash.lines().next().unwrap();
    for name in ["baseline_metrics.csv", "layerwise_metrics.csv", "layerwise_eval.csv", "graph.txt", "tvla_I.csv"] {
        let text = std::fs::read_to_string(out_dir.join(name)).unwrap();
        assert_eq!(text.lines().next().unwrap(), first, "{name}");
    }
    assert!(std::fs::read_to_string(out_dir.join("report.md")).unwrap().contains(&first[2..]));
}

#[test]
fn tvla_without_bundles_explains_itself() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out = shield(&cfg, &["tvla"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("shield train"));
}
