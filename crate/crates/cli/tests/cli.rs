use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn mgnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgnet"))
        .args(args)
        .env("MGNET_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stdout_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().expect("output line")).unwrap()
}

fn small_run_config(dir: &Path, epochs: usize) -> String {
    let cfg = json!({
        "model": {"levels": 2, "nu": [1, 1], "c_u": 4, "c_f": 4, "in_channels": 3, "classes": 2, "use_batchnorm": true},
        "train": {"learning_rate": 0.05, "batch_size": 10, "epochs": epochs, "seed": 4},
        "checkpoint_every": 1
    });
    let path = dir.join("run.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let out = mgnet(&[]);
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr).to_lowercase() + &String::from_utf8_lossy(&out.stdout).to_lowercase();
    assert!(text.contains("usage"), "{text}");
}

#[test]
fn bad_flags_and_values_exit_2() {
    assert_eq!(mgnet(&["verify", "--bogus"]).status.code(), Some(2));
    assert_eq!(mgnet(&["verify", "--theorem", "nope"]).status.code(), Some(2));
    assert_eq!(mgnet(&["solve-poisson", "--size", "16"]).status.code(), Some(2));
    assert_eq!(mgnet(&["count-params", "--model", "vgg"]).status.code(), Some(2));
    assert_eq!(mgnet(&["count-params", "--model", "mgnet"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"model\": 3}").unwrap();
    let out = mgnet(&["train", "--config", bad.to_str().unwrap(), "--data", "synthetic", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_exits_0() {
    let out = mgnet(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    for cmd in ["solve-poisson", "verify", "train", "eval", "count-params"] {
        assert!(String::from_utf8_lossy(&out.stdout).contains(cmd), "{cmd}");
    }
}

#[test]
fn verify_writes_a_passing_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let out = mgnet(&["verify", "--theorem", "all", "--seed", "7", "--out", report.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = read_json(&report);
    assert_eq!(v["passed"], true);
    let reports = v["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 4);
    for r in reports {
        assert_eq!(r["seed"], 7);
        assert!(r["max_abs_discrepancy"].as_f64().unwrap() < 1e-9);
    }
    // no timestamps, so reruns are byte-identical
    let again = dir.path().join("again.json");
    mgnet(&["verify", "--seed", "7", "--out", again.to_str().unwrap()]);
    assert_eq!(std::fs::read(&report).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn verify_single_theorem() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let out = mgnet(&["verify", "--theorem", "sigma", "--seeds", "3", "--out", report.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let v = read_json(&report);
    let reports = v["reports"].as_array().unwrap();
    assert!(reports.iter().all(|r| r["theorem"] == "sigma"));
    assert_eq!(reports.len(), 3);
}

#[test]
fn count_params_matches_the_reference_scale() {
    let out = mgnet(&["count-params", "--model", "resnet18", "--classes", "10"]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    let p = v["params"].as_f64().unwrap();
    assert!((p / 11.2e6 - 1.0).abs() < 0.02, "{p}");
    let out = mgnet(&["count-params", "--model", "mgnet-256-256-pi1"]);
    let p = stdout_json(&out)["params"].as_f64().unwrap();
    assert!((p / 8.9e6 - 1.0).abs() < 0.05, "{p}");
}

#[test]
fn count_params_reads_configs() {
    let dir = tempfile::tempdir().unwrap();
    let run = small_run_config(dir.path(), 1);
    let bare = dir.path().join("bare.json");
    std::fs::write(&bare, json!({"levels": 2, "nu": [1, 1], "c_u": 4, "c_f": 4, "in_channels": 3, "classes": 2, "use_batchnorm": true}).to_string()).unwrap();
    let a = stdout_json(&mgnet(&["count-params", "--model", "mgnet", "--config", &run, "--classes", "2"]));
    let b = stdout_json(&mgnet(&["count-params", "--model", "mgnet", "--config", bare.to_str().unwrap(), "--classes", "2"]));
    assert_eq!(a["params"], b["params"]);
    assert!(a["params"].as_u64().unwrap() > 0);
}

#[test]
fn solve_poisson_reports_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("results.json");
    let out = mgnet(&["solve-poisson", "--size", "17", "--nu", "2", "--omega", "0.8", "--cycles", "50", "--out", out_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let v = read_json(&out_path);
    assert_eq!(v["converged"], true);
    assert_eq!(v["monotone"], true);
    assert!(v["relative_error"].as_f64().unwrap() < 1e-8);
    assert!(v["cycles_run"].as_u64().unwrap() <= 50);
    // one cycle cannot reach the tolerance
    let out = mgnet(&["solve-poisson", "--size", "17", "--cycles", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run_config(dir.path(), 3);
    let out_dir = dir.path().join("run");
    let test_source = "synthetic:per_class=10,size=8,seed=1";
    let out = mgnet(&[
        "train", "--config", &cfg, "--data", "synthetic:per_class=20,size=8", "--test", test_source,
        "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.json", "metrics.jsonl", "summary.json", "model.mgnet", "checkpoint_epoch0001.mgnet", "checkpoint_epoch0003.mgnet"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let lines: Vec<Value> = std::fs::read_to_string(out_dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2]["epoch"], 3);
    let summary = read_json(&out_dir.join("summary.json"));

    let eval_path = dir.path().join("eval.json");
    let model = out_dir.join("model.mgnet");
    let out = mgnet(&["eval", "--checkpoint", model.to_str().unwrap(), "--data", test_source, "--out", eval_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let e = read_json(&eval_path);
    assert_eq!(e["samples"], 20);
    assert_eq!(e["accuracy"], summary["test_accuracy"]);
    assert_eq!(e["loss"], lines[2]["test_loss"]);
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run_config(dir.path(), 2);
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = mgnet(&["train", "--config", &cfg, "--data", "synthetic:per_class=10,size=8", "--out", out_dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
        (
            std::fs::read(out_dir.join("metrics.jsonl")).unwrap(),
            std::fs::read(out_dir.join("model.mgnet")).unwrap(),
        )
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn trains_on_cifar_binary_batches() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for r in 0..10u8 {
        bytes.push(r % 2);
        bytes.extend((0..3072).map(|i| (i as u8).wrapping_mul(r + 1)));
    }
    std::fs::write(dir.path().join("data_batch_1.bin"), &bytes).unwrap();
    std::fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();
    let cfg = small_run_config(dir.path(), 1);
    let data = dir.path().to_str().unwrap();
    let out_dir = dir.path().join("run");
    let out = mgnet(&["train", "--config", &cfg, "--data", data, "--test", data, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read_json(&out_dir.join("summary.json"));
    assert_eq!(summary["epochs"], 1);

    // a truncated batch is a runtime failure, not a usage error
    std::fs::write(dir.path().join("data_batch_2.bin"), &bytes[..100]).unwrap();
    let out = mgnet(&["train", "--config", &cfg, "--data", data, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
