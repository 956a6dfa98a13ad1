use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tiltlab"));
    c.env_remove("TILTLAB_THREADS");
    c
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stderr)))
}

fn small_config(dir: &Path, extra: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v = json!({
        "schema": "tiltlab-experiment/1",
        "model": { "mixture": { "weights": [1.0], "means": [[0.0]], "covs": [[[1.0]]] } },
        "reward": { "kind": { "linear": { "a": [1.0] } }, "beta": 1.0 },
        "guidance": { "method": "trained_net" },
        "sampler": { "kind": "reverse_sde", "steps": 16, "batch": 128 },
        "training": { "epochs": 1, "samples_per_epoch": 256, "hidden": [4] },
        "metrics": { "reference_samples": 200 },
        "seed": 2,
        "output_dir": "out"
    });
    extra(&mut v);
    let p = dir.join(format!("cfg{}.json", std::fs::read_dir(dir).unwrap().count()));
    std::fs::write(&p, v.to_string()).unwrap();
    p
}

#[test]
fn run_demo_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["run", configs().join("demo_linear_1d.json").to_str().unwrap(), "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout_json(&o);
    assert_eq!(s["mmd_rejects"], false);
    for f in ["samples.csv", "stats.json", "report.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("samples.csv")).unwrap();
    assert!(csv.starts_with(&format!("# config_hash={} seed=7\n", s["config_hash"].as_str().unwrap())));
}

#[test]
fn thread_count_does_not_change_samples() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = configs().join("flow_exact_linear_1d.json");
    for (dir, threads) in [(a.path(), "1"), (b.path(), "4")] {
        let o = bin()
            .env("TILTLAB_THREADS", threads)
            .args(["sample", cfg.to_str().unwrap(), "--out"])
            .arg(dir)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |d: &Path| std::fs::read(d.join("samples.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn errors_are_json_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let bad = small_config(dir.path(), |v| v["sampler"]["stepz"] = json!(3));
    let o = bin().args(["run", bad.to_str().unwrap()]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"]["kind"], "json");

    let incompatible = small_config(dir.path(), |v| {
        v["guidance"] = json!({ "method": "grad_field_net" });
        v.as_object_mut().unwrap().remove("training");
    });
    let o = bin().args(["run", incompatible.to_str().unwrap()]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_json(&o);
    assert_eq!(e["error"]["kind"], "validation");
    assert!(e["error"]["message"].as_str().unwrap().contains("one_step"));

    let o = bin()
        .env("TILTLAB_THREADS", "zero")
        .args(["run", incompatible.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(stderr_json(&o)["error"]["kind"], "input");
}

#[test]
fn mismatched_network_refused_before_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let train_cfg = small_config(dir.path(), |_| {});
    let net_dir = dir.path().join("trained");
    let o = bin()
        .args(["train", train_cfg.to_str().unwrap(), "--out"])
        .arg(&net_dir)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(net_dir.join("network.json").exists());
    assert!(net_dir.join("training_report.json").exists());

    let net = net_dir.join("network.json");
    let mismatched = small_config(dir.path(), |v| {
        v["guidance"]["network"] = json!(net);
        v["reward"]["beta"] = json!(0.5);
        v.as_object_mut().unwrap().remove("training");
    });
    let out = dir.path().join("refused");
    let o = bin()
        .args(["run", mismatched.to_str().unwrap(), "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_json(&o)["error"]["message"].as_str().unwrap().contains("beta"));
    assert!(!out.exists());

    let matched = small_config(dir.path(), |v| {
        v["guidance"]["network"] = json!(net);
        v.as_object_mut().unwrap().remove("training");
    });
    let o = bin().args(["run", matched.to_str().unwrap(), "--out"]).arg(&out).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.join("network.json").exists());
}

#[test]
fn eval_reads_samples_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |v| {
        v["guidance"] = json!({ "method": "exact" });
        v.as_object_mut().unwrap().remove("training");
    });
    let o = bin().args(["sample", cfg.to_str().unwrap()]).output().unwrap();
    assert!(o.status.success());
    let samples = dir.path().join("out/samples.csv");
    let o = bin()
        .args(["eval", cfg.to_str().unwrap(), "--samples", samples.to_str().unwrap(), "--out"])
        .arg(dir.path().join("eval"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rep = stdout_json(&o);
    assert_eq!(rep["report"]["n"], 128);
    assert!(rep["report"]["warnings"].as_array().unwrap().is_empty());
    assert!(dir.path().join("eval/report.json").exists());
}

#[test]
fn sweep_writes_stable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |v| {
        v["guidance"] = json!({ "method": "exact" });
        v.as_object_mut().unwrap().remove("training");
    });
    let csv = dir.path().join("s.csv");
    let o = bin()
        .args(["sweep", cfg.to_str().unwrap(), "--axis", "steps=8,16", "--axis", "strength=0.5,1", "--out"])
        .arg(&csv)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["cells"], 4);
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("cell,method,sampler,steps,beta,eta,k,n,strength,"));
    assert_eq!(text.lines().count(), 5);

    let o = bin().args(["sweep", cfg.to_str().unwrap(), "--axis", "gamma=1"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn audit_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("audit/audit.json");
    let o = bin().args(["audit", "--out"]).arg(&out).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(stdout_json(&o)["pass"], true);
    assert!(out.exists());
}
