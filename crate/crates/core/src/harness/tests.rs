use serde_json::{json, Value};

use super::*;

fn base() -> Value {
    json!({
        "schema": CONFIG_SCHEMA,
        "model": { "mixture": { "weights": [1.0], "means": [[0.0]], "covs": [[[1.0]]] } },
        "reward": { "kind": { "linear": { "a": [1.0] } }, "beta": 1.0 },
        "guidance": { "method": "exact" },
        "sampler": { "kind": "reverse_sde", "steps": 16, "batch": 64 },
        "metrics": { "reference_samples": 200 },
        "seed": 1
    })
}

fn build(v: Value) -> Result<Experiment> {
    Experiment::from_config(serde_json::from_value(v).map_err(Error::Json)?, Path::new("."))
}

fn with(mut v: Value, path: &[&str], x: Value) -> Value {
    let mut cur = &mut v;
    for k in &path[..path.len() - 1] {
        cur = cur.get_mut(*k).unwrap();
    }
    cur[path[path.len() - 1]] = x;
    v
}

fn validation(v: Value) -> String {
    match build(v) {
        Err(Error::Validation(m)) => m,
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn base_config_validates() {
    let e = build(base()).unwrap();
    assert_eq!(e.dim(), 1);
    assert_eq!(e.config_hash.len(), 64);
    let s = e.sampler_config();
    assert_eq!(s.seed, derive_seed(1, SEED_SAMPLER));
}

#[test]
fn unknown_fields_rejected_everywhere() {
    assert!(matches!(build(with(base(), &["colour"], json!(1))), Err(Error::Json(_))));
    assert!(matches!(build(with(base(), &["sampler", "stepz"], json!(1))), Err(Error::Json(_))));
    assert!(matches!(build(with(base(), &["guidance", "nn"], json!(1))), Err(Error::Json(_))));
    assert!(matches!(build(with(base(), &["metrics", "x"], json!(1))), Err(Error::Json(_))));
}

#[test]
fn schema_version_checked() {
    assert!(validation(with(base(), &["schema"], json!("tiltlab-experiment/0"))).contains("schema"));
}

#[test]
fn model_source_must_be_unique_and_exist() {
    let both = with(base(), &["model", "registry"], json!("r.json"));
    assert!(validation(both).contains("exactly one"));
    let missing = json!({ "registry": "/nonexistent/registry.json" });
    assert!(validation(with(base(), &["model"], missing)).contains("registry file"));
    assert!(matches!(build(with(base(), &["model", "prompt"], json!(3))), Err(Error::Input(_))));
}

#[test]
fn reward_dimension_checked() {
    let r = json!({ "kind": { "linear": { "a": [1.0, 0.0] } } });
    assert!(validation(with(base(), &["reward"], r)).contains("dimension"));
}

#[test]
fn method_sampler_compatibility() {
    let gf = with(base(), &["guidance"], json!({ "method": "grad_field_net" }));
    assert!(validation(gf.clone()).contains("one_step"));
    let gf_ok = with(gf, &["sampler"], json!({ "kind": "one_step", "batch": 64 }));
    build(gf_ok.clone()).unwrap();
    let gf_uniform = with(gf_ok, &["training"], json!({ "time_mode": "uniform" }));
    assert!(validation(gf_uniform).contains("time_mode"));

    let flow_m2 = with(
        with(base(), &["model", "family"], json!("flow")),
        &["sampler"],
        json!({ "kind": "flow_euler", "batch": 64 }),
    );
    build(with(flow_m2.clone(), &["guidance"], json!({ "method": "exact", "clamp": 0.005 }))).unwrap();
    assert!(validation(with(flow_m2, &["guidance"], json!({ "method": "m2" }))).contains("flow"));
    let diff_flow = with(base(), &["sampler"], json!({ "kind": "flow_euler" }));
    assert!(validation(diff_flow).contains("flow"));
    let clamp = with(base(), &["guidance", "clamp"], json!(0.001));
    assert!(validation(clamp).contains("clamp"));
}

#[test]
fn method_parameters_checked() {
    assert!(validation(with(base(), &["guidance"], json!({ "method": "m1" }))).contains("`n`"));
    assert!(validation(with(base(), &["guidance", "k"], json!(8))).contains("`k`"));
    assert!(validation(with(base(), &["guidance"], json!({ "method": "grad_free_is" }))).contains("`k`"));
    assert!(validation(with(base(), &["guidance", "network"], json!("n.json"))).contains("network"));
    assert!(validation(with(base(), &["training"], json!({}))).contains("does not train"));
    assert!(validation(with(base(), &["guidance"], json!({ "method": "none", "strength": 2.0 }))).contains("strength"));
    assert!(validation(with(base(), &["guidance", "strength"], json!(-1.0))).contains("strength"));
    let one_step_net = with(
        with(base(), &["guidance"], json!({ "method": "trained_net" })),
        &["training"],
        json!({ "time_mode": "one_step" }),
    );
    assert!(validation(one_step_net).contains("one_step"));
}

#[test]
fn sampler_and_training_settings_checked() {
    let one_step_two = with(base(), &["sampler"], json!({ "kind": "one_step", "steps": 2 }));
    assert!(matches!(build(one_step_two), Err(Error::Input(_))));
    let bad_train = with(
        with(base(), &["guidance"], json!({ "method": "trained_net" })),
        &["training"],
        json!({ "lr": -1.0 }),
    );
    assert!(matches!(build(bad_train), Err(Error::Input(_))));
}

#[test]
fn missing_network_file_refused() {
    let v = with(base(), &["guidance"], json!({ "method": "trained_net", "network": "/nonexistent/net.json" }));
    assert!(validation(v).contains("not found"));
}

#[test]
fn hash_tracks_content() {
    let a = build(base()).unwrap().config_hash;
    let b = build(with(base(), &["seed"], json!(2))).unwrap().config_hash;
    let c = build(with(base(), &["reward", "beta"], json!(2.0))).unwrap().config_hash;
    assert_eq!(a, build(base()).unwrap().config_hash);
    assert_ne!(a, b);
    assert_ne!(a, c);
}

#[test]
fn training_seed_is_derived() {
    let v = with(
        with(base(), &["guidance"], json!({ "method": "trained_net" })),
        &["training"],
        json!({ "seed": 99 }),
    );
    let e = build(v).unwrap();
    assert_eq!(e.training_config().seed, derive_seed(1, SEED_TRAINING));
    let gf = with(
        with(base(), &["guidance"], json!({ "method": "grad_field_net" })),
        &["sampler"],
        json!({ "kind": "one_step" }),
    );
    assert_eq!(build(gf).unwrap().training_config().time_mode, TimeMode::OneStep);
}

#[test]
fn small_batches_skip_mmd_with_warning() {
    let e = build(with(base(), &["sampler", "batch"], json!(10))).unwrap();
    let out = e.execute().unwrap();
    assert!(out.report.eval.mmd.is_none());
    assert!(out.report.eval.warnings.iter().any(|w| w.contains("MMD skipped")));
}

#[test]
fn error_document_shape() {
    let doc: Value = serde_json::from_str(&error_json(&Error::Validation("bad".into()))).unwrap();
    assert_eq!(doc["error"]["kind"], "validation");
    assert_eq!(doc["error"]["message"], "validation failed: bad");
}
