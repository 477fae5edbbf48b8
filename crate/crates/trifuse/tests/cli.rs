//! End-to-end checks of the command-line interface: one JSON document on
//! stdout, exit code 2 on usage errors, 1 on runtime errors.

use std::path::Path;
use std::process::{Command, Output};

fn trifuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trifuse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is a single JSON document")
}

fn gen_small_dataset(dir: &Path) {
    let out = trifuse(&[
        "gen-data",
        "--kind",
        "parity",
        "--out",
        dir.to_str().unwrap(),
        "--dims",
        "3,2,2",
        "--len-min",
        "2",
        "--len-max",
        "5",
        "--n-train",
        "16",
        "--n-valid",
        "4",
        "--n-test",
        "4",
        "--seed",
        "9",
    ]);
    let doc = stdout_json(&out);
    assert_eq!(doc["manifest"]["splits"]["train"], 16);
    assert!(dir.join("manifest.json").exists());
    assert!(dir.join("train.jsonl").exists());
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_small_dataset(&data);

    let config = dir.path().join("model.json");
    std::fs::write(
        &config,
        r#"{"lstm_hidden":[3,3,3],"model_dim":4,"lmf_rank":2,"crossmodal_layers":1,"self_attn_layers":1}"#,
    )
    .unwrap();
    let model = dir.path().join("model.tfmb");
    let out = trifuse(&[
        "train",
        "--arch",
        "lmf-mult",
        "--data",
        data.to_str().unwrap(),
        "--model-config",
        config.to_str().unwrap(),
        "--epochs",
        "2",
        "--batch",
        "8",
        "--seed",
        "4",
        "--save",
        model.to_str().unwrap(),
    ]);
    let doc = stdout_json(&out);
    assert_eq!(doc["arch"], "lmf-mult");
    assert_eq!(doc["transformer_stacks"], 4);
    assert_eq!(doc["train"]["epochs"].as_array().unwrap().len(), 2);
    assert!(doc["eval"]["metrics"]["acc2"].is_number());
    assert!(model.exists());

    let out = trifuse(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "test",
    ]);
    let doc = stdout_json(&out);
    assert_eq!(doc["split"], "test");
    assert!(doc["eval"]["loss"].is_number());
}

#[test]
fn emotion_datasets_train_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("emo");
    let out = trifuse(&[
        "gen-data",
        "--kind",
        "parity",
        "--out",
        data.to_str().unwrap(),
        "--dims",
        "3,2,2",
        "--len-min",
        "2",
        "--len-max",
        "4",
        "--label",
        "emotions",
        "--n-train",
        "12",
        "--n-valid",
        "4",
        "--n-test",
        "4",
        "--seed",
        "11",
    ]);
    let doc = stdout_json(&out);
    assert_eq!(doc["manifest"]["label_kind"], "emotions");

    let config = dir.path().join("model.json");
    std::fs::write(
        &config,
        r#"{"lstm_hidden":[3,3,3],"model_dim":4,"lmf_rank":2,"crossmodal_layers":1,"self_attn_layers":1}"#,
    )
    .unwrap();
    let out = trifuse(&[
        "train",
        "--arch",
        "fusion-cm-attn",
        "--data",
        data.to_str().unwrap(),
        "--model-config",
        config.to_str().unwrap(),
        "--epochs",
        "1",
        "--batch",
        "6",
        "--seed",
        "2",
    ]);
    let doc = stdout_json(&out);
    assert_eq!(doc["eval"]["metrics"]["kind"], "emotions");
    assert_eq!(
        doc["eval"]["metrics"]["per_emotion"].as_array().unwrap().len(),
        4
    );
}

#[test]
fn param_count_reports_defaults() {
    let out = trifuse(&["param-count", "--arch", "lmf-mult"]);
    let doc = stdout_json(&out);
    assert_eq!(doc["arch"], "lmf-mult");
    assert!(doc["param_count"].as_u64().unwrap() > 0);
    assert_eq!(doc["transformer_stacks"], 4);
}

#[test]
fn gradcheck_passes_at_threshold() {
    let out = trifuse(&["gradcheck", "--arch", "fusion-cm-attn", "--seed", "7"]);
    let doc = stdout_json(&out);
    assert_eq!(doc["pass"], true);
    assert!(doc["max_rel_err"].as_f64().unwrap() < 1e-4);
    assert_eq!(doc["threshold"], 1e-4);
}

#[test]
fn bench_runs_on_small_workload() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_small_dataset(&data);
    let config = dir.path().join("model.json");
    std::fs::write(
        &config,
        r#"{"lstm_hidden":[3,3,3],"model_dim":4,"lmf_rank":2,"crossmodal_layers":1,"self_attn_layers":1}"#,
    )
    .unwrap();
    let out = trifuse(&[
        "bench",
        "--data",
        data.to_str().unwrap(),
        "--archs",
        "lmf-mult,fusion-cm-attn",
        "--repeats",
        "3",
        "--model-config",
        config.to_str().unwrap(),
        "--batch",
        "8",
    ]);
    let doc = stdout_json(&out);
    let results = doc["results"].as_array().unwrap();
    assert_eq!(results.len(), 2);
    for r in results {
        assert!(r["mean_seconds"].as_f64().unwrap() > 0.0);
        assert_eq!(r["epoch_seconds"].as_array().unwrap().len(), 3);
    }
}

#[test]
fn unknown_flag_exits_2() {
    let out = trifuse(&["param-count", "--arch", "lmf-mult", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1_with_message() {
    let out = trifuse(&["eval", "--model", "/no/such/model", "--data", "/no/such/dir"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = trifuse(&["param-count", "--arch", "bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown architecture"));
}
