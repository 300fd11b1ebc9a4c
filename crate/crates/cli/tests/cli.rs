use std::path::Path;
use std::process::{Command, Output};

use vrd_core::datagen::Dataset;
use vrd_core::metrics::{PredictionRecord, TripletPrediction};
use vrd_core::pipeline::ground_truth;

fn vrd(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vrd"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn vrd")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const GEN: &str = r#"{"datasets": [{"id": "A", "vocabulary": "A", "scenes": 6}], "scene": {"image_size": 32}}"#;

const MODEL: &str = r#""model": {"text_dim": 16,
    "detector": {"image_size": 32, "patch_size": 8, "depth": 1, "width": 16, "heads": 2},
    "decoder": {"num_queries": 16, "layers": 1, "width": 16, "heads": 2}}"#;

fn gen(dir: &Path, out: &str) {
    std::fs::write(dir.join("gen.json"), GEN).unwrap();
    let o = vrd(&["gen-data", "--config", "gen.json", "--seed", "11", "--out", out], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "one");
    gen(dir.path(), "two");
    let a = std::fs::read(dir.path().join("one/A.json")).unwrap();
    let b = std::fs::read(dir.path().join("two/A.json")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let o = vrd(&["gen-data", "--config", "gen.json", "--seed", "12", "--out", "three"], dir.path());
    assert!(o.status.success());
    assert_ne!(a, std::fs::read(dir.path().join("three/A.json")).unwrap());
}

#[test]
fn rejects_unknown_flags_and_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("gen.json"), GEN).unwrap();
    let o = vrd(&["gen-data", "--config", "gen.json", "--out", "x", "--frobnicate"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--frobnicate"));

    std::fs::write(dir.path().join("bad.json"), r#"{"stage": "detector", "stepz": 4}"#).unwrap();
    let o = vrd(&["train-detector", "--config", "bad.json", "--out", "x"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stepz"));

    std::fs::write(dir.path().join("broken.json"), "{ not json").unwrap();
    let o = vrd(&["eval", "--config", "broken.json", "--out", "x"], dir.path());
    assert!(!o.status.success());

    let o = vrd(&["infer", "--config", "absent.json", "--out", "x"], dir.path());
    assert!(!o.status.success());

    std::fs::write(dir.path().join("stage.json"), r#"{"stage": "decoder"}"#).unwrap();
    let o = vrd(&["train-detector", "--config", "stage.json", "--out", "x"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stage"));
}

#[test]
fn decoder_training_needs_a_detector_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "data");
    let cfg = format!(r#"{{"stage": "decoder", "steps": 2, "warmup_steps": 0, "datasets": ["data/A.json"], {MODEL}}}"#);
    std::fs::write(dir.path().join("dec.json"), cfg).unwrap();
    let o = vrd(&["train-decoder", "--config", "dec.json", "--out", "dec"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing checkpoint"), "{}", stderr(&o));
    let o = vrd(
        &["train-decoder", "--config", "dec.json", "--out", "dec", "--checkpoint", "nowhere.bin"],
        dir.path(),
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing checkpoint"), "{}", stderr(&o));
}

#[test]
fn two_stage_training_then_infer_eval_retrieve() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "data");
    let common = format!(r#""steps": 3, "batch_size": 2, "warmup_steps": 1, "negatives": 4, "datasets": ["data/A.json"], {MODEL}"#);
    std::fs::write(d.join("det.json"), format!(r#"{{"stage": "detector", {common}}}"#)).unwrap();
    std::fs::write(
        d.join("dec.json"),
        format!(r#"{{"stage": "decoder", "init_checkpoint": "det/checkpoint.bin", {common}}}"#),
    )
    .unwrap();
    for (cmd, cfg, out) in [("train-detector", "det.json", "det"), ("train-decoder", "dec.json", "dec")] {
        let o = vrd(&[cmd, "--config", cfg, "--out", out], d);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        assert!(d.join(out).join("checkpoint.bin").exists());
        let log = std::fs::read_to_string(d.join(out).join("train_log.ndjson")).unwrap();
        assert_eq!(log.lines().count(), 3);
    }

    std::fs::write(
        d.join("ev.json"),
        r#"{"dataset": "data/A.json", "checkpoint": "dec/checkpoint.bin", "vocabulary": "A"}"#,
    )
    .unwrap();
    let o = vrd(&["infer", "--config", "ev.json", "--out", "inf"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let preds: Vec<PredictionRecord> =
        serde_json::from_str(&std::fs::read_to_string(d.join("inf/predictions.json")).unwrap()).unwrap();
    assert_eq!(preds.len(), 6);

    let o = vrd(&["eval", "--config", "ev.json", "--out", "ev"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("ev/metrics.json")).unwrap()).unwrap();
    let full = m["map_full"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&full));

    std::fs::write(
        d.join("rt.json"),
        r#"{"checkpoint": "dec/checkpoint.bin", "query_dataset": "data/A.json", "query_index": 1, "corpus": "data/A.json"}"#,
    )
    .unwrap();
    let o = vrd(&["retrieve", "--config", "rt.json", "--out", "rt"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let hits: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("rt/retrieval.json")).unwrap()).unwrap();
    let scores: Vec<f64> = hits.as_array().unwrap().iter().map(|h| h["score"].as_f64().unwrap()).collect();
    assert!(!scores.is_empty());
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn eval_of_perfect_predictions_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "data");
    let dataset = Dataset::load(&d.join("data/A.json"), 32).unwrap();
    let perfect: Vec<PredictionRecord> = dataset
        .records
        .iter()
        .map(|r| PredictionRecord {
            triplets: ground_truth(r)
                .0
                .into_iter()
                .map(|g| TripletPrediction {
                    sub_box: g.sub_box,
                    obj_box: g.obj_box,
                    class_string: g.class_string,
                    score: 1.0,
                })
                .collect(),
            detections: None,
        })
        .collect();
    std::fs::write(d.join("perfect.json"), serde_json::to_string(&perfect).unwrap()).unwrap();
    std::fs::write(
        d.join("ev.json"),
        r#"{"dataset": "data/A.json", "predictions": "perfect.json", "image_size": 32}"#,
    )
    .unwrap();
    let o = vrd(&["eval", "--config", "ev.json", "--out", "ev"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(m["map_full"].as_f64(), Some(1.0));
    assert_eq!(m["mr_at"]["100"].as_f64(), Some(1.0));
}
