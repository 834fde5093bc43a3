use std::path::Path;
use std::process::{Command, Output};

fn uovn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uovn")).args(args).current_dir(dir).env("UOVN_THREADS", "2").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const CONFIG: &str = r#"{
  "model": {"width": 32, "queries": 8, "heads": 4, "pixel_layers": 1, "decoder_rounds": 1,
            "encoder_widths": [16, 24, 32, 40], "text_dim": 32},
  "optim": {"steps": 2},
  "checkpoint_every": 1,
  "data": {"datasets": ["data"]}
}"#;

#[test]
fn generate_train_evaluate_and_infer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = uovn(&["gen-data", "--domains", "d1,d3", "--per-domain", "1", "--out", "data"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::write(d.join("run.json"), CONFIG).unwrap();

    let o = uovn(&["train", "--config", "run.json", "--out", "run"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(d.join("run/loss.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "L_seg", "L_det", "L_cls", "L_adp_g", "L_adp_l", "total"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert!(d.join("run/ckpt-000001/meta.json").exists());

    let o = uovn(&["train", "--config", "run.json", "--out", "again"], d);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(d.join("again/loss.jsonl")).unwrap(), log);

    let o = uovn(&["eval", "--ckpt", "run/ckpt-000002", "--data", "data", "--tasks", "det,ins,sem,pan", "--json", "r.json"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("partition violations: 0"));
    assert!(table.contains("circle"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["per_class"].as_array().unwrap().len(), 9);

    let o = uovn(&["gen-data", "--domains", "d3", "--per-domain", "1", "--out", "boxes"], d);
    assert_eq!(code(&o), 0);
    let o = uovn(&["eval", "--ckpt", "run/ckpt-000002", "--data", "boxes", "--tasks", "ins"], d);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("skipped"));

    let o = uovn(
        &["infer", "--ckpt", "run/ckpt-000002", "--image", "data/sample_00000.uovt", "--queries", "red circle; sky", "--out", "inf"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let pred: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("inf/predictions.json")).unwrap()).unwrap();
    assert_eq!(pred["queries"].as_array().unwrap().len(), 2);
    let pan = std::fs::read(d.join("inf/panoptic.pgm")).unwrap();
    assert!(pan.starts_with(b"P5"));
}

#[test]
fn exit_codes_follow_the_failure_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&uovn(&["train", "--config", "missing.json", "--out", "x"], d)), 2);
    std::fs::write(d.join("bad.json"), r#"{"optim": {"lr": 0.1, "nesterov": true}}"#).unwrap();
    assert_eq!(code(&uovn(&["train", "--config", "bad.json", "--out", "x"], d)), 1);
    std::fs::write(d.join("neg.json"), r#"{"optim": {"lr": -0.1}, "data": {"generate": [{"domain": "d1", "samples": 1, "seed": 0}]}}"#).unwrap();
    assert_eq!(code(&uovn(&["train", "--config", "neg.json", "--out", "x"], d)), 1);
    assert_eq!(code(&uovn(&["eval", "--ckpt", "nowhere", "--data", "data"], d)), 2);
    assert_eq!(code(&uovn(&["infer", "--ckpt", "nowhere", "--image", "x.ppm", "--queries", " ; "], d)), 1);
    std::fs::write(d.join("huge.json"), r#"{"optim": {"lr": 1e30, "clip": 1e30}, "data": {"generate": [{"domain": "d1", "samples": 2, "seed": 0}]},
        "model": {"width": 32, "queries": 8, "heads": 4, "pixel_layers": 1, "decoder_rounds": 1, "encoder_widths": [16, 24, 32, 40], "text_dim": 32}}"#).unwrap();
    assert_eq!(code(&uovn(&["train", "--config", "huge.json", "--out", "x"], d)), 3);
}
