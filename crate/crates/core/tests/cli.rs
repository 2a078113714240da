use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use trv_core::cli::RunConfig;
use trv_core::eval::cell_labels;
use trv_core::features::{load_feature_map, write_feature_map, Dataset, FeatureMap};
use trv_core::raster::ClassRaster;
use trv_core::trainer::{frame_footprint, Checkpoint};

fn trv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trv"))
        .args(args)
        .env("TRV_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = trv(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset plus a model trained on it, shared by several tests.
fn fixture(root: &Path, frames: usize) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    ok(&[
        "sim-gen",
        "--out",
        s(&data),
        "--frames",
        &frames.to_string(),
        "--seed",
        "5",
    ]);
    let model = root.join("model");
    ok(&[
        "train",
        "--manifest",
        s(&data.join("manifest.json")),
        "--out",
        s(&model),
    ]);
    (data.join("manifest.json"), model.join("checkpoint.trvc"))
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let out = trv(&["train", "--manifest", s(&missing), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(3));

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"epochz": 1}}"#).unwrap();
    let out = trv(&["--config", s(&bad), "sim-gen", "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = trv(&["eval", "--mode", "sideways", "--manifest", "m", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(env!("CARGO_BIN_EXE_trv"))
        .args(["sim-gen", "--out", s(&tmp.path().join("y")), "--frames", "1"])
        .env("TRV_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_is_echoed_with_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("run.json");
    std::fs::write(
        &cfg_path,
        r#"{"sim": {"frames": 3, "seed": 11}, "train": {"epochs": 2}}"#,
    )
    .unwrap();
    let data = tmp.path().join("data");
    ok(&["--config", s(&cfg_path), "sim-gen", "--out", s(&data)]);
    let manifest = data.join("manifest.json");
    assert_eq!(Dataset::load(&manifest).unwrap().frames.len(), 3);
    let model = tmp.path().join("model");
    ok(&[
        "--config",
        s(&cfg_path),
        "train",
        "--manifest",
        s(&manifest),
        "--out",
        s(&model),
        "--omega-mask",
        "0",
    ]);
    let echo: RunConfig = serde_json::from_str(&std::fs::read_to_string(model.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo.sim.seed, 11);
    assert_eq!(echo.train.epochs, 2);
    assert_eq!(echo.loss.omega_mask, 0.0);
    assert_eq!(echo.loss.tau, 0.05);
    let log = std::fs::read_to_string(model.join("loss.csv")).unwrap();
    assert!(log.starts_with("step,frame,loss_traj,loss_mask,loss_total"));
    // trajectory-only training logs no mask loss
    assert!(log.lines().skip(1).all(|l| l.split(',').nth(3) == Some("")));
    assert!(data.join("config.json").exists());
}

#[test]
fn empty_dataset_is_allowed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["sim-gen", "--out", s(&data), "--frames", "0"]);
    assert!(Dataset::load(&data.join("manifest.json")).unwrap().frames.is_empty());
    let out = trv(&[
        "train",
        "--manifest",
        s(&data.join("manifest.json")),
        "--out",
        s(&tmp.path().join("m")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn predict_eval_adapt_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, checkpoint) = fixture(tmp.path(), 6);
    let dataset = Dataset::load(&manifest).unwrap();
    let pred = tmp.path().join("pred");
    ok(&[
        "predict",
        "--checkpoint",
        s(&checkpoint),
        "--manifest",
        s(&manifest),
        "--out",
        s(&pred),
    ]);

    // the driven region of a training frame should look cheap
    let cfg = RunConfig::default();
    let footprint = frame_footprint(&dataset, &dataset.frames[0], cfg.train.horizon, cfg.train.occlusion_tol).unwrap();
    let cost = load_feature_map(&pred.join("0000.cost.trvf")).unwrap();
    assert_eq!(cost.dim, 1);
    let px: Vec<f64> = footprint
        .bitmap
        .pixels()
        .map(|p| cost.values[cost.cell_of_pixel(p)] as f64)
        .collect();
    let mean = px.iter().sum::<f64>() / px.len() as f64;
    assert!(!px.is_empty() && mean < 0.5, "footprint mean cost {mean}");
    assert!(pred.join("0000.cost.png").exists() && pred.join("0000.bev.trvb").exists());

    let report = ok(&[
        "eval",
        "--mode",
        "metrics",
        "--predictions",
        s(&pred),
        "--manifest",
        s(&manifest),
        "--out",
        s(&tmp.path().join("em")),
    ]);
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(v["auroc"].as_f64().unwrap() > 0.9);
    assert_eq!(v["frames"], 6);

    let report = ok(&[
        "eval",
        "--mode",
        "mppi",
        "--oracle",
        "--manifest",
        s(&manifest),
        "--out",
        s(&tmp.path().join("eo")),
    ]);
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["rate"].as_f64(), Some(0.0));
    ok(&[
        "eval",
        "--mode",
        "mppi",
        "--predictions",
        s(&pred),
        "--manifest",
        s(&manifest),
        "--out",
        s(&tmp.path().join("ep")),
    ]);

    // zero epochs leaves the checkpoint byte-identical
    let same = tmp.path().join("same");
    ok(&[
        "adapt",
        "--checkpoint",
        s(&checkpoint),
        "--manifest",
        s(&manifest),
        "--out",
        s(&same),
        "--epochs",
        "0",
    ]);
    assert_eq!(
        std::fs::read(&checkpoint).unwrap(),
        std::fs::read(same.join("checkpoint.trvc")).unwrap()
    );
    let adapted = tmp.path().join("adapted");
    ok(&[
        "adapt",
        "--checkpoint",
        s(&checkpoint),
        "--manifest",
        s(&manifest),
        "--out",
        s(&adapted),
    ]);
    let a = Checkpoint::read(&adapted.join("checkpoint.trvc")).unwrap();
    let b = Checkpoint::read(&checkpoint).unwrap();
    assert_ne!(a.decoder, b.decoder);
    let echo: RunConfig = serde_json::from_str(&std::fs::read_to_string(adapted.join("config.json")).unwrap()).unwrap();
    assert_eq!((echo.adapt.epochs, echo.adapt.max_frames), (2, Some(10)));
}

#[test]
fn mismatched_frame_counts_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, checkpoint) = fixture(tmp.path(), 4);
    let pred = tmp.path().join("pred");
    ok(&[
        "predict",
        "--checkpoint",
        s(&checkpoint),
        "--manifest",
        s(&manifest),
        "--out",
        s(&pred),
    ]);
    let other = tmp.path().join("other");
    ok(&["sim-gen", "--out", s(&other), "--frames", "3", "--seed", "6"]);
    for mode in ["metrics", "mppi"] {
        let out = trv(&[
            "eval",
            "--mode",
            mode,
            "--predictions",
            s(&pred),
            "--manifest",
            s(&other.join("manifest.json")),
            "--out",
            s(&tmp.path().join("e")),
        ]);
        assert_eq!(out.status.code(), Some(3), "{mode}");
    }
}

#[test]
fn untrained_checkpoint_cannot_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["sim-gen", "--out", s(&data), "--frames", "2", "--seed", "2"]);
    let manifest = data.join("manifest.json");
    let model = tmp.path().join("model");
    ok(&["train", "--manifest", s(&manifest), "--out", s(&model), "--epochs", "0"]);
    let out = trv(&[
        "predict",
        "--checkpoint",
        s(&model.join("checkpoint.trvc")),
        "--manifest",
        s(&manifest),
        "--out",
        s(&tmp.path().join("p")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn perfect_predictions_score_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["sim-gen", "--out", s(&data), "--frames", "3", "--seed", "4"]);
    let manifest = data.join("manifest.json");
    let dataset = Dataset::load(&manifest).unwrap();
    let cfg = RunConfig::default();
    let pred = tmp.path().join("pred");
    std::fs::create_dir_all(&pred).unwrap();
    let mut records = Vec::new();
    for (k, frame) in dataset.frames.iter().enumerate() {
        let features = load_feature_map(&dataset.resolve(&frame.features)).unwrap();
        let raster = ClassRaster::read_png(&dataset.resolve(frame.labels.as_ref().unwrap_or(&frame.image))).unwrap();
        let labels = cell_labels(&raster, &cfg.classes, features.stride, features.height, features.width);
        let costs = labels
            .iter()
            .map(|l| if *l == Some(true) { 0.0 } else { 1.0 })
            .collect();
        let map = FeatureMap::new(features.height, features.width, 1, features.stride, costs).unwrap();
        let name = format!("{k:04}.cost.trvf");
        write_feature_map(&map, &pred.join(&name)).unwrap();
        records.push(serde_json::json!({"cost": name, "bev": "", "preview": ""}));
    }
    std::fs::write(pred.join("predictions.json"), serde_json::to_string(&records).unwrap()).unwrap();
    let report = ok(&[
        "eval",
        "--mode",
        "metrics",
        "--predictions",
        s(&pred),
        "--manifest",
        s(&manifest),
        "--out",
        s(&tmp.path().join("e")),
    ]);
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["f1"].as_f64(), Some(1.0));
    assert_eq!(v["auroc"].as_f64(), Some(1.0));
}
