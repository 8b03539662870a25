//! Library-level training, checkpointing and inference on small data.

use spgnn_harness::config::{config_from_str, Profile, RunConfig};
use spgnn_harness::infer::{detect_image, predict_dataset};
use spgnn_harness::synth::{generate, SyntheticSpec};
use spgnn_harness::train::{learning_rate, load_checkpoint, save_checkpoint, train};
use spgnn_harness::Dataset;
use spgnn_model::Detector;

fn small_data() -> Dataset {
    let samples = generate(&SyntheticSpec { images: 2, size: 96, seed: 9, ..SyntheticSpec::default() }).unwrap();
    Dataset::from_synthetic(&samples, 5).unwrap()
}

fn short_run() -> RunConfig {
    let mut cfg = RunConfig::profile(Profile::Desk);
    cfg.schedule.max_steps = Some(3);
    cfg.seed = 5;
    cfg
}

#[test]
fn short_runs_repeat_exactly() {
    let data = small_data();
    let a = train(&short_run(), &data, None, |_| {}).unwrap();
    let b = train(&short_run(), &data, None, |_| {}).unwrap();
    assert_eq!(a.trace.len(), 3);
    assert_eq!(a.trace, b.trace);
    for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
        assert!(p.value.data().iter().zip(q.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let mut other = short_run();
    other.seed = 6;
    assert_ne!(train(&other, &data, None, |_| {}).unwrap().trace, a.trace);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = small_data();
    let cfg = short_run();
    let trained = train(&cfg, &data, None, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&path, &trained.store, &cfg, 0, 3).unwrap();
    let (cfg2, det, store) = load_checkpoint(&path).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(store.len(), trained.store.len());
    for ((_, p), (_, q)) in trained.store.iter().zip(store.iter()) {
        assert_eq!(p.name, q.name);
        assert!(p.value.data().iter().zip(q.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    for s in &data.samples {
        let a = detect_image(&trained.detector, &trained.store, &s.image, s.image_id).unwrap();
        let b = detect_image(&det, &store, &s.image, s.image_id).unwrap();
        assert_eq!(a.0, b.0);
    }
}

#[test]
fn training_writes_log_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut steps = Vec::new();
    train(&short_run(), &small_data(), Some(dir.path()), |r| steps.push(r.step)).unwrap();
    assert_eq!(steps, vec![0, 1, 2]);
    let log = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(load_checkpoint(&dir.path().join("checkpoint.bin")).is_ok());
}

#[test]
fn untrained_detector_runs_on_every_image() {
    let data = small_data();
    let cfg = RunConfig::profile(Profile::Desk);
    let (det, mut store) = Detector::build(&cfg.detector(), 0).unwrap();
    let dets = predict_dataset(&det, &store, &data).unwrap();
    assert!(dets.iter().all(|d| d.score.is_finite() && d.bbox[2] > 0.0 && d.bbox[3] > 0.0));
    store.zero_values();
    let s = &data.samples[0];
    let (zero, _) = detect_image(&det, &store, &s.image, s.image_id).unwrap();
    let first = zero.first().map(|d| d.score);
    assert!(zero.iter().all(|d| Some(d.score) == first), "zero weights give uniform scores");
    spgnn_eval::evaluate(&dets, &data.ground_truth).unwrap();
}

#[test]
fn detections_on_unpadded_sizes_stay_in_bounds() {
    let samples = generate(&SyntheticSpec { images: 1, size: 100, ..SyntheticSpec::default() }).unwrap();
    let cfg = RunConfig::profile(Profile::Desk);
    let (det, store) = Detector::build(&cfg.detector(), 1).unwrap();
    let (dets, pad) = detect_image(&det, &store, &samples[0].image, 1).unwrap();
    assert_eq!((pad.bottom, pad.right), (28, 28));
    for d in dets {
        assert!(d.bbox[0] >= 0.0 && d.bbox[1] >= 0.0);
        assert!(d.bbox[0] + d.bbox[2] <= 100.0 + 1e-9 && d.bbox[1] + d.bbox[3] <= 100.0 + 1e-9);
    }
}

#[test]
fn schedule_warms_up_then_decays() {
    let cfg = config_from_str(
        r#"{"optimizer": {"lr": 0.1}, "schedule": {"warmup_steps": 10, "lr_decay_epochs": [2, 4]}}"#,
        Profile::Desk,
    )
    .unwrap();
    assert!((learning_rate(&cfg, 0, 0) - 0.01).abs() < 1e-15);
    assert!(learning_rate(&cfg, 5, 0) < learning_rate(&cfg, 9, 0));
    assert_eq!(learning_rate(&cfg, 10, 1), 0.1);
    assert!((learning_rate(&cfg, 50, 2) - 0.01).abs() < 1e-15);
    assert!((learning_rate(&cfg, 90, 4) - 0.001).abs() < 1e-15);
}

#[test]
fn shipped_overfit_config_parses() {
    let text = include_str!("../../../configs/overfit.json");
    let cfg = config_from_str(text, Profile::Desk).unwrap();
    assert_eq!(cfg.schedule.max_steps, Some(400));
    assert_eq!(cfg.model.stage_depths, vec![1, 1, 2, 1]);
}
