//! Probe evaluation against real models: freeze contracts, exact counting,
//! and the feature export round trip.

use ndarray::{Array1, Array2};
use rcl_core::data::{synthesize_dataset, Dataset, ProceduralBackgrounds, ProceduralDigits};
use rcl_core::eval::{
    evaluate_accuracy, export_features, extract_features, fit_linear_probe, read_features,
    EvalMode, ProbeConfig,
};
use rcl_core::model::{build_model, ModelConfig, ProbeTask};

fn small_model() -> ModelConfig {
    ModelConfig {
        encoder_channels: vec![8, 16, 32],
        embedding_dim: 8,
        norm_groups: 4,
        ..ModelConfig::default()
    }
}

fn data(n: usize, m: usize, seed: u64) -> (Dataset, Dataset) {
    let (train, test, _) =
        synthesize_dataset(n, m, seed, &ProceduralBackgrounds::new(), &ProceduralDigits).unwrap();
    (train, test)
}

#[test]
fn fixed_probe_leaves_backbone_bit_identical() {
    let (train, test) = data(64, 16, 1);
    let mut state = build_model(&small_model(), 3).unwrap();
    let enc = state.fingerprint_range(&state.ranges.encoder);
    let dec = state.fingerprint_range(&state.ranges.decoder);
    let head = state.fingerprint_range(&state.ranges.head);
    fit_linear_probe(&mut state, &train, ProbeTask::Digit, EvalMode::Fixed, &ProbeConfig::default())
        .unwrap();
    assert_eq!(state.fingerprint_range(&state.ranges.encoder), enc);
    assert_eq!(state.fingerprint_range(&state.ranges.decoder), dec);
    assert_eq!(state.fingerprint_range(&state.ranges.head), head);
    let r = evaluate_accuracy(&state, &test, ProbeTask::Digit, EvalMode::Fixed).unwrap();
    assert_eq!(r.n_eval, 16);
    assert!((0.0..=1.0).contains(&r.top1_accuracy));
    // Deterministic: same evaluation twice.
    let r2 = evaluate_accuracy(&state, &test, ProbeTask::Digit, EvalMode::Fixed).unwrap();
    assert_eq!(r.top1_accuracy, r2.top1_accuracy);
}

#[test]
fn finetune_updates_encoder_and_probe() {
    let (train, _) = data(32, 8, 2);
    let mut state = build_model(&small_model(), 4).unwrap();
    let enc = state.fingerprint_range(&state.ranges.encoder);
    let dec = state.fingerprint_range(&state.ranges.decoder);
    // Short pre-fit keeps the classifier away from its optimum so the joint
    // step has a gradient worth taking.
    let cfg = ProbeConfig {
        finetune_epochs: 1,
        max_iters: 5,
        ..ProbeConfig::default()
    };
    fit_linear_probe(&mut state, &train, ProbeTask::Background, EvalMode::Finetune, &cfg).unwrap();
    assert_ne!(state.fingerprint_range(&state.ranges.encoder), enc);
    // Decoder is not part of the probe path and stays frozen.
    assert_eq!(state.fingerprint_range(&state.ranges.decoder), dec);
}

#[test]
fn majority_class_probe_matches_label_frequency() {
    let (_, test) = data(8, 64, 3);
    let mut state = build_model(&small_model(), 5).unwrap();
    // Force the probe to always predict class 4.
    let d = state.config.probe_dim();
    let w = Array2::<f32>::zeros((10, d));
    let mut b = Array1::<f32>::zeros(10);
    b[4] = 1.0;
    let range = state.ranges.probe_digit.clone();
    let data = &mut state.params.data_mut()[range];
    data[..w.len()].copy_from_slice(w.as_slice().unwrap());
    data[w.len()..].copy_from_slice(b.as_slice().unwrap());
    let r = evaluate_accuracy(&state, &test, ProbeTask::Digit, EvalMode::Fixed).unwrap();
    let freq = test.samples.iter().filter(|s| s.digit_label == 4).count() as f64 / 64.0;
    assert_eq!(r.top1_accuracy, freq);
}

#[test]
fn exact_fraction_reporting() {
    let (_, test) = data(8, 10, 4);
    let state = build_model(&small_model(), 6).unwrap();
    let r = evaluate_accuracy(&state, &test, ProbeTask::Digit, EvalMode::Fixed).unwrap();
    let correct = (r.top1_accuracy * r.n_eval as f64).round();
    assert_eq!(r.top1_accuracy, correct / r.n_eval as f64);
    let empty = Dataset::default();
    assert!(evaluate_accuracy(&state, &empty, ProbeTask::Digit, EvalMode::Fixed).is_err());
}

#[test]
fn feature_export_round_trips_bit_exactly() {
    let (_, test) = data(4, 5, 5);
    let state = build_model(&small_model(), 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("feats.bin");
    export_features(&state, &test, &path).unwrap();
    let (feats, digits, bkgds) = read_features(&path).unwrap();
    let (expect, ed, eb) = extract_features(&state, &test).unwrap();
    assert_eq!(feats.dim(), (5, state.config.probe_dim()));
    assert_eq!(digits, ed);
    assert_eq!(bkgds, eb);
    for (a, b) in feats.iter().zip(expect.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    // Duplicated sample rows export as duplicated feature rows.
    let mut dup = test.clone();
    dup.samples[1] = dup.samples[0].clone();
    let path2 = dir.path().join("dup.bin");
    export_features(&state, &dup, &path2).unwrap();
    let (f2, _, _) = read_features(&path2).unwrap();
    assert_eq!(f2.row(0), f2.row(1));
}
