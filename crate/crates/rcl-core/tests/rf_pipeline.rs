//! RF signal-processing pipeline behavior: background subtraction,
//! trajectory recovery against generator ground truth, boxes, jitter, ROI
//! crops, and frame masking.

use ndarray::Array2;
use rcl_core::rf::{
    boxes_from_trajectory, detect_trajectory, generate_rf_sequence, jitter_box, mask_frames,
    median_background_subtract, roi_crop, sample_rf_pairs, BoundingBox, DetectParams,
    MaskStrategy, MotionModel, RfGenParams, RfPairParams, Trajectory,
};
use rcl_core::seed::derive_rng;
use rcl_core::RclError;

fn moving_params(noise: f32) -> RfGenParams {
    RfGenParams {
        noise_sigma: noise,
        ..RfGenParams::default()
    }
}

#[test]
fn static_noiseless_residual_is_exactly_zero() {
    let params = RfGenParams {
        motion: MotionModel::Static,
        noise_sigma: 0.0,
        frames: 12,
        ..RfGenParams::default()
    };
    let seq = generate_rf_sequence(&params, 1).unwrap();
    let residuals = median_background_subtract(&seq, seq.len()).unwrap();
    for r in &residuals {
        assert!(r.horizontal.iter().all(|&v| v == 0.0));
        assert!(r.vertical.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn moving_blob_clutter_pixels_cancel() {
    // With zero noise and full-sequence median, pixels the blob never
    // reaches must be exactly zero in the residual.
    let params = RfGenParams {
        noise_sigma: 0.0,
        frames: 40,
        ..RfGenParams::default()
    };
    let seq = generate_rf_sequence(&params, 2).unwrap();
    let residuals = median_background_subtract(&seq, seq.len()).unwrap();
    // Track which pixels the blob could have touched (4 sigma reach).
    let (h, w) = seq.frames[0].horizontal.dim();
    let mut touched = vec![false; h * w];
    let reach = (4.0 * params.blob_sigma).ceil() as i64 + 1;
    for &(gx, gy) in &seq.ground_truth {
        let cx = (gx / params.scale - 0.5).round() as i64;
        let cy = (gy / params.scale - 0.5).round() as i64;
        for i in (cy - reach).max(0)..=(cy + reach).min(h as i64 - 1) {
            for j in (cx - reach).max(0)..=(cx + reach).min(w as i64 - 1) {
                touched[i as usize * w + j as usize] = true;
            }
        }
    }
    for r in &residuals {
        for i in 0..h {
            for j in 0..w {
                if !touched[i * w + j] {
                    assert_eq!(r.horizontal[(i, j)], 0.0, "pixel ({i},{j})");
                }
            }
        }
    }
}

#[test]
fn residual_rms_bounded_under_noise() {
    // Monte-Carlo over seeds: at clutter-only pixels the residual is just
    // noise minus a windowed median, so its RMS stays within 2 sigma.
    let sigma = 0.02f32;
    let mut total_sq = 0.0f64;
    let mut count = 0usize;
    for seed in 0..20u64 {
        let params = RfGenParams {
            motion: MotionModel::Static,
            noise_sigma: sigma,
            frames: 30,
            ..RfGenParams::default()
        };
        let seq = generate_rf_sequence(&params, seed).unwrap();
        let residuals = median_background_subtract(&seq, seq.len()).unwrap();
        // Static blob: exclude a generous disc around it.
        let (gx, gy) = seq.ground_truth[0];
        let (h, w) = seq.frames[0].horizontal.dim();
        let cx = gx / params.scale - 0.5;
        let cy = gy / params.scale - 0.5;
        for r in &residuals {
            for i in 0..h {
                for j in 0..w {
                    let d2 = (j as f32 - cx).powi(2) + (i as f32 - cy).powi(2);
                    if d2 > 100.0 {
                        total_sq += (r.horizontal[(i, j)] as f64).powi(2);
                        count += 1;
                    }
                }
            }
        }
    }
    let rms = (total_sq / count as f64).sqrt();
    assert!(rms <= 2.0 * sigma as f64, "residual rms {rms}");
}

#[test]
fn trajectory_tracks_moving_blob_noiselessly() {
    let params = moving_params(0.0);
    let seq = generate_rf_sequence(&params, 3).unwrap();
    let residuals = median_background_subtract(&seq, seq.len()).unwrap();
    let traj = detect_trajectory(&residuals, seq.scale, &DetectParams::default()).unwrap();
    assert!(!traj.valid[0]);
    let mut max_err_px = 0.0f32;
    for t in 1..seq.len() {
        let moved = {
            let (ax, ay) = seq.ground_truth[t];
            let (bx, by) = seq.ground_truth[t - 1];
            ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt() > 0.1 * seq.scale
        };
        if moved {
            assert!(traj.valid[t], "frame {t} invalid");
            let (dx, dy) = (
                (traj.centers[t].0 - seq.ground_truth[t].0) / seq.scale,
                (traj.centers[t].1 - seq.ground_truth[t].1) / seq.scale,
            );
            max_err_px = max_err_px.max((dx * dx + dy * dy).sqrt());
        }
    }
    assert!(max_err_px <= 1.0, "max centroid error {max_err_px} px");
}

#[test]
fn empty_residual_flags_all_invalid() {
    let (h, w) = (32, 32);
    let zero = rcl_core::rf::RfSequence {
        frames: (0..5)
            .map(|_| rcl_core::rf::RfFrame {
                horizontal: Array2::zeros((h, w)),
                vertical: Array2::zeros((h, w)),
            })
            .collect(),
        ground_truth: vec![(0.0, 0.0); 5],
        scale: 0.05,
    };
    let residuals = median_background_subtract(&zero, 5).unwrap();
    let traj = detect_trajectory(&residuals, 0.05, &DetectParams::default()).unwrap();
    assert!(traj.valid.iter().all(|&v| !v));
    assert!(matches!(
        boxes_from_trajectory(&traj),
        Err(RclError::Detection(_))
    ));
}

#[test]
fn box_arithmetic_and_carry_forward() {
    let b = BoundingBox::person((2.0, 3.0));
    let (x0, x1, y0, y1) = b.extent();
    assert_eq!((x0, x1), (1.5, 2.5));
    assert_eq!((y0, y1), (2.25, 3.75));
    // Pixel box size at scale 0.05: 20 x 30.
    let (px0, py0, px1, py1) = b.pixel_rect(0.05, (128, 128));
    assert!((px1 - px0 - 20.0).abs() < 1e-4);
    assert!((py1 - py0 - 30.0).abs() < 1e-4);

    let traj = Trajectory {
        centers: vec![(0.0, 0.0), (2.0, 3.0), (0.0, 0.0), (0.0, 0.0)],
        valid: vec![false, true, false, false],
    };
    let boxes = boxes_from_trajectory(&traj).unwrap();
    for b in &boxes {
        assert_eq!(b.center, (2.0, 3.0));
        assert_eq!((b.width, b.height), (1.0, 1.5));
    }
}

#[test]
fn jitter_stays_in_range_with_expected_magnitude() {
    let b = BoundingBox::person((2.0, 2.0));
    let mut rng = derive_rng(&[42]);
    let mut sum_abs = 0.0f64;
    for _ in 0..1000 {
        let j = jitter_box(&b, 0.3, &mut rng);
        let dx = j.center.0 - 2.0;
        let dy = j.center.1 - 2.0;
        assert!(dx.abs() <= 0.3 && dy.abs() <= 0.3);
        assert_eq!((j.width, j.height), (1.0, 1.5));
        sum_abs += (dx.abs() as f64 + dy.abs() as f64) / 2.0;
        // At scale 0.05 the offset is at most 6 px.
        assert!(dx.abs() / 0.05 <= 6.0 + 1e-5);
    }
    let mean_abs = sum_abs / 1000.0;
    assert!(
        (mean_abs - 0.15).abs() <= 0.02,
        "mean |offset| {mean_abs} not near 0.15"
    );
    // Zero-width jitter is the identity.
    let same = jitter_box(&b, 0.0, &mut rng);
    assert_eq!(same, b);
}

#[test]
fn roi_crop_identity_and_ramp() {
    let (h, w) = (16usize, 24usize);
    let ramp = Array2::from_shape_fn((h, w), |(i, j)| 0.3 * i as f32 + 0.7 * j as f32 + 1.0);
    // Full-frame box at native size is the identity.
    let full = roi_crop(&ramp, (-0.5, -0.5, w as f32 - 0.5, h as f32 - 0.5), (h, w)).unwrap();
    assert_eq!(full, ramp);
    // Bilinear interpolation reproduces the plane at interior samples.
    let crop = roi_crop(&ramp, (2.0, 3.0, 10.0, 9.0), (12, 16)).unwrap();
    for i in 0..12 {
        for j in 0..16 {
            let sy = 3.0 + (i as f32 + 0.5) * 6.0 / 12.0;
            let sx = 2.0 + (j as f32 + 0.5) * 8.0 / 16.0;
            let expect = 0.3 * sy + 0.7 * sx + 1.0;
            assert!((crop[(i, j)] - expect).abs() < 1e-4, "({i},{j})");
        }
    }
    // Constant image gives constant crops.
    let c = Array2::from_elem((h, w), 0.4f32);
    let crop = roi_crop(&c, (1.3, 2.7, 9.9, 12.4), (5, 5)).unwrap();
    assert!(crop.iter().all(|&v| (v - 0.4).abs() < 1e-6));
    // Zero-overlap box errors.
    assert!(matches!(
        roi_crop(&c, (100.0, 100.0, 120.0, 130.0), (4, 4)),
        Err(RclError::Argument(_))
    ));
}

#[test]
fn mask_frames_strategies() {
    let seq = generate_rf_sequence(&RfGenParams::default(), 9).unwrap();
    assert_eq!(seq.len(), 100);

    let mut rng = derive_rng(&[1]);
    let (masked, idx) =
        mask_frames(&seq, MaskStrategy::CenterSegment { len: 25 }, &mut rng).unwrap();
    assert_eq!(idx, (38..63).collect::<Vec<_>>());
    for &i in &idx {
        assert!(masked.frames[i].horizontal.iter().all(|&v| v == 0.0));
        assert!(masked.frames[i].vertical.iter().all(|&v| v == 0.0));
    }
    // Unmasked frames untouched.
    assert_eq!(masked.frames[0], seq.frames[0]);
    assert_eq!(masked.frames[99], seq.frames[99]);

    for seed in 0..20u64 {
        let mut rng = derive_rng(&[seed, 2]);
        let (_, idx) = mask_frames(
            &seq,
            MaskStrategy::RandomSegments { count: 5, len: 5 },
            &mut rng,
        )
        .unwrap();
        assert_eq!(idx.len(), 25, "seed {seed}");
        // Exactly five contiguous runs of length five.
        let mut runs = 1;
        for w in idx.windows(2) {
            if w[1] != w[0] + 1 {
                runs += 1;
            }
        }
        assert_eq!(runs, 5, "seed {seed}: {idx:?}");
    }

    let mut counts = Vec::new();
    for seed in 0..100u64 {
        let mut rng = derive_rng(&[seed, 3]);
        let (_, idx) = mask_frames(&seq, MaskStrategy::Random { p: 0.25 }, &mut rng).unwrap();
        counts.push(idx.len() as f64);
    }
    let mean = counts.iter().sum::<f64>() / counts.len() as f64;
    assert!((mean - 25.0).abs() <= 2.0, "mean masked count {mean}");
}

#[test]
fn pair_sampling_respects_window() {
    let seq = generate_rf_sequence(&moving_params(0.0), 4).unwrap();
    let residuals = median_background_subtract(&seq, seq.len()).unwrap();
    let traj = detect_trajectory(&residuals, seq.scale, &DetectParams::default()).unwrap();
    let boxes = boxes_from_trajectory(&traj).unwrap();
    let params = RfPairParams::default();
    let mut rng = derive_rng(&[5]);
    let pairs = sample_rf_pairs(&seq, &boxes, 64, &params, &mut rng).unwrap();
    for p in &pairs {
        let lo = p.anchor_frame.saturating_sub(9);
        let hi = (p.anchor_frame + 9).min(seq.len() - 1);
        assert!(
            (lo..=hi).contains(&p.positive_frame),
            "anchor {} positive {}",
            p.anchor_frame,
            p.positive_frame
        );
        assert_eq!(p.view1.dim(), (2, 30, 20));
    }
    // Within-batch negatives for InfoNCE: 2N-2 of the 2N-1 candidates.
    let batch = 8;
    assert_eq!(2 * batch - 2, 14);

    // No jitter, forced same frame: identical crops.
    let tight = RfPairParams {
        jitter_m: 0.0,
        window_s: 0.0,
        ..params
    };
    let mut rng = derive_rng(&[6]);
    let pairs = sample_rf_pairs(&seq, &boxes, 8, &tight, &mut rng).unwrap();
    for p in &pairs {
        assert_eq!(p.anchor_frame, p.positive_frame);
        assert_eq!(p.view1, p.view2);
    }
}

#[test]
fn trailing_window_median_differs_from_full() {
    let params = moving_params(0.0);
    let seq = generate_rf_sequence(&params, 10).unwrap();
    let full = median_background_subtract(&seq, seq.len()).unwrap();
    let trailing = median_background_subtract(&seq, 7).unwrap();
    assert_eq!(full.len(), trailing.len());
    // Early frames use fewer history frames and generally differ.
    assert_ne!(full[3], trailing[3]);
}
