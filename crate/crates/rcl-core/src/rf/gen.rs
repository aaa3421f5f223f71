//! Synthetic RF sequence generator: static Gaussian clutter, one moving
//! Gaussian reflection for the person, and optional i.i.d. noise.

use super::{RfFrame, RfSequence, RF_FPS};
use crate::seed::derive_rng;
use crate::{RclError, Result};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MotionModel {
    /// Person stands still at a seed-chosen position.
    Static,
    /// Random-waypoint walk at the given speed.
    Waypoints { speed_mps: f32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RfGenParams {
    pub frames: usize,
    pub grid: (usize, usize),
    pub scale: f32,
    pub clutter_count: (usize, usize),
    pub clutter_amp: (f32, f32),
    pub clutter_sigma: (f32, f32),
    pub blob_amp: f32,
    pub blob_sigma: f32,
    pub noise_sigma: f32,
    pub motion: MotionModel,
    /// Height of the person's reflection center in the vertical view.
    pub person_height: f32,
}

impl Default for RfGenParams {
    fn default() -> Self {
        RfGenParams {
            frames: 100,
            grid: (64, 64),
            scale: 0.05,
            clutter_count: (5, 15),
            clutter_amp: (0.3, 1.0),
            clutter_sigma: (1.0, 3.0),
            blob_amp: 1.0,
            blob_sigma: 1.5,
            noise_sigma: 0.0,
            motion: MotionModel::Waypoints { speed_mps: 1.0 },
            person_height: 0.9,
        }
    }
}

impl RfGenParams {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(RclError::Config("sequence needs at least one frame".to_string()));
        }
        // The person reflection must stay sparse: pixels above half the blob
        // maximum form a disc of radius sigma*sqrt(2 ln 2).
        let (h, w) = self.grid;
        let half_max_radius = self.blob_sigma * (2.0f32 * 2.0f32.ln()).sqrt();
        let footprint = std::f32::consts::PI * half_max_radius * half_max_radius;
        if footprint >= 0.01 * (h * w) as f32 {
            return Err(RclError::Config(format!(
                "person blob footprint {footprint:.1} px >= 1% of the {h}x{w} frame"
            )));
        }
        Ok(())
    }
}

fn add_gaussian(map: &mut Array2<f32>, cx_px: f32, cy_px: f32, sigma_px: f32, amp: f32) {
    let (h, w) = map.dim();
    let reach = (4.0 * sigma_px).ceil() as isize;
    let ix = cx_px.round() as isize;
    let iy = cy_px.round() as isize;
    let inv = 1.0 / (2.0 * sigma_px * sigma_px);
    for i in (iy - reach).max(0)..=(iy + reach).min(h as isize - 1) {
        for j in (ix - reach).max(0)..=(ix + reach).min(w as isize - 1) {
            let dx = j as f32 - cx_px;
            let dy = i as f32 - cy_px;
            map[(i as usize, j as usize)] += amp * (-(dx * dx + dy * dy) * inv).exp();
        }
    }
}

/// Deterministically generates a sequence: frames are static clutter plus the
/// person blob at the ground-truth position plus i.i.d. noise.
pub fn generate_rf_sequence(params: &RfGenParams, seed: u64) -> Result<RfSequence> {
    params.validate()?;
    let (h, w) = params.grid;
    let mut rng = derive_rng(&[seed, 0x7266]);
    let span_x = w as f32 * params.scale;
    let span_y = h as f32 * params.scale;

    // Static clutter planes, one draw per sequence.
    let mut clutter_h = Array2::<f32>::zeros((h, w));
    let mut clutter_v = Array2::<f32>::zeros((h, w));
    let count = rng.gen_range(params.clutter_count.0..=params.clutter_count.1);
    for plane in [&mut clutter_h, &mut clutter_v] {
        for _ in 0..count {
            let cx = rng.gen_range(0.0..w as f32);
            let cy = rng.gen_range(0.0..h as f32);
            let amp = rng.gen_range(params.clutter_amp.0..params.clutter_amp.1);
            let sigma = rng.gen_range(params.clutter_sigma.0..params.clutter_sigma.1);
            add_gaussian(plane, cx, cy, sigma, amp);
        }
    }

    // Ground-truth track in meters, inside a 10% margin of the sensed area.
    let margin_x = 0.1 * span_x;
    let margin_y = 0.1 * span_y;
    let rand_point = |rng: &mut rand_chacha::ChaCha8Rng| -> (f32, f32) {
        (
            rng.gen_range(margin_x..span_x - margin_x),
            rng.gen_range(margin_y..span_y - margin_y),
        )
    };
    let mut track = Vec::with_capacity(params.frames);
    match params.motion {
        MotionModel::Static => {
            let p = rand_point(&mut rng);
            track.resize(params.frames, p);
        }
        MotionModel::Waypoints { speed_mps } => {
            let mut pos = rand_point(&mut rng);
            let mut target = rand_point(&mut rng);
            let step = speed_mps / RF_FPS;
            for _ in 0..params.frames {
                track.push(pos);
                let (dx, dy) = (target.0 - pos.0, target.1 - pos.1);
                let dist = (dx * dx + dy * dy).sqrt();
                if dist < step {
                    pos = target;
                    target = rand_point(&mut rng);
                } else {
                    pos = (pos.0 + dx / dist * step, pos.1 + dy / dist * step);
                }
            }
        }
    }

    let to_px = |m: f32| m / params.scale - 0.5;
    let mut frames = Vec::with_capacity(params.frames);
    for &(gx, gy) in &track {
        let mut horizontal = clutter_h.clone();
        add_gaussian(
            &mut horizontal,
            to_px(gx),
            to_px(gy),
            params.blob_sigma,
            params.blob_amp,
        );
        let mut vertical = clutter_v.clone();
        add_gaussian(
            &mut vertical,
            to_px(gx),
            to_px(params.person_height),
            params.blob_sigma,
            params.blob_amp,
        );
        if params.noise_sigma > 0.0 {
            for plane in [&mut horizontal, &mut vertical] {
                for v in plane.iter_mut() {
                    let z: f32 = rng.sample(StandardNormal);
                    *v += params.noise_sigma * z;
                }
            }
        }
        frames.push(RfFrame {
            horizontal,
            vertical,
        });
    }
    Ok(RfSequence {
        frames,
        ground_truth: track,
        scale: params.scale,
    })
}
