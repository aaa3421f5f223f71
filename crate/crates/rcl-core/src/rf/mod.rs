//! Synthetic RF-heatmap sequences and the signal-processing pipeline that
//! tracks the moving person and produces region-of-interest boxes, plus a
//! small spatio-temporal trainer wired into the same dual-branch objective.

mod gen;
mod io;
mod pipeline;
mod train;

pub use gen::{generate_rf_sequence, MotionModel, RfGenParams};
pub use io::{read_rf_sequence, write_rf_sequence};
pub use pipeline::{
    boxes_from_trajectory, detect_trajectory, jitter_box, mask_frames,
    median_background_subtract, roi_crop, roi_crop_stack, sample_rf_pairs, DetectParams,
    MaskStrategy, RfPair, RfPairParams,
};
pub use train::{build_rf_model, center_probe_rmse, run_rf_training, RfModel, RfTrainConfig};

use ndarray::Array2;

/// One radar frame: a pair of horizontal and vertical power heatmaps.
#[derive(Debug, Clone, PartialEq)]
pub struct RfFrame {
    pub horizontal: Array2<f32>,
    pub vertical: Array2<f32>,
}

/// A sequence of frames with per-frame ground-truth person center (meters)
/// and the meters-per-pixel scale. Frame rate is nominally 30 fps.
#[derive(Debug, Clone, PartialEq)]
pub struct RfSequence {
    pub frames: Vec<RfFrame>,
    pub ground_truth: Vec<(f32, f32)>,
    pub scale: f32,
}

pub const RF_FPS: f32 = 30.0;

impl RfSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn grid(&self) -> ((usize, usize), (usize, usize)) {
        (
            self.frames[0].horizontal.dim(),
            self.frames[0].vertical.dim(),
        )
    }
}

/// Fixed-physical-size person box (1 m × 1.5 m), centered in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub center: (f32, f32),
    pub width: f32,
    pub height: f32,
}

impl BoundingBox {
    pub fn person(center: (f32, f32)) -> Self {
        BoundingBox {
            center,
            width: 1.0,
            height: 1.5,
        }
    }

    /// Meter-space extents `(x0, x1, y0, y1)`.
    pub fn extent(&self) -> (f32, f32, f32, f32) {
        (
            self.center.0 - self.width / 2.0,
            self.center.0 + self.width / 2.0,
            self.center.1 - self.height / 2.0,
            self.center.1 + self.height / 2.0,
        )
    }

    /// Continuous pixel-space rectangle `(x0, y0, x1, y1)` under the
    /// pixel-center convention `p = x/scale - 0.5`, clipped to the frame.
    pub fn pixel_rect(&self, scale: f32, (h, w): (usize, usize)) -> (f32, f32, f32, f32) {
        let (x0, x1, y0, y1) = self.extent();
        let to_px = |m: f32| m / scale - 0.5;
        (
            to_px(x0).max(-0.5),
            to_px(y0).max(-0.5),
            to_px(x1).min(w as f32 - 0.5),
            to_px(y1).min(h as f32 - 0.5),
        )
    }
}

/// Per-frame detected center in meters with a validity flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub centers: Vec<(f32, f32)>,
    pub valid: Vec<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}
