//! Signal-processing pipeline: static-background removal by per-pixel
//! median, motion detection by consecutive-frame differencing, ROI boxes,
//! box jitter, bilinear ROI crops, and temporal frame masking.

use super::{BoundingBox, RfFrame, RfSequence, Trajectory, RF_FPS};
use crate::{RclError, Result};
use ndarray::{Array2, Array3};
use rand::{Rng, RngCore};

fn median_of(values: &mut [f32]) -> f32 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Subtracts the per-pixel median over the trailing `window` frames (the
/// whole sequence when `window >= T`) from every frame of both views.
pub fn median_background_subtract(seq: &RfSequence, window: usize) -> Result<Vec<RfFrame>> {
    if window == 0 {
        return Err(RclError::Argument("median window must be >= 1".to_string()));
    }
    let t = seq.len();
    fn planes(f: &RfFrame, which: usize) -> &Array2<f32> {
        if which == 0 {
            &f.horizontal
        } else {
            &f.vertical
        }
    }
    let mut residuals: Vec<RfFrame> = seq
        .frames
        .iter()
        .map(|f| RfFrame {
            horizontal: f.horizontal.clone(),
            vertical: f.vertical.clone(),
        })
        .collect();

    for which in 0..2 {
        let (h, w) = planes(&seq.frames[0], which).dim();
        if window >= t {
            // One full-sequence median per pixel, reused for all frames.
            let mut buf = vec![0.0f32; t];
            for i in 0..h {
                for j in 0..w {
                    for (k, f) in seq.frames.iter().enumerate() {
                        buf[k] = planes(f, which)[(i, j)];
                    }
                    let med = median_of(&mut buf);
                    for r in residuals.iter_mut() {
                        let plane = if which == 0 {
                            &mut r.horizontal
                        } else {
                            &mut r.vertical
                        };
                        plane[(i, j)] -= med;
                    }
                }
            }
        } else {
            let mut buf = Vec::with_capacity(window);
            for ti in 0..t {
                let lo = ti + 1 - window.min(ti + 1);
                for i in 0..h {
                    for j in 0..w {
                        buf.clear();
                        for f in &seq.frames[lo..=ti] {
                            buf.push(planes(f, which)[(i, j)]);
                        }
                        let med = median_of(&mut buf);
                        let plane = if which == 0 {
                            &mut residuals[ti].horizontal
                        } else {
                            &mut residuals[ti].vertical
                        };
                        plane[(i, j)] -= med;
                    }
                }
            }
        }
    }
    Ok(residuals)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectParams {
    /// Fixed motion threshold; when `None` it is 4x the noise level
    /// estimated from the median absolute deviation of the residual.
    pub threshold: Option<f32>,
    pub min_area: usize,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            threshold: None,
            min_area: 3,
        }
    }
}

/// Estimated noise sigma of the residuals (median absolute deviation of the
/// horizontal view, scaled to sigma for a normal distribution).
fn residual_noise_sigma(residuals: &[RfFrame]) -> f32 {
    let mut sample = Vec::new();
    // Subsample for speed; the MAD is robust to the sparse person pixels.
    for f in residuals {
        for (k, &v) in f.horizontal.iter().enumerate() {
            if k % 7 == 0 {
                sample.push(v.abs());
            }
        }
    }
    1.4826 * median_of(&mut sample)
}

/// Detects the per-frame person center from background-subtracted frames by
/// thresholding consecutive-frame absolute differences on the horizontal
/// view, keeping the connected component with the largest summed intensity
/// (ties: smaller bounding-box top row, then left column), and reporting its
/// intensity-weighted centroid in meters. Frame 0 has no difference and is
/// always invalid.
pub fn detect_trajectory(
    residuals: &[RfFrame],
    scale: f32,
    params: &DetectParams,
) -> Result<Trajectory> {
    if residuals.len() < 2 {
        return Err(RclError::Argument(
            "trajectory detection needs at least two frames".to_string(),
        ));
    }
    let threshold = params
        .threshold
        .unwrap_or_else(|| 4.0 * residual_noise_sigma(residuals));
    let (h, w) = residuals[0].horizontal.dim();
    let mut centers = vec![(0.0f32, 0.0f32); residuals.len()];
    let mut valid = vec![false; residuals.len()];

    let mut mask = vec![false; h * w];
    let mut comp = vec![usize::MAX; h * w];
    for ti in 1..residuals.len() {
        let prev = &residuals[ti - 1].horizontal;
        let cur = &residuals[ti].horizontal;
        let mut diff = Array2::<f32>::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                diff[(i, j)] = (cur[(i, j)] - prev[(i, j)]).abs();
            }
        }
        for (m, &d) in mask.iter_mut().zip(diff.iter()) {
            *m = d > threshold;
        }
        comp.fill(usize::MAX);
        // 8-connected components over the thresholded mask.
        struct Component {
            sum: f64,
            sx: f64,
            sy: f64,
            area: usize,
            min_row: usize,
            min_col: usize,
        }
        let mut components: Vec<Component> = Vec::new();
        let mut stack = Vec::new();
        for start in 0..h * w {
            if !mask[start] || comp[start] != usize::MAX {
                continue;
            }
            let id = components.len();
            components.push(Component {
                sum: 0.0,
                sx: 0.0,
                sy: 0.0,
                area: 0,
                min_row: usize::MAX,
                min_col: usize::MAX,
            });
            stack.push(start);
            comp[start] = id;
            while let Some(p) = stack.pop() {
                let (i, j) = (p / w, p % w);
                let c = &mut components[id];
                let d = diff[(i, j)] as f64;
                c.sum += d;
                c.sx += d * j as f64;
                c.sy += d * i as f64;
                c.area += 1;
                c.min_row = c.min_row.min(i);
                c.min_col = c.min_col.min(j);
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let (ni, nj) = (i as i64 + di, j as i64 + dj);
                        if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                            continue;
                        }
                        let np = ni as usize * w + nj as usize;
                        if mask[np] && comp[np] == usize::MAX {
                            comp[np] = id;
                            stack.push(np);
                        }
                    }
                }
            }
        }
        let best = components
            .iter()
            .filter(|c| c.area >= params.min_area)
            .max_by(|a, b| {
                a.sum
                    .partial_cmp(&b.sum)
                    .expect("finite")
                    .then(b.min_row.cmp(&a.min_row))
                    .then(b.min_col.cmp(&a.min_col))
            });
        if let Some(c) = best {
            let cx = (c.sx / c.sum) as f32;
            let cy = (c.sy / c.sum) as f32;
            centers[ti] = ((cx + 0.5) * scale, (cy + 0.5) * scale);
            valid[ti] = true;
        }
    }
    Ok(Trajectory { centers, valid })
}

/// One fixed-size person box per frame; frames without a valid detection
/// inherit the nearest valid frame's box (earlier frame on ties), so the box
/// stays where the person stopped.
pub fn boxes_from_trajectory(traj: &Trajectory) -> Result<Vec<BoundingBox>> {
    let valid_indices: Vec<usize> = (0..traj.len()).filter(|&i| traj.valid[i]).collect();
    if valid_indices.is_empty() {
        return Err(RclError::Detection(
            "no frame produced a valid detection".to_string(),
        ));
    }
    let mut boxes = Vec::with_capacity(traj.len());
    for i in 0..traj.len() {
        let src = if traj.valid[i] {
            i
        } else {
            *valid_indices
                .iter()
                .min_by_key(|&&v| {
                    let dist = v.abs_diff(i);
                    (dist, v)
                })
                .expect("nonempty")
        };
        boxes.push(BoundingBox::person(traj.centers[src]));
    }
    Ok(boxes)
}

/// Shifts the box center by independent uniform draws in `[-max_m, max_m]`
/// per axis; size unchanged. A nonpositive range is the identity.
pub fn jitter_box(b: &BoundingBox, max_m: f32, rng: &mut dyn RngCore) -> BoundingBox {
    if max_m <= 0.0 {
        return *b;
    }
    let dx = rng.gen_range(-max_m..max_m);
    let dy = rng.gen_range(-max_m..max_m);
    BoundingBox {
        center: (b.center.0 + dx, b.center.1 + dy),
        ..*b
    }
}

/// Bilinear crop of the continuous pixel rectangle `(x0, y0, x1, y1)` to a
/// fixed output size, clamping samples at the frame border.
pub fn roi_crop(
    map: &Array2<f32>,
    rect: (f32, f32, f32, f32),
    out: (usize, usize),
) -> Result<Array2<f32>> {
    let (h, w) = map.dim();
    let (x0, y0, x1, y1) = rect;
    let cx0 = x0.max(-0.5);
    let cy0 = y0.max(-0.5);
    let cx1 = x1.min(w as f32 - 0.5);
    let cy1 = y1.min(h as f32 - 0.5);
    if !(cx1 > cx0 && cy1 > cy0) {
        return Err(RclError::Argument(format!(
            "roi ({x0},{y0})-({x1},{y1}) does not overlap the {h}x{w} frame"
        )));
    }
    let (oh, ow) = out;
    let bh = (cy1 - cy0) / oh as f32;
    let bw = (cx1 - cx0) / ow as f32;
    Ok(Array2::from_shape_fn((oh, ow), |(i, j)| {
        let sy = (cy0 + (i as f32 + 0.5) * bh).clamp(0.0, (h - 1) as f32);
        let sx = (cx0 + (j as f32 + 0.5) * bw).clamp(0.0, (w - 1) as f32);
        let y0i = sy.floor() as usize;
        let x0i = sx.floor() as usize;
        let y1i = (y0i + 1).min(h - 1);
        let x1i = (x0i + 1).min(w - 1);
        let ty = sy - y0i as f32;
        let tx = sx - x0i as f32;
        (map[(y0i, x0i)] * (1.0 - tx) + map[(y0i, x1i)] * tx) * (1.0 - ty)
            + (map[(y1i, x0i)] * (1.0 - tx) + map[(y1i, x1i)] * tx) * ty
    }))
}

/// [`roi_crop`] over a channel stack.
pub fn roi_crop_stack(
    maps: &Array3<f32>,
    rect: (f32, f32, f32, f32),
    out: (usize, usize),
) -> Result<Array3<f32>> {
    let (c, _, _) = maps.dim();
    let mut result = Array3::zeros((c, out.0, out.1));
    for ch in 0..c {
        let crop = roi_crop(&maps.index_axis(ndarray::Axis(0), ch).to_owned(), rect, out)?;
        result.index_axis_mut(ndarray::Axis(0), ch).assign(&crop);
    }
    Ok(result)
}

/// Temporal masking strategies for the reconstructive task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskStrategy {
    /// One centered run of `len` frames.
    CenterSegment { len: usize },
    /// `count` non-overlapping runs of `len` frames at random positions;
    /// overlapping draws are resampled so the masked count is exact.
    RandomSegments { count: usize, len: usize },
    /// Independent Bernoulli(p) per frame.
    Random { p: f64 },
}

/// Zeroes whole frames (both views) per the strategy; returns the masked
/// sequence and the sorted masked index set.
pub fn mask_frames(
    seq: &RfSequence,
    strategy: MaskStrategy,
    rng: &mut dyn RngCore,
) -> Result<(RfSequence, Vec<usize>)> {
    let t = seq.len();
    let mut indices: Vec<usize> = match strategy {
        MaskStrategy::CenterSegment { len } => {
            if len > t {
                return Err(RclError::Config(format!(
                    "center segment of {len} frames exceeds sequence length {t}"
                )));
            }
            let start = (t - len + 1) / 2;
            (start..start + len).collect()
        }
        MaskStrategy::RandomSegments { count, len } => {
            if count * len > t {
                return Err(RclError::Config(format!(
                    "{count} segments of {len} frames exceed sequence length {t}"
                )));
            }
            let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(count);
            let mut guard = 0usize;
            while chosen.len() < count {
                guard += 1;
                if guard > 100_000 {
                    return Err(RclError::Config(
                        "could not place non-overlapping mask segments".to_string(),
                    ));
                }
                let start = rng.gen_range(0..=t - len);
                // Require a one-frame gap so the segments stay distinct runs.
                if chosen
                    .iter()
                    .all(|&(s, l)| start + len < s || s + l < start)
                {
                    chosen.push((start, len));
                }
            }
            chosen
                .iter()
                .flat_map(|&(s, l)| s..s + l)
                .collect()
        }
        MaskStrategy::Random { p } => (0..t).filter(|_| rng.gen_bool(p)).collect(),
    };
    indices.sort_unstable();
    indices.dedup();
    let mut masked = seq.clone();
    for &i in &indices {
        masked.frames[i].horizontal.fill(0.0);
        masked.frames[i].vertical.fill(0.0);
    }
    Ok((masked, indices))
}

/// Anchor/positive ROI pair for contrastive training: two jittered crops,
/// the positive drawn from within ±`window_s` seconds of the anchor.
#[derive(Debug, Clone)]
pub struct RfPair {
    pub anchor_frame: usize,
    pub positive_frame: usize,
    pub view1: Array3<f32>,
    pub view2: Array3<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RfPairParams {
    pub window_s: f32,
    pub jitter_m: f32,
    pub out: (usize, usize),
}

impl Default for RfPairParams {
    fn default() -> Self {
        RfPairParams {
            window_s: 0.3,
            jitter_m: 0.3,
            out: (30, 20),
        }
    }
}

fn frame_stack(f: &RfFrame) -> Array3<f32> {
    let (h, w) = f.horizontal.dim();
    let mut out = Array3::zeros((2, h, w));
    out.index_axis_mut(ndarray::Axis(0), 0).assign(&f.horizontal);
    out.index_axis_mut(ndarray::Axis(0), 1).assign(&f.vertical);
    out
}

/// Samples `count` anchor/positive ROI pairs from the sequence.
pub fn sample_rf_pairs(
    seq: &RfSequence,
    boxes: &[BoundingBox],
    count: usize,
    params: &RfPairParams,
    rng: &mut dyn RngCore,
) -> Result<Vec<RfPair>> {
    if boxes.len() != seq.len() {
        return Err(RclError::Shape(format!(
            "{} boxes for {} frames",
            boxes.len(),
            seq.len()
        )));
    }
    let t = seq.len();
    let window = (params.window_s * RF_FPS).round() as i64;
    let grid = seq.frames[0].horizontal.dim();
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let a = rng.gen_range(0..t);
        let lo = (a as i64 - window).max(0) as usize;
        let hi = ((a as i64 + window) as usize).min(t - 1);
        let p = rng.gen_range(lo..=hi);
        let b1 = jitter_box(&boxes[a], params.jitter_m, rng);
        let b2 = jitter_box(&boxes[p], params.jitter_m, rng);
        let view1 = roi_crop_stack(
            &frame_stack(&seq.frames[a]),
            b1.pixel_rect(seq.scale, grid),
            params.out,
        )?;
        let view2 = roi_crop_stack(
            &frame_stack(&seq.frames[p]),
            b2.pixel_rect(seq.scale, grid),
            params.out,
        )?;
        pairs.push(RfPair {
            anchor_frame: a,
            positive_frame: p,
            view1,
            view2,
        });
    }
    Ok(pairs)
}
