//! Contrastive-view augmentations and the rectangle-masking operator used by
//! the reconstructive branch.
//!
//! Augmentations apply in a fixed order (crop, flip, color jitter, grayscale,
//! blur), drawing from the generator in that documented order so seeded runs
//! are reproducible.

use crate::data::IMG_SIZE;
use ndarray::{Array2, Array3};
use rand::Rng;

/// Switches and strengths for the contrastive augmentation pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    pub crop: bool,
    /// Area fraction range for the random resized crop, subset of (0, 1].
    pub crop_scale: (f32, f32),
    pub flip: bool,
    pub flip_prob: f32,
    pub color_jitter: bool,
    /// Brightness/contrast/saturation strength: factors in [1-s, 1+s].
    pub jitter_strength: f32,
    /// Hue shift half-range in turns.
    pub jitter_hue: f32,
    pub grayscale: bool,
    pub grayscale_prob: f32,
    pub blur: bool,
    pub blur_prob: f32,
    pub blur_sigma: (f32, f32),
}

impl AugmentationPolicy {
    /// Everything off; `apply_policy` is the identity.
    pub fn disabled() -> Self {
        AugmentationPolicy {
            crop: false,
            crop_scale: (1.0, 1.0),
            flip: false,
            flip_prob: 0.0,
            color_jitter: false,
            jitter_strength: 0.0,
            jitter_hue: 0.0,
            grayscale: false,
            grayscale_prob: 0.0,
            blur: false,
            blur_prob: 0.0,
            blur_sigma: (0.1, 2.0),
        }
    }

    /// Random cropping plus random color jittering, the pairing used for the
    /// digit-on-background experiments.
    pub fn cmnist_default() -> Self {
        AugmentationPolicy {
            crop: true,
            crop_scale: (0.2, 1.0),
            color_jitter: true,
            jitter_strength: 0.4,
            jitter_hue: 0.1,
            ..Self::disabled()
        }
    }

    /// The full five-transform pipeline.
    pub fn full() -> Self {
        AugmentationPolicy {
            crop: true,
            crop_scale: (0.2, 1.0),
            flip: true,
            flip_prob: 0.5,
            color_jitter: true,
            jitter_strength: 0.4,
            jitter_hue: 0.1,
            grayscale: true,
            grayscale_prob: 0.2,
            blur: true,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
        }
    }

    /// Named removal configurations matching the augmentation-ablation rows.
    pub fn named(row: &str) -> Option<Self> {
        let mut p = Self::full();
        match row {
            "full" => {}
            "remove_flip" => p.flip = false,
            "remove_blur" => p.blur = false,
            "remove_color_jitter" => p.color_jitter = false,
            "remove_grayscale" => p.grayscale = false,
            "crop_blur_only" => {
                p.flip = false;
                p.color_jitter = false;
                p.grayscale = false;
            }
            "crop_only" => {
                p.flip = false;
                p.color_jitter = false;
                p.grayscale = false;
                p.blur = false;
            }
            _ => return None,
        }
        Some(p)
    }

    pub fn validate(&self) -> crate::Result<()> {
        let probs = [self.flip_prob, self.grayscale_prob, self.blur_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(crate::RclError::Config(
                "augmentation probabilities must be in [0,1]".to_string(),
            ));
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(crate::RclError::Config(format!(
                "crop scale range ({lo}, {hi}) must be a subset of (0, 1]"
            )));
        }
        Ok(())
    }
}

/// A rectangle in pixel coordinates, fully inside the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl MaskRect {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.top && i < self.top + self.height && j >= self.left && j < self.left + self.width
    }
}

/// Record of which rectangles were masked and what they were filled with.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub rects: Vec<MaskRect>,
    pub fill: [f32; 3],
}

impl MaskSpec {
    pub fn validate(&self) -> crate::Result<()> {
        if !(3..=5).contains(&self.rects.len()) {
            return Err(crate::RclError::Config(format!(
                "mask must have 3 to 5 rectangles, got {}",
                self.rects.len()
            )));
        }
        for r in &self.rects {
            if !(10..=16).contains(&r.height) || !(10..=16).contains(&r.width) {
                return Err(crate::RclError::Config(format!(
                    "mask rectangle sides must be in [10,16], got {}x{}",
                    r.height, r.width
                )));
            }
            if r.top + r.height > IMG_SIZE || r.left + r.width > IMG_SIZE {
                return Err(crate::RclError::Config(
                    "mask rectangle exceeds image bounds".to_string(),
                ));
            }
        }
        Ok(())
    }

    pub fn covers(&self, i: usize, j: usize) -> bool {
        self.rects.iter().any(|r| r.contains(i, j))
    }
}

/// Masks 3–5 square patches (sides 10–16 px, possibly overlapping) with the
/// dataset mean pixel. Returns the masked image and the mask record.
pub fn mask_random_patches(
    image: &Array3<f32>,
    mean_pixel: [f32; 3],
    rng: &mut impl Rng,
) -> (Array3<f32>, MaskSpec) {
    let count = rng.gen_range(3..=5usize);
    let mut rects = Vec::with_capacity(count);
    let mut out = image.clone();
    for _ in 0..count {
        let side = rng.gen_range(10..=16usize);
        let top = rng.gen_range(0..=IMG_SIZE - side);
        let left = rng.gen_range(0..=IMG_SIZE - side);
        rects.push(MaskRect {
            top,
            left,
            height: side,
            width: side,
        });
        for c in 0..3 {
            for i in top..top + side {
                for j in left..left + side {
                    out[(c, i, j)] = mean_pixel[c];
                }
            }
        }
    }
    (out, MaskSpec {
        rects,
        fill: mean_pixel,
    })
}

/// Crop window sampler for the random resized crop: up to ten attempts at a
/// random area fraction and log-uniform aspect ratio in [3/4, 4/3], then a
/// whole-image fallback.
pub(crate) fn sample_crop_window(
    rng: &mut impl Rng,
    scale: (f32, f32),
    (h, w): (usize, usize),
) -> (usize, usize, usize, usize) {
    let area = (h * w) as f32;
    for _ in 0..10 {
        let frac = if scale.0 >= scale.1 {
            scale.0
        } else {
            rng.gen_range(scale.0..scale.1)
        };
        let target = area * frac;
        let log_ratio = rng.gen_range((0.75f32).ln()..(4.0f32 / 3.0).ln());
        let ratio = log_ratio.exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        let (cw, ch) = (cw.max(1), ch.max(1));
        if cw <= w && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    (0, 0, h, w)
}

/// Bilinear resize of the window `(top, left, ch, cw)` of `src` back to the
/// full image size, sampling at pixel centers and clamping at edges.
fn resize_window(
    src: &Array3<f32>,
    (top, left, ch, cw): (usize, usize, usize, usize),
) -> Array3<f32> {
    let out_n = IMG_SIZE;
    let sy = ch as f32 / out_n as f32;
    let sx = cw as f32 / out_n as f32;
    Array3::from_shape_fn((3, out_n, out_n), |(c, i, j)| {
        let fy = ((i as f32 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f32);
        let fx = ((j as f32 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f32);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(ch - 1);
        let x1 = (x0 + 1).min(cw - 1);
        let ty = fy - y0 as f32;
        let tx = fx - x0 as f32;
        let v00 = src[(c, top + y0, left + x0)];
        let v01 = src[(c, top + y0, left + x1)];
        let v10 = src[(c, top + y1, left + x0)];
        let v11 = src[(c, top + y1, left + x1)];
        (v00 * (1.0 - tx) + v01 * tx) * (1.0 - ty) + (v10 * (1.0 - tx) + v11 * tx) * ty
    })
}

pub(crate) fn luminance(img: &Array3<f32>) -> Array2<f32> {
    let (_, h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        0.299 * img[(0, i, j)] + 0.587 * img[(1, i, j)] + 0.114 * img[(2, i, j)]
    })
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn color_jitter(img: &mut Array3<f32>, strength: f32, hue: f32, rng: &mut impl Rng) {
    let range = |rng: &mut dyn rand::RngCore, s: f32| -> f32 {
        if s <= 0.0 {
            1.0
        } else {
            rand::Rng::gen_range(&mut *rng, (1.0 - s).max(0.0)..1.0 + s)
        }
    };
    let fb = range(rng, strength);
    let fc = range(rng, strength);
    let fs = range(rng, strength);
    let fh = if hue > 0.0 { rng.gen_range(-hue..hue) } else { 0.0 };

    for v in img.iter_mut() {
        *v *= fb;
    }
    let lum = luminance(img);
    let mean_lum = lum.iter().sum::<f32>() / lum.len() as f32;
    for v in img.iter_mut() {
        *v = (*v - mean_lum) * fc + mean_lum;
    }
    let lum = luminance(img);
    let (_, h, w) = img.dim();
    for i in 0..h {
        for j in 0..w {
            let l = lum[(i, j)];
            for c in 0..3 {
                let v = &mut img[(c, i, j)];
                *v = l + (*v - l) * fs;
            }
        }
    }
    if fh != 0.0 {
        for i in 0..h {
            for j in 0..w {
                let (r, g, b) = (img[(0, i, j)], img[(1, i, j)], img[(2, i, j)]);
                let (hh, ss, vv) = rgb_to_hsv(r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0));
                let (r2, g2, b2) = hsv_to_rgb(hh + fh, ss, vv);
                img[(0, i, j)] = r2;
                img[(1, i, j)] = g2;
                img[(2, i, j)] = b2;
            }
        }
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn gaussian_blur(img: &Array3<f32>, sigma: f32) -> Array3<f32> {
    let radius = ((2.0 * sigma).ceil() as usize).clamp(1, 7);
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for k in -(radius as isize)..=radius as isize {
        kernel.push((-(k * k) as f32 / (2.0 * sigma * sigma)).exp());
    }
    let norm: f32 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let (ch, h, w) = img.dim();
    let mut tmp = Array3::<f32>::zeros((ch, h, w));
    for c in 0..ch {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let jj = (j as isize + ki as isize - radius as isize).clamp(0, w as isize - 1);
                    acc += kv * img[(c, i, jj as usize)];
                }
                tmp[(c, i, j)] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((ch, h, w));
    for c in 0..ch {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let ii = (i as isize + ki as isize - radius as isize).clamp(0, h as isize - 1);
                    acc += kv * tmp[(c, ii as usize, j)];
                }
                out[(c, i, j)] = acc;
            }
        }
    }
    out
}

/// Applies the policy's transforms in order. Output stays 3×64×64 in [0,1]
/// and is identical for identical seeds.
pub fn apply_policy(
    image: &Array3<f32>,
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
) -> Array3<f32> {
    let (_, h, w) = image.dim();
    let mut out = if policy.crop {
        let window = sample_crop_window(rng, policy.crop_scale, (h, w));
        resize_window(image, window)
    } else {
        image.clone()
    };
    if policy.flip && rng.gen::<f32>() < policy.flip_prob {
        let (_, _, w) = out.dim();
        let flipped = Array3::from_shape_fn(out.dim(), |(c, i, j)| out[(c, i, w - 1 - j)]);
        out = flipped;
    }
    if policy.color_jitter {
        color_jitter(&mut out, policy.jitter_strength, policy.jitter_hue, rng);
    }
    if policy.grayscale && rng.gen::<f32>() < policy.grayscale_prob {
        let lum = luminance(&out);
        for c in 0..3 {
            for i in 0..IMG_SIZE {
                for j in 0..IMG_SIZE {
                    out[(c, i, j)] = lum[(i, j)];
                }
            }
        }
    }
    if policy.blur && rng.gen::<f32>() < policy.blur_prob {
        let sigma = rng.gen_range(policy.blur_sigma.0..policy.blur_sigma.1);
        out = gaussian_blur(&out, sigma);
        // Kernel normalization in f32 can overshoot by an ulp.
        for v in out.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Two independent draws of the policy on the same image.
pub fn make_positive_views(
    image: &Array3<f32>,
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
) -> (Array3<f32>, Array3<f32>) {
    let v1 = apply_policy(image, policy, rng);
    let v2 = apply_policy(image, policy, rng);
    (v1, v2)
}
