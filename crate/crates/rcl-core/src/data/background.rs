//! Background providers: ten procedural texture classes (hermetic default)
//! and an STL-10 binary loader for runs against the real source imagery.

use crate::{RclError, Result};
use ndarray::{Array2, Array3};
use rand::{Rng, RngCore};
use std::fs::File;
use std::io::Read;
use std::path::Path;

pub const IMG_SIZE: usize = 64;

/// Supplies 3×64×64 background images with a class label.
pub trait BackgroundProvider: Send + Sync {
    fn classes(&self) -> usize;
    fn sample(&self, rng: &mut dyn RngCore) -> (Array3<f32>, u8);
}

/// Draws one background; errors unless the provider has exactly 10 classes.
pub fn make_background(
    provider: &dyn BackgroundProvider,
    rng: &mut dyn RngCore,
) -> Result<(Array3<f32>, u8)> {
    if provider.classes() != 10 {
        return Err(RclError::Config(format!(
            "background provider must have exactly 10 classes, got {}",
            provider.classes()
        )));
    }
    Ok(provider.sample(rng))
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Ten visually distinct texture families (stripes at several orientations,
/// checkers, blobs, grain, rings, grids, dots), each with a class-specific
/// base hue and per-sample phase/frequency/brightness jitter. Distinct both
/// in color statistics and in spatial pattern, so background class stays
/// recoverable under color jitter.
#[derive(Debug, Clone)]
pub struct ProceduralBackgrounds {
    classes: usize,
}

impl ProceduralBackgrounds {
    pub fn new() -> Self {
        ProceduralBackgrounds { classes: 10 }
    }

    /// Restricted-class provider, used to exercise configuration errors.
    pub fn with_classes(classes: usize) -> Self {
        assert!(classes <= 10);
        ProceduralBackgrounds { classes }
    }

    fn pattern(class: u8, rng: &mut dyn RngCore) -> Array2<f32> {
        let n = IMG_SIZE;
        let nf = n as f32;
        let tau = std::f32::consts::TAU;
        match class {
            0 | 1 | 2 | 8 => {
                // Stripes: horizontal, vertical, diagonal, anti-diagonal.
                let freq = rng.gen_range(3.0..6.0f32);
                let phase = rng.gen_range(0.0..tau);
                Array2::from_shape_fn((n, n), |(i, j)| {
                    let (x, y) = (j as f32 / nf, i as f32 / nf);
                    let u = match class {
                        0 => y,
                        1 => x,
                        2 => (x + y) * std::f32::consts::FRAC_1_SQRT_2,
                        _ => (x - y) * std::f32::consts::FRAC_1_SQRT_2,
                    };
                    0.5 + 0.5 * (tau * freq * u + phase).sin()
                })
            }
            3 => {
                let freq = rng.gen_range(3.0..5.0f32);
                let (ox, oy) = (rng.gen_range(0.0..1.0f32), rng.gen_range(0.0..1.0f32));
                Array2::from_shape_fn((n, n), |(i, j)| {
                    let cx = (j as f32 / nf * freq + ox).floor() as i64;
                    let cy = (i as f32 / nf * freq + oy).floor() as i64;
                    if (cx + cy) % 2 == 0 {
                        0.95
                    } else {
                        0.15
                    }
                })
            }
            4 => {
                // Low-frequency value noise: random 5x5 lattice, bilinear.
                let g = 5usize;
                let lattice: Vec<f32> =
                    (0..g * g).map(|_| rng.gen_range(0.0..1.0)).collect();
                Array2::from_shape_fn((n, n), |(i, j)| {
                    let x = j as f32 / nf * (g - 1) as f32;
                    let y = i as f32 / nf * (g - 1) as f32;
                    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
                    let (fx, fy) = (x - x0 as f32, y - y0 as f32);
                    let (x1, y1) = ((x0 + 1).min(g - 1), (y0 + 1).min(g - 1));
                    let v00 = lattice[y0 * g + x0];
                    let v01 = lattice[y0 * g + x1];
                    let v10 = lattice[y1 * g + x0];
                    let v11 = lattice[y1 * g + x1];
                    (v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy)
                        + (v10 * (1.0 - fx) + v11 * fx) * fy
                })
            }
            5 => Array2::from_shape_fn((n, n), |_| rng.gen_range(0.0..1.0f32)),
            6 => {
                let (cx, cy) = (rng.gen_range(0.2..0.8f32), rng.gen_range(0.2..0.8f32));
                let freq = rng.gen_range(5.0..8.0f32);
                Array2::from_shape_fn((n, n), |(i, j)| {
                    let r = ((j as f32 / nf - cx).powi(2) + (i as f32 / nf - cy).powi(2)).sqrt();
                    0.5 + 0.5 * (tau * freq * r).sin()
                })
            }
            7 => {
                let period = rng.gen_range(8..13usize);
                let (ox, oy) = (rng.gen_range(0..period), rng.gen_range(0..period));
                Array2::from_shape_fn((n, n), |(i, j)| {
                    if (j + ox) % period < 2 || (i + oy) % period < 2 {
                        0.95
                    } else {
                        0.2
                    }
                })
            }
            9 => {
                let period = rng.gen_range(12..17usize);
                let radius = rng.gen_range(3.0..4.5f32);
                let (ox, oy) = (
                    rng.gen_range(0..period) as f32,
                    rng.gen_range(0..period) as f32,
                );
                let pf = period as f32;
                Array2::from_shape_fn((n, n), |(i, j)| {
                    let dx = ((j as f32 + ox).rem_euclid(pf)) - pf / 2.0;
                    let dy = ((i as f32 + oy).rem_euclid(pf)) - pf / 2.0;
                    let d = (dx * dx + dy * dy).sqrt();
                    ((radius - d) + 0.5).clamp(0.1, 0.95)
                })
            }
            _ => panic!("class out of range"),
        }
    }
}

impl Default for ProceduralBackgrounds {
    fn default() -> Self {
        Self::new()
    }
}

impl BackgroundProvider for ProceduralBackgrounds {
    fn classes(&self) -> usize {
        self.classes
    }

    fn sample(&self, rng: &mut dyn RngCore) -> (Array3<f32>, u8) {
        let class = rng.gen_range(0..self.classes) as u8;
        let pattern = Self::pattern(class, rng);
        let hue = class as f32 / 10.0 + rng.gen_range(-0.02..0.02f32);
        let sat = rng.gen_range(0.45..0.65f32);
        let val = rng.gen_range(0.75..0.95f32);
        let base = hsv_to_rgb(hue, sat, val);
        let img = Array3::from_shape_fn((3, IMG_SIZE, IMG_SIZE), |(c, i, j)| {
            (base[c] * (0.3 + 0.7 * pattern[(i, j)])).clamp(0.0, 1.0)
        });
        (img, class)
    }
}

/// STL-10 binary-format provider; crops random 64×64 windows out of the
/// 96×96 source images. Images are stored column-major per channel.
pub struct Stl10Backgrounds {
    images: Vec<Array3<f32>>,
    labels: Vec<u8>,
}

const STL_SIZE: usize = 96;
const STL_BYTES: usize = 3 * STL_SIZE * STL_SIZE;

impl Stl10Backgrounds {
    pub fn load(images_path: &Path, labels_path: &Path) -> Result<Self> {
        let mut raw = Vec::new();
        File::open(images_path)
            .and_then(|mut f| f.read_to_end(&mut raw))
            .map_err(|e| RclError::io(images_path, e))?;
        if raw.is_empty() || raw.len() % STL_BYTES != 0 {
            return Err(RclError::Format(format!(
                "STL-10 image file length {} is not a multiple of {STL_BYTES}",
                raw.len()
            )));
        }
        let mut labels = Vec::new();
        File::open(labels_path)
            .and_then(|mut f| f.read_to_end(&mut labels))
            .map_err(|e| RclError::io(labels_path, e))?;
        let count = raw.len() / STL_BYTES;
        if labels.len() != count {
            return Err(RclError::Format(format!(
                "STL-10 label count {} does not match image count {count}",
                labels.len()
            )));
        }
        // Labels on disk are 1..=10.
        if labels.iter().any(|&l| l < 1 || l > 10) {
            return Err(RclError::Format("STL-10 labels must be in 1..=10".to_string()));
        }
        let images = raw
            .chunks_exact(STL_BYTES)
            .map(|chunk| {
                Array3::from_shape_fn((3, STL_SIZE, STL_SIZE), |(c, i, j)| {
                    // Column-major within each channel plane.
                    chunk[c * STL_SIZE * STL_SIZE + j * STL_SIZE + i] as f32 / 255.0
                })
            })
            .collect();
        Ok(Stl10Backgrounds {
            images,
            labels: labels.iter().map(|&l| l - 1).collect(),
        })
    }
}

impl BackgroundProvider for Stl10Backgrounds {
    fn classes(&self) -> usize {
        10
    }

    fn sample(&self, rng: &mut dyn RngCore) -> (Array3<f32>, u8) {
        let idx = rng.gen_range(0..self.images.len());
        let top = rng.gen_range(0..=STL_SIZE - IMG_SIZE);
        let left = rng.gen_range(0..=STL_SIZE - IMG_SIZE);
        let src = &self.images[idx];
        let crop = Array3::from_shape_fn((3, IMG_SIZE, IMG_SIZE), |(c, i, j)| {
            src[(c, top + i, left + j)]
        });
        (crop, self.labels[idx])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    #[test]
    fn procedural_sample_is_deterministic() {
        let p = ProceduralBackgrounds::new();
        let (a, la) = make_background(&p, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let (b, lb) = make_background(&p, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(la, lb);
        assert!(la <= 9);
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn wrong_class_count_is_config_error() {
        let p = ProceduralBackgrounds::with_classes(3);
        assert!(matches!(
            make_background(&p, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(RclError::Config(_))
        ));
    }

    #[test]
    fn thousand_draws_cover_all_classes_uniformly() {
        let p = ProceduralBackgrounds::new();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut counts = [0usize; 10];
        for _ in 0..1000 {
            let (_, lbl) = make_background(&p, &mut rng).unwrap();
            counts[lbl as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
        // Chi-square against uniform; 99.9th percentile at 9 dof is 27.9.
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - 100.0).powi(2) / 100.0)
            .sum();
        assert!(chi2 < 35.0, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn stl10_fixture_crops_to_64() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("x.bin");
        let lbl_path = dir.path().join("y.bin");
        let mut f = File::create(&img_path).unwrap();
        let img: Vec<u8> = (0..STL_BYTES).map(|i| (i % 251) as u8).collect();
        f.write_all(&img).unwrap();
        let mut f = File::create(&lbl_path).unwrap();
        f.write_all(&[4u8]).unwrap();
        let p = Stl10Backgrounds::load(&img_path, &lbl_path).unwrap();
        assert_eq!(p.classes(), 10);
        let (crop, lbl) = p.sample(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(crop.dim(), (3, 64, 64));
        assert_eq!(lbl, 3);
    }

    #[test]
    fn stl10_truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("x.bin");
        let lbl_path = dir.path().join("y.bin");
        File::create(&img_path)
            .unwrap()
            .write_all(&[0u8; 100])
            .unwrap();
        File::create(&lbl_path).unwrap().write_all(&[1]).unwrap();
        assert!(matches!(
            Stl10Backgrounds::load(&img_path, &lbl_path),
            Err(RclError::Format(_))
        ));
    }
}
