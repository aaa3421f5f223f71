//! Colorful-MNIST shortcut dataset: each 64×64 RGB image carries two
//! independent semantics, a digit composited at a random position and a
//! textured background drawn from one of ten classes.

mod background;
mod digits;
mod idx;
mod io;

pub use background::{
    make_background, BackgroundProvider, ProceduralBackgrounds, Stl10Backgrounds, IMG_SIZE,
};
pub use digits::{DigitSource, MnistDigits, ProceduralDigits, DIGIT_SIZE};
pub use idx::{load_mnist_idx, read_idx_images, read_idx_labels};
pub use io::{read_dataset, read_split, write_dataset, write_split};

use crate::seed::derive_rng;
use crate::{RclError, Result};
use ndarray::{Array2, Array3};
use rand::Rng;

/// One dataset sample. Images are stored channel-first `(3, 64, 64)` with
/// values in `[0, 1]`; the on-disk format is channel-last `u8` (see `io`).
#[derive(Debug, Clone, PartialEq)]
pub struct ColorfulMnistSample {
    pub image: Array3<f32>,
    pub digit_label: u8,
    pub bkgd_label: u8,
}

impl ColorfulMnistSample {
    pub fn validate(&self) -> Result<()> {
        if self.image.dim() != (3, IMG_SIZE, IMG_SIZE) {
            return Err(RclError::Shape(format!(
                "sample image must be (3, 64, 64), got {:?}",
                self.image.dim()
            )));
        }
        if !self.image.iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(RclError::Numeric("pixel values outside [0,1]".to_string()));
        }
        if self.digit_label > 9 || self.bkgd_label > 9 {
            return Err(RclError::Argument("labels must be in 0..=9".to_string()));
        }
        Ok(())
    }
}

/// Split-level metadata persisted alongside the binary samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub count: u32,
    pub mean_pixel: [f32; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<ColorfulMnistSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-channel mean over all pixels of all samples.
    pub fn mean_pixel(&self) -> [f32; 3] {
        let mut acc = [0.0f64; 3];
        let mut count = 0usize;
        for s in &self.samples {
            for c in 0..3 {
                acc[c] += s
                    .image
                    .index_axis(ndarray::Axis(0), c)
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            count += IMG_SIZE * IMG_SIZE;
        }
        [
            (acc[0] / count as f64) as f32,
            (acc[1] / count as f64) as f32,
            (acc[2] / count as f64) as f32,
        ]
    }
}

/// Alpha-composites a grayscale digit as white ink over the background at the
/// given offset: `out = alpha + (1 - alpha) * background`.
pub fn composite_at(
    digit: &Array2<f32>,
    background: &Array3<f32>,
    top: usize,
    left: usize,
) -> Array3<f32> {
    let mut out = background.clone();
    let (dh, dw) = digit.dim();
    for i in 0..dh {
        for j in 0..dw {
            let alpha = digit[(i, j)];
            if alpha > 0.0 {
                for c in 0..3 {
                    let v = &mut out[(c, top + i, left + j)];
                    *v = alpha + (1.0 - alpha) * *v;
                }
            }
        }
    }
    out
}

/// Composites a digit at a uniformly random offset with the 28×28 footprint
/// fully inside the 64×64 frame.
pub fn synthesize_sample(
    digit_img: &Array2<f32>,
    digit_label: u8,
    bkgd_img: &Array3<f32>,
    bkgd_label: u8,
    rng: &mut impl Rng,
) -> ColorfulMnistSample {
    assert_eq!(digit_img.dim(), (DIGIT_SIZE, DIGIT_SIZE), "digit must be 28x28");
    assert_eq!(bkgd_img.dim(), (3, IMG_SIZE, IMG_SIZE), "background must be 3x64x64");
    let top = rng.gen_range(0..=IMG_SIZE - DIGIT_SIZE);
    let left = rng.gen_range(0..=IMG_SIZE - DIGIT_SIZE);
    ColorfulMnistSample {
        image: composite_at(digit_img, bkgd_img, top, left),
        digit_label,
        bkgd_label,
    }
}

/// Snaps every pixel to the u8 grid used by the on-disk format, making
/// serialization an exact bijection for synthesized data.
fn quantize(img: &mut Array3<f32>) {
    for v in img.iter_mut() {
        *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
    }
}

/// Synthesizes train and test splits. Digit and background are drawn
/// independently per sample from generators derived from `(seed, split,
/// index)`, so the result is reproducible and order-independent.
pub fn synthesize_dataset(
    n_train: usize,
    n_test: usize,
    seed: u64,
    backgrounds: &dyn BackgroundProvider,
    digits: &dyn DigitSource,
) -> Result<(Dataset, Dataset, DatasetMeta)> {
    if n_train < 1 || n_test < 1 {
        return Err(RclError::Argument(
            "n_train and n_test must be at least 1".to_string(),
        ));
    }
    let synth_split = |split_tag: u64, n: usize| -> Result<Dataset> {
        let mut samples = Vec::with_capacity(n);
        for idx in 0..n {
            let mut rng = derive_rng(&[seed, split_tag, idx as u64]);
            let (digit_img, digit_label) = digits.sample(&mut rng);
            let (bkgd_img, bkgd_label) = make_background(backgrounds, &mut rng)?;
            let mut sample =
                synthesize_sample(&digit_img, digit_label, &bkgd_img, bkgd_label, &mut rng);
            quantize(&mut sample.image);
            samples.push(sample);
        }
        Ok(Dataset { samples })
    };
    let train = synth_split(0, n_train)?;
    let test = synth_split(1, n_test)?;
    let meta = DatasetMeta {
        count: n_train as u32,
        mean_pixel: train.mean_pixel(),
        seed,
    };
    Ok((train, test, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat_bg(v: f32) -> Array3<f32> {
        Array3::from_elem((3, IMG_SIZE, IMG_SIZE), v)
    }

    #[test]
    fn zero_digit_leaves_background_untouched() {
        let digit = Array2::zeros((DIGIT_SIZE, DIGIT_SIZE));
        let bg = flat_bg(0.3);
        let out = composite_at(&digit, &bg, 10, 20);
        assert_eq!(out, bg);
    }

    #[test]
    fn full_alpha_digit_paints_white() {
        let digit = Array2::from_elem((DIGIT_SIZE, DIGIT_SIZE), 1.0);
        let bg = flat_bg(0.25);
        let out = composite_at(&digit, &bg, 0, 0);
        for c in 0..3 {
            for i in 0..DIGIT_SIZE {
                for j in 0..DIGIT_SIZE {
                    assert_eq!(out[(c, i, j)], 1.0);
                }
            }
        }
        // Outside the footprint the background is exactly preserved.
        assert_eq!(out[(0, 0, DIGIT_SIZE)], 0.25);
        assert_eq!(out[(2, 63, 63)], 0.25);
    }

    #[test]
    fn background_recoverable_outside_footprint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let digits = ProceduralDigits;
        let bgs = ProceduralBackgrounds::new();
        let (digit, dl) = digits.sample(&mut rng);
        let (bg, bl) = make_background(&bgs, &mut rng).unwrap();
        // Fixed offset so we know the footprint.
        let out = composite_at(&digit, &bg, 7, 11);
        let sample = ColorfulMnistSample {
            image: out.clone(),
            digit_label: dl,
            bkgd_label: bl,
        };
        sample.validate().unwrap();
        for c in 0..3 {
            for i in 0..IMG_SIZE {
                for j in 0..IMG_SIZE {
                    let inside = (7..7 + DIGIT_SIZE).contains(&i) && (11..11 + DIGIT_SIZE).contains(&j);
                    if !inside {
                        assert_eq!(out[(c, i, j)], bg[(c, i, j)]);
                    }
                }
            }
        }
    }

    #[test]
    fn dataset_counts_and_digit_coverage() {
        let (train, test, meta) = synthesize_dataset(
            100,
            20,
            1,
            &ProceduralBackgrounds::new(),
            &ProceduralDigits,
        )
        .unwrap();
        assert_eq!(train.len(), 100);
        assert_eq!(test.len(), 20);
        assert_eq!(meta.count, 100);
        let mut digit_classes = std::collections::HashSet::new();
        for s in train.samples.iter().chain(test.samples.iter()) {
            s.validate().unwrap();
            digit_classes.insert(s.digit_label);
        }
        assert!(digit_classes.len() >= 8, "{digit_classes:?}");
    }

    #[test]
    fn dataset_deterministic_under_seed() {
        let rerun = || {
            synthesize_dataset(8, 3, 42, &ProceduralBackgrounds::new(), &ProceduralDigits)
                .unwrap()
        };
        let (a_train, a_test, a_meta) = rerun();
        let (b_train, b_test, b_meta) = rerun();
        assert_eq!(a_meta, b_meta);
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
    }

    #[test]
    fn single_sample_mean_is_its_channel_mean() {
        let (train, _, meta) =
            synthesize_dataset(1, 1, 9, &ProceduralBackgrounds::new(), &ProceduralDigits)
                .unwrap();
        let img = &train.samples[0].image;
        for c in 0..3 {
            let mean = img
                .index_axis(ndarray::Axis(0), c)
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>()
                / (IMG_SIZE * IMG_SIZE) as f64;
            assert!((mean as f32 - meta.mean_pixel[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn recomputed_mean_matches_meta() {
        let (train, _, meta) =
            synthesize_dataset(20, 2, 3, &ProceduralBackgrounds::new(), &ProceduralDigits)
                .unwrap();
        let mean = train.mean_pixel();
        for c in 0..3 {
            assert!((mean[c] - meta.mean_pixel[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn labels_are_statistically_independent() {
        // Joint label distribution vs product of marginals, in total
        // variation, over a large seeded sample. Synthesized in slabs so the
        // images can be dropped as we go.
        let mut joint = [[0u32; 10]; 10];
        let mut total = 0u32;
        for slab in 0..6u64 {
            let (train, test, _) = synthesize_dataset(
                9_000,
                1_000,
                1000 + slab,
                &ProceduralBackgrounds::new(),
                &ProceduralDigits,
            )
            .unwrap();
            for s in train.samples.iter().chain(test.samples.iter()) {
                joint[s.digit_label as usize][s.bkgd_label as usize] += 1;
                total += 1;
            }
        }
        assert_eq!(total, 60_000);
        let mut digit_marginal = [0.0f64; 10];
        let mut bkgd_marginal = [0.0f64; 10];
        for d in 0..10 {
            for b in 0..10 {
                let p = joint[d][b] as f64 / total as f64;
                digit_marginal[d] += p;
                bkgd_marginal[b] += p;
            }
        }
        let mut tv = 0.0f64;
        for d in 0..10 {
            for b in 0..10 {
                let p = joint[d][b] as f64 / total as f64;
                tv += (p - digit_marginal[d] * bkgd_marginal[b]).abs();
            }
        }
        tv *= 0.5;
        assert!(tv <= 0.02, "total variation {tv}");
    }
}
