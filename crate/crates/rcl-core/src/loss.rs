//! Reconstruction and contrastive losses with analytic gradients.
//!
//! The contrastive loss is the symmetric NT-Xent form of InfoNCE: embeddings
//! arrive as `2N` rows ordered as view pairs `(2i, 2i+1)`, every row serves
//! once as anchor, and all other rows in the batch act as candidates.

use crate::nn::{c, Elem};
use crate::{RclError, Result};
use ndarray::{Array2, ArrayD, ArrayView1};

/// Weights and temperature of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.1,
            lambda1: 20.0,
            lambda2: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(RclError::Config(format!(
                "loss.temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(RclError::Config(
                "loss weights must be nonnegative".to_string(),
            ));
        }
        Ok(())
    }
}

const NORM_EPS: f64 = 1e-12;

/// Cosine similarity between two equal-length vectors, in `[-1, 1]`.
pub fn cosine_similarity<F: Elem>(u: ArrayView1<F>, v: ArrayView1<F>) -> Result<F> {
    if u.len() != v.len() {
        return Err(RclError::Shape(format!(
            "cosine_similarity length mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let eps: F = c(NORM_EPS);
    let nu = u.iter().map(|&a| a * a).sum::<F>().sqrt().max(eps);
    let nv = v.iter().map(|&a| a * a).sum::<F>().sqrt().max(eps);
    let dot: F = u.iter().zip(v.iter()).map(|(&a, &b)| a * b).sum();
    Ok((dot / (nu * nv)).min(F::one()).max(-F::one()))
}

/// Mean over all elements of the squared difference.
pub fn reconstruction_loss<F: Elem>(recon: &ArrayD<F>, target: &ArrayD<F>) -> Result<F> {
    if recon.shape() != target.shape() {
        return Err(RclError::Shape(format!(
            "reconstruction_loss shape mismatch: {:?} vs {:?}",
            recon.shape(),
            target.shape()
        )));
    }
    let n = recon.len();
    let sum: F = recon
        .iter()
        .zip(target.iter())
        .map(|(&r, &t)| (r - t) * (r - t))
        .sum();
    Ok(sum / c(n as f64))
}

/// Reconstruction loss together with its gradient w.r.t. the reconstruction.
pub fn reconstruction_loss_grad<F: Elem>(
    recon: &ArrayD<F>,
    target: &ArrayD<F>,
) -> Result<(F, ArrayD<F>)> {
    let loss = reconstruction_loss(recon, target)?;
    let scale: F = c(2.0 / recon.len() as f64);
    let mut grad = recon.clone();
    for (g, &t) in grad.iter_mut().zip(target.iter()) {
        *g = (*g - t) * scale;
    }
    Ok((loss, grad))
}

fn check_pairs<F: Elem>(z: &Array2<F>) -> Result<usize> {
    let rows = z.nrows();
    if rows < 2 || rows % 2 != 0 {
        return Err(RclError::Shape(format!(
            "info_nce expects an even number of rows >= 2, got {rows}"
        )));
    }
    for (i, row) in z.rows().into_iter().enumerate() {
        let n: F = row.iter().map(|&v| v * v).sum::<F>().sqrt();
        if (n - F::one()).abs() > c(1e-4) {
            return Err(RclError::Argument(format!(
                "info_nce row {i} is not unit norm (|z| = {n})"
            )));
        }
    }
    Ok(rows)
}

/// NT-Xent InfoNCE over `2N` unit-norm embeddings ordered as view pairs.
pub fn info_nce<F: Elem>(z: &Array2<F>, temperature: F) -> Result<F> {
    Ok(info_nce_with_grad_impl(z, temperature, false)?.0)
}

/// InfoNCE loss and its gradient with respect to the embeddings.
pub fn info_nce_with_grad<F: Elem>(z: &Array2<F>, temperature: F) -> Result<(F, Array2<F>)> {
    let (loss, grad) = info_nce_with_grad_impl(z, temperature, true)?;
    Ok((loss, grad.expect("grad requested")))
}

fn info_nce_with_grad_impl<F: Elem>(
    z: &Array2<F>,
    temperature: F,
    want_grad: bool,
) -> Result<(F, Option<Array2<F>>)> {
    if temperature <= F::zero() {
        return Err(RclError::Config("temperature must be positive".to_string()));
    }
    let rows = check_pairs(z)?;
    let dim = z.ncols();
    let eps: F = c(NORM_EPS);

    // Inputs are contractually unit norm but we renormalize so that the loss
    // (and hence its gradient) is exactly the cosine-similarity form.
    let mut norms = vec![F::zero(); rows];
    let mut unit = z.clone();
    for (i, mut row) in unit.rows_mut().into_iter().enumerate() {
        let n: F = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(eps);
        norms[i] = n;
        row.mapv_inplace(|v| v / n);
    }

    let mut sim = Array2::<F>::zeros((rows, rows));
    ndarray::linalg::general_mat_mul(F::one(), &unit, &unit.t(), F::zero(), &mut sim);

    let inv_count: F = F::one() / c(rows as f64);
    let mut loss = F::zero();
    // Row-softmax over candidates k != a at the given temperature.
    let mut softmax = Array2::<F>::zeros((rows, rows));
    for a in 0..rows {
        let partner = a ^ 1;
        let mut max_l = F::neg_infinity();
        for k in 0..rows {
            if k != a {
                let l = sim[(a, k)] / temperature;
                if l > max_l {
                    max_l = l;
                }
            }
        }
        let mut den = F::zero();
        for k in 0..rows {
            if k != a {
                let e = ((sim[(a, k)] / temperature) - max_l).exp();
                softmax[(a, k)] = e;
                den = den + e;
            }
        }
        for k in 0..rows {
            if k != a {
                softmax[(a, k)] = softmax[(a, k)] / den;
            }
        }
        let lse = max_l + den.ln();
        loss = loss + (lse - sim[(a, partner)] / temperature);
    }
    loss = loss * inv_count;

    if !want_grad {
        return Ok((loss, None));
    }

    // dL/dsim[a][b] for b != a, symmetrized since sim[a][b] == sim[b][a].
    let coef = inv_count / temperature;
    let mut dsim = Array2::<F>::zeros((rows, rows));
    for a in 0..rows {
        let partner = a ^ 1;
        for b in 0..rows {
            if b == a {
                continue;
            }
            let mut v = softmax[(a, b)];
            if b == partner {
                v = v - F::one();
            }
            dsim[(a, b)] = dsim[(a, b)] + v * coef;
            dsim[(b, a)] = dsim[(b, a)] + v * coef;
        }
    }

    // Chain through the per-row normalization: for unit rows u_a = z_a/|z_a|,
    //   d sim[a][b] / d z_a = (u_b - sim[a][b] u_a) / |z_a|.
    let mut grad = Array2::<F>::zeros((rows, dim));
    ndarray::linalg::general_mat_mul(F::one(), &dsim, &unit, F::zero(), &mut grad);
    for a in 0..rows {
        let radial: F = (0..rows)
            .map(|b| dsim[(a, b)] * sim[(a, b)])
            .sum();
        let ua = unit.row(a);
        let inv_n = F::one() / norms[a];
        let mut row = grad.row_mut(a);
        for (g, &u) in row.iter_mut().zip(ua.iter()) {
            *g = (*g - radial * u) * inv_n;
        }
    }
    Ok((loss, Some(grad)))
}

/// Weighted sum of the two branch losses.
pub fn combined_loss(loss_recon: f64, loss_contrast: f64, cfg: &LossConfig) -> f64 {
    cfg.lambda1 * loss_recon + cfg.lambda2 * loss_contrast
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<F: Elem>(
    logits: &Array2<F>,
    labels: &[u8],
) -> Result<(F, Array2<F>)> {
    if logits.nrows() != labels.len() {
        return Err(RclError::Shape(format!(
            "cross entropy batch mismatch: {} logits rows vs {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let n = logits.nrows();
    let classes = logits.ncols();
    let inv_n: F = c(1.0 / n as f64);
    let mut grad = Array2::<F>::zeros((n, classes));
    let mut loss = F::zero();
    for (i, row) in logits.rows().into_iter().enumerate() {
        let label = labels[i] as usize;
        if label >= classes {
            return Err(RclError::Argument(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let max_l = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut den = F::zero();
        for &v in row.iter() {
            den = den + (v - max_l).exp();
        }
        let lse = max_l + den.ln();
        loss = loss + (lse - row[label]);
        let mut grow = grad.row_mut(i);
        for (k, g) in grow.iter_mut().enumerate() {
            let p = (row[k] - lse).exp();
            *g = (p - if k == label { F::one() } else { F::zero() }) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent InfoNCE oracle: explicit double loop over anchors and
    /// candidates, naive cosine similarities, no shared code with the
    /// implementation above.
    pub(crate) fn brute_force_info_nce(z: &Array2<f64>, t: f64) -> f64 {
        let rows = z.nrows();
        let sim = |a: usize, b: usize| -> f64 {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for j in 0..z.ncols() {
                dot += z[(a, j)] * z[(b, j)];
                na += z[(a, j)] * z[(a, j)];
                nb += z[(b, j)] * z[(b, j)];
            }
            dot / (na.sqrt() * nb.sqrt())
        };
        let mut total = 0.0;
        for a in 0..rows {
            let p = if a % 2 == 0 { a + 1 } else { a - 1 };
            let num = (sim(a, p) / t).exp();
            let mut den = 0.0;
            for k in 0..rows {
                if k != a {
                    den += (sim(a, k) / t).exp();
                }
            }
            total += -(num / den).ln();
        }
        total / rows as f64
    }

    pub(crate) fn random_unit_rows(rows: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = Array2::from_shape_fn((rows, dim), |_| rng.gen_range(-1.0..1.0));
        for mut row in z.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.mapv_inplace(|v| v / n);
        }
        z
    }

    #[test]
    fn cosine_basics() {
        let u = arr1(&[1.0f64, 0.0]);
        let v = arr1(&[0.0f64, 1.0]);
        assert_eq!(cosine_similarity(u.view(), u.view()).unwrap(), 1.0);
        assert_eq!(cosine_similarity(u.view(), v.view()).unwrap(), 0.0);
        let w = arr1(&[1.0f64, 1.0]);
        let s = cosine_similarity(w.view(), u.view()).unwrap();
        assert!((s - 0.70710678).abs() < 1e-8);
        let neg = w.mapv(|v| -v);
        assert!((cosine_similarity(w.view(), neg.view()).unwrap() + 1.0).abs() < 1e-12);
        let bad = arr1(&[1.0f64, 2.0, 3.0]);
        assert!(matches!(
            cosine_similarity(u.view(), bad.view()),
            Err(RclError::Shape(_))
        ));
    }

    #[test]
    fn reconstruction_loss_basics() {
        let a = arr2(&[[0.0f64, 0.0], [0.0, 0.0]]).into_dyn();
        let b = arr2(&[[1.0f64, 1.0], [1.0, 1.0]]).into_dyn();
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&b, &a).unwrap(), 1.0);
        let c = arr2(&[[1.0f64, 1.0, 1.0]]).into_dyn();
        assert!(matches!(
            reconstruction_loss(&a, &c),
            Err(RclError::Shape(_))
        ));
    }

    #[test]
    fn reconstruction_loss_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = ndarray::Array3::from_shape_fn((2, 2, 3), |_| rng.gen_range(-1.0..1.0)).into_dyn();
        let t = ndarray::Array3::from_shape_fn((2, 2, 3), |_| rng.gen_range(-1.0..1.0)).into_dyn();
        let got: f64 = reconstruction_loss(&r, &t).unwrap();
        let mut acc = 0.0;
        let mut count = 0usize;
        for (a, b) in r.iter().zip(t.iter()) {
            acc += (a - b) * (a - b);
            count += 1;
        }
        assert!((got - acc / count as f64).abs() < 1e-12);
    }

    #[test]
    fn info_nce_identical_rows_closed_form() {
        for &n_pairs in &[1usize, 2, 8] {
            let mut z = Array2::<f64>::zeros((2 * n_pairs, 4));
            for mut row in z.rows_mut() {
                row[0] = 1.0;
            }
            for &t in &[0.1, 0.5, 1.0] {
                let loss = info_nce(&z, t).unwrap();
                let expected = ((2 * n_pairs - 1) as f64).ln();
                assert!(
                    (loss - expected).abs() < 1e-10,
                    "n={n_pairs} t={t}: {loss} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn info_nce_single_pair_is_zero() {
        let z = arr2(&[[1.0f64, 0.0], [0.0, 1.0]]);
        assert!(info_nce(&z, 0.3).unwrap().abs() < 1e-12);
    }

    #[test]
    fn info_nce_axis_pairs_match_brute_force() {
        let z = arr2(&[[1.0f64, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]);
        let got = info_nce(&z, 1.0).unwrap();
        let expected = brute_force_info_nce(&z, 1.0);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn info_nce_matches_brute_force_random() {
        for seed in 0..20u64 {
            let n_pairs = 1 + (seed as usize % 8);
            let dim = 2 + (seed as usize % 7);
            let z = random_unit_rows(2 * n_pairs, dim, seed);
            for &t in &[0.1, 0.7] {
                let got = info_nce(&z, t).unwrap();
                let expected = brute_force_info_nce(&z, t);
                assert!(
                    (got - expected).abs() < 1e-10,
                    "seed={seed} t={t}: {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn info_nce_rejects_non_unit_rows() {
        let z = arr2(&[[2.0f64, 0.0], [1.0, 0.0]]);
        assert!(matches!(info_nce(&z, 0.1), Err(RclError::Argument(_))));
    }

    #[test]
    fn info_nce_rotation_invariant() {
        // Random rotation in the plane of each coordinate pair preserves all
        // cosine similarities, so the loss must not change.
        let z = random_unit_rows(8, 4, 33);
        let theta: f64 = 0.7391;
        let mut rot = ndarray::Array2::<f64>::eye(4);
        rot[(0, 0)] = theta.cos();
        rot[(0, 2)] = -theta.sin();
        rot[(2, 0)] = theta.sin();
        rot[(2, 2)] = theta.cos();
        let zr = z.dot(&rot);
        let a = info_nce(&z, 0.2).unwrap();
        let b = info_nce(&zr, 0.2).unwrap();
        assert!((a - b).abs() < 1e-8);
    }

    #[test]
    fn info_nce_decreases_when_positive_similarity_rises() {
        // Pull one anchor toward its positive along the sphere and check the
        // loss drops (directional finite difference).
        let mut z = random_unit_rows(8, 4, 5);
        let before = info_nce(&z, 0.2).unwrap();
        let pos = z.row(1).to_owned();
        let mut row0 = z.row(0).to_owned();
        row0 = &row0 * 0.9 + &pos * 0.1;
        let n = row0.iter().map(|v| v * v).sum::<f64>().sqrt();
        row0.mapv_inplace(|v| v / n);
        z.row_mut(0).assign(&row0);
        let after = info_nce(&z, 0.2).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn info_nce_gradient_matches_finite_differences() {
        let z = random_unit_rows(6, 5, 11);
        let t = 0.37;
        let (_, grad) = info_nce_with_grad(&z, t).unwrap();
        let h = 1e-6;
        for i in 0..z.nrows() {
            for j in 0..z.ncols() {
                let mut zp = z.clone();
                zp[(i, j)] += h;
                let mut zm = z.clone();
                zm[(i, j)] -= h;
                let fd = (info_nce(&zp, t).unwrap() - info_nce(&zm, t).unwrap()) / (2.0 * h);
                let g = grad[(i, j)];
                let denom = fd.abs().max(1e-8);
                assert!(
                    (g - fd).abs() / denom < 1e-4,
                    "grad[{i},{j}] = {g} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn combined_loss_is_linear() {
        let cfg = LossConfig {
            temperature: 0.1,
            lambda1: 10.0,
            lambda2: 1.0,
        };
        assert_eq!(combined_loss(0.5, 2.0, &cfg), 10.0 * 0.5 + 2.0);
        let rf = LossConfig {
            lambda1: 100.0,
            ..cfg
        };
        assert_eq!(combined_loss(0.25, 3.0, &rf), 100.0 * 0.25 + 3.0);
        let pure_contrast = LossConfig {
            lambda1: 0.0,
            ..cfg
        };
        assert_eq!(combined_loss(123.0, 3.0, &pure_contrast), 3.0);
        let pure_recon = LossConfig {
            lambda2: 0.0,
            ..cfg
        };
        assert_eq!(combined_loss(0.5, 99.0, &pure_recon), 5.0);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-2.0..2.0f64));
        let labels = [0u8, 3, 2, 4];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..5 {
                let mut lp = logits.clone();
                lp[(i, j)] += h;
                let mut lm = logits.clone();
                lm[(i, j)] -= h;
                let fd = (softmax_cross_entropy(&lp, &labels).unwrap().0
                    - softmax_cross_entropy(&lm, &labels).unwrap().0)
                    / (2.0 * h);
                assert!((grad[(i, j)] - fd).abs() < 1e-7);
            }
        }
    }
}
