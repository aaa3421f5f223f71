//! Linear-probe and fine-tuning evaluation on the digit and background
//! tasks, plus feature export.
//!
//! Probes read the encoder feature (pre-projection-head). Fixed-mode fitting
//! is full-batch gradient descent on internally standardized features with an
//! early stop on training-loss plateau; the standardization is folded into
//! the stored probe weights afterwards, so the persisted probe is a plain
//! linear map over raw features.

use crate::data::Dataset;
use crate::loss::softmax_cross_entropy;
use crate::model::{ModelState, ProbeTask};
use crate::nn::GradBuf;
use crate::seed::derive_rng;
use crate::train::{Optimizer, OptimizerConfig};
use crate::{RclError, Result};
use ndarray::{Array1, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use std::io::{Read, Write};
use std::path::Path;

/// Frozen backbone vs joint training of backbone and classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Fixed,
    Finetune,
}

impl EvalMode {
    pub fn name(&self) -> &'static str {
        match self {
            EvalMode::Fixed => "fixed",
            EvalMode::Finetune => "finetune",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = RclError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(EvalMode::Fixed),
            "finetune" => Ok(EvalMode::Finetune),
            other => Err(RclError::Argument(format!("unknown eval mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub task: ProbeTask,
    pub mode: EvalMode,
    pub top1_accuracy: f64,
    pub n_eval: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub lr: f64,
    pub momentum: f64,
    pub max_iters: usize,
    pub plateau_patience: usize,
    pub plateau_tol: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_batch: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 0.5,
            momentum: 0.9,
            max_iters: 500,
            plateau_patience: 10,
            plateau_tol: 1e-6,
            finetune_epochs: 5,
            finetune_lr: 0.01,
            finetune_batch: 128,
            seed: 0,
        }
    }
}

const EXTRACT_BATCH: usize = 256;

/// Encoder features plus both label columns for a whole split.
pub fn extract_features(
    state: &ModelState,
    split: &Dataset,
) -> Result<(Array2<f32>, Vec<u8>, Vec<u8>)> {
    if split.is_empty() {
        return Err(RclError::Argument("split is empty".to_string()));
    }
    let dim = state.config.probe_dim();
    let mut feats = Array2::<f32>::zeros((split.len(), dim));
    for (start, chunk) in split.samples.chunks(EXTRACT_BATCH).enumerate().map(|(i, c)| (i * EXTRACT_BATCH, c)) {
        let (c, h, w) = chunk[0].image.dim();
        let mut batch = Array4::zeros((chunk.len(), c, h, w));
        for (i, s) in chunk.iter().enumerate() {
            batch.index_axis_mut(Axis(0), i).assign(&s.image);
        }
        let f = state.forward_features(&batch)?;
        feats
            .slice_mut(ndarray::s![start..start + chunk.len(), ..])
            .assign(&f);
    }
    let digits = split.samples.iter().map(|s| s.digit_label).collect();
    let bkgds = split.samples.iter().map(|s| s.bkgd_label).collect();
    Ok((feats, digits, bkgds))
}

/// Full-batch softmax regression on standardized features. Returns the
/// classifier folded back onto raw features: `logits = f W^T + b`.
pub fn fit_softmax_probe(
    features: &Array2<f32>,
    labels: &[u8],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<(Array2<f32>, Array1<f32>)> {
    if features.nrows() != labels.len() || features.nrows() == 0 {
        return Err(RclError::Argument(format!(
            "probe fitting needs matching nonempty features/labels, got {}x{}",
            features.nrows(),
            labels.len()
        )));
    }
    let n = features.nrows();
    let d = features.ncols();
    let mu = features.mean_axis(Axis(0)).expect("nonempty");
    let mut sigma = Array1::<f32>::zeros(d);
    for j in 0..d {
        let col = features.column(j);
        let var = col.iter().map(|&v| (v - mu[j]).powi(2)).sum::<f32>() / n as f32;
        sigma[j] = var.sqrt().max(1e-6);
    }
    let mut std_feats = features.clone();
    for mut row in std_feats.rows_mut() {
        for j in 0..d {
            row[j] = (row[j] - mu[j]) / sigma[j];
        }
    }

    let mut lr = cfg.lr as f32;
    'restart: loop {
        let mut w = Array2::<f32>::zeros((classes, d));
        let mut b = Array1::<f32>::zeros(classes);
        let mut vw = Array2::<f32>::zeros((classes, d));
        let mut vb = Array1::<f32>::zeros(classes);
        let momentum = cfg.momentum as f32;
        let mut best = f64::INFINITY;
        let mut stale = 0usize;
        for _ in 0..cfg.max_iters {
            let mut logits = Array2::<f32>::zeros((n, classes));
            ndarray::linalg::general_mat_mul(1.0, &std_feats, &w.t(), 0.0, &mut logits);
            for mut row in logits.rows_mut() {
                row += &b;
            }
            let (loss, gl) = softmax_cross_entropy(&logits, labels)?;
            if !loss.is_finite() {
                lr *= 0.5;
                if lr < 1e-4 {
                    return Err(RclError::Numeric("probe fitting diverged".to_string()));
                }
                continue 'restart;
            }
            let loss = loss as f64;
            if loss < best - cfg.plateau_tol {
                best = loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.plateau_patience {
                    break;
                }
            }
            let mut gw = Array2::<f32>::zeros((classes, d));
            ndarray::linalg::general_mat_mul(1.0, &gl.t(), &std_feats, 0.0, &mut gw);
            let gb = gl.sum_axis(Axis(0));
            vw.zip_mut_with(&gw, |v, &g| *v = momentum * *v + g);
            vb.zip_mut_with(&gb, |v, &g| *v = momentum * *v + g);
            w.scaled_add(-lr, &vw);
            b.scaled_add(-lr, &vb);
        }
        // Fold standardization: logits = W ((f - mu) / sigma) + b.
        let mut w_raw = w.clone();
        let mut b_raw = b.clone();
        for k in 0..classes {
            for j in 0..d {
                w_raw[(k, j)] = w[(k, j)] / sigma[j];
                b_raw[k] -= w[(k, j)] * mu[j] / sigma[j];
            }
        }
        return Ok((w_raw, b_raw));
    }
}

fn labels_for<'a>(task: ProbeTask, digits: &'a [u8], bkgds: &'a [u8]) -> &'a [u8] {
    match task {
        ProbeTask::Digit => digits,
        ProbeTask::Background => bkgds,
    }
}

fn probe_range(state: &ModelState, task: ProbeTask) -> std::ops::Range<usize> {
    match task {
        ProbeTask::Digit => state.ranges.probe_digit.clone(),
        ProbeTask::Background => state.ranges.probe_bkgd.clone(),
    }
}

fn write_probe_params(state: &mut ModelState, task: ProbeTask, w: &Array2<f32>, b: &Array1<f32>) {
    let range = probe_range(state, task);
    let data = &mut state.params.data_mut()[range];
    let wlen = w.len();
    data[..wlen].copy_from_slice(w.as_slice().expect("contiguous"));
    data[wlen..].copy_from_slice(b.as_slice().expect("contiguous"));
}

/// Fits the probe head for a task. Fixed mode trains only the classifier and
/// leaves every backbone parameter bit-identical; finetune jointly updates
/// the encoder and the classifier with mini-batch SGD.
pub fn fit_linear_probe(
    state: &mut ModelState,
    train: &Dataset,
    task: ProbeTask,
    mode: EvalMode,
    cfg: &ProbeConfig,
) -> Result<()> {
    match mode {
        EvalMode::Fixed => {
            let (feats, digits, bkgds) = extract_features(state, train)?;
            let labels = labels_for(task, &digits, &bkgds);
            let (w, b) = fit_softmax_probe(&feats, labels, state.config.num_classes, cfg)?;
            write_probe_params(state, task, &w, &b);
            Ok(())
        }
        EvalMode::Finetune => {
            // Start from a fixed-mode fit so the classifier is sane, then
            // joint SGD over encoder + probe.
            fit_linear_probe(state, train, task, EvalMode::Fixed, cfg)?;
            let mut optimizer = Optimizer::new(
                OptimizerConfig {
                    lr: cfg.finetune_lr,
                    weight_decay: 0.0,
                    momentum: 0.9,
                    decay_epochs: vec![],
                    ..OptimizerConfig::default()
                },
                state.params.len(),
            );
            let probe_net = match task {
                ProbeTask::Digit => state.probe_digit.clone(),
                ProbeTask::Background => state.probe_bkgd.clone(),
            };
            let active = vec![state.ranges.encoder.clone(), probe_range(state, task)];
            for epoch in 0..cfg.finetune_epochs {
                let mut order: Vec<usize> = (0..train.len()).collect();
                let mut rng = derive_rng(&[cfg.seed, epoch as u64, 0xf17e]);
                order.shuffle(&mut rng);
                for batch_idx in order.chunks(cfg.finetune_batch) {
                    let (c, h, w) = train.samples[0].image.dim();
                    let mut batch = Array4::zeros((batch_idx.len(), c, h, w));
                    let mut labels = Vec::with_capacity(batch_idx.len());
                    for (i, &idx) in batch_idx.iter().enumerate() {
                        batch
                            .index_axis_mut(Axis(0), i)
                            .assign(&train.samples[idx].image);
                        labels.push(match task {
                            ProbeTask::Digit => train.samples[idx].digit_label,
                            ProbeTask::Background => train.samples[idx].bkgd_label,
                        });
                    }
                    let mut grads = GradBuf::zeros_like(&state.params);
                    let (feats, enc_caches) = state
                        .encoder
                        .forward_cached(&state.params, batch.into_dyn());
                    let (logits, probe_caches) =
                        probe_net.forward_cached(&state.params, feats.clone());
                    let logits2 = logits
                        .into_dimensionality::<ndarray::Ix2>()
                        .expect("logits 2-d");
                    let (_, gl) = softmax_cross_entropy(&logits2, &labels)?;
                    let gf =
                        probe_net.backward(&state.params, &probe_caches, gl.into_dyn(), &mut grads);
                    let _ = state
                        .encoder
                        .backward(&state.params, &enc_caches, gf, &mut grads);
                    optimizer.step(
                        state.params.data_mut(),
                        grads.data(),
                        cfg.finetune_lr,
                        &active,
                    );
                }
            }
            Ok(())
        }
    }
}

/// Exact top-1 accuracy of the stored probe on a split.
pub fn evaluate_accuracy(
    state: &ModelState,
    split: &Dataset,
    task: ProbeTask,
    mode: EvalMode,
) -> Result<ProbeResult> {
    let (feats, digits, bkgds) = extract_features(state, split)?;
    let labels = labels_for(task, &digits, &bkgds);
    let logits = state.forward_probe(task, &feats);
    let mut correct = 0usize;
    for (row, &label) in logits.rows().into_iter().zip(labels.iter()) {
        let mut best = 0usize;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if best == label as usize {
            correct += 1;
        }
    }
    Ok(ProbeResult {
        task,
        mode,
        top1_accuracy: correct as f64 / labels.len() as f64,
        n_eval: labels.len(),
    })
}

const FEAT_MAGIC: &[u8; 4] = b"FEAT";

/// Writes one float32 feature row per sample plus both labels.
pub fn export_features(state: &ModelState, split: &Dataset, path: &Path) -> Result<()> {
    let (feats, digits, bkgds) = extract_features(state, split)?;
    let file = std::fs::File::create(path).map_err(|e| RclError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let werr = |e| RclError::io(path, e);
    w.write_all(FEAT_MAGIC).map_err(werr)?;
    w.write_all(&(feats.nrows() as u32).to_le_bytes()).map_err(werr)?;
    w.write_all(&(feats.ncols() as u32).to_le_bytes()).map_err(werr)?;
    for (i, row) in feats.rows().into_iter().enumerate() {
        for &v in row.iter() {
            w.write_all(&v.to_le_bytes()).map_err(werr)?;
        }
        w.write_all(&[digits[i], bkgds[i]]).map_err(werr)?;
    }
    w.flush().map_err(werr)
}

/// Reads a feature export back; inverse of [`export_features`].
pub fn read_features(path: &Path) -> Result<(Array2<f32>, Vec<u8>, Vec<u8>)> {
    let file = std::fs::File::open(path).map_err(|e| RclError::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| RclError::io(path, e))?;
    if &magic != FEAT_MAGIC {
        return Err(RclError::Format("bad feature export magic".to_string()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|e| RclError::io(path, e))?;
    let count = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf).map_err(|e| RclError::io(path, e))?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    let mut feats = Array2::<f32>::zeros((count, dim));
    let mut digits = vec![0u8; count];
    let mut bkgds = vec![0u8; count];
    let mut lbl = [0u8; 2];
    for i in 0..count {
        for j in 0..dim {
            r.read_exact(&mut u32buf).map_err(|e| RclError::io(path, e))?;
            feats[(i, j)] = f32::from_le_bytes(u32buf);
        }
        r.read_exact(&mut lbl).map_err(|e| RclError::io(path, e))?;
        digits[i] = lbl[0];
        bkgds[i] = lbl[1];
    }
    Ok((feats, digits, bkgds))
}

/// Appends rows to `probe_results.csv`, creating it with a header first.
pub fn append_probe_results(path: &Path, rows: &[(ProbeResult, u64)]) -> Result<()> {
    let mut out = String::new();
    if !path.exists() {
        out.push_str("task,mode,accuracy,n_eval,seed\n");
    }
    for (r, seed) in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.task.name(),
            r.mode.name(),
            r.top1_accuracy,
            r.n_eval,
            seed
        ));
    }
    use std::io::Write as _;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| RclError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| RclError::io(path, e))
}
