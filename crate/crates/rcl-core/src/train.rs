//! Two-phase trainer over the dual-branch model, plus the baseline and
//! ablation training modes.
//!
//! Parallelism is deterministic by construction: batches are split into
//! fixed-size chunks, each chunk's gradients are accumulated independently,
//! and the chunk buffers are reduced in index order. Results are bit-identical
//! for any worker count. Per-sample randomness derives from
//! `(seed, epoch, dataset index)`, never from scheduling.

use crate::augment::{apply_policy, luminance, mask_random_patches, AugmentationPolicy};
use crate::data::{ColorfulMnistSample, Dataset};
use crate::loss::{info_nce_with_grad, softmax_cross_entropy, LossConfig};
use crate::model::{build_model, save_checkpoint, ModelConfig, ModelState, ProbeTask};
use crate::nn::{Cache, GradBuf, Network};
use crate::seed::derive_rng;
use crate::{RclError, Result};
use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use std::ops::Range;
use std::path::Path;

/// Fixed chunk width for gradient accumulation; part of the numerical
/// contract (changing it changes rounding), not a tuning knob.
pub const GRAD_CHUNK: usize = 16;

/// Training objective variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Rcl,
    ContrastiveOnly,
    InpaintingOnly,
    Autoencoder,
    Colorization,
    Supervised,
    RclNoWarmup,
    ContrastivePlusMasking,
    ConcatFeatures,
}

impl Mode {
    pub const ALL: [Mode; 9] = [
        Mode::Rcl,
        Mode::ContrastiveOnly,
        Mode::InpaintingOnly,
        Mode::Autoencoder,
        Mode::Colorization,
        Mode::Supervised,
        Mode::RclNoWarmup,
        Mode::ContrastivePlusMasking,
        Mode::ConcatFeatures,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Rcl => "rcl",
            Mode::ContrastiveOnly => "contrastive_only",
            Mode::InpaintingOnly => "inpainting_only",
            Mode::Autoencoder => "autoencoder",
            Mode::Colorization => "colorization",
            Mode::Supervised => "supervised",
            Mode::RclNoWarmup => "rcl_no_warmup",
            Mode::ContrastivePlusMasking => "contrastive_plus_masking",
            Mode::ConcatFeatures => "concat_features",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = RclError;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| RclError::Config(format!("unknown train.mode `{s}`")))
    }
}

/// Label set(s) the supervised mode trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupervisedTarget {
    Digit,
    Background,
    Both,
}

impl std::str::FromStr for SupervisedTarget {
    type Err = RclError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "digit" => Ok(SupervisedTarget::Digit),
            "background" | "bkgd" => Ok(SupervisedTarget::Background),
            "both" => Ok(SupervisedTarget::Both),
            other => Err(RclError::Config(format!(
                "unknown train.supervised_target `{other}`"
            ))),
        }
    }
}

impl SupervisedTarget {
    pub fn name(&self) -> &'static str {
        match self {
            SupervisedTarget::Digit => "digit",
            SupervisedTarget::Background => "background",
            SupervisedTarget::Both => "both",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimKind::Sgd,
            lr: 0.1,
            weight_decay: 1e-4,
            momentum: 0.9,
            decay_epochs: vec![150, 175],
            decay_factor: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub augment: AugmentationPolicy,
    pub model: ModelConfig,
    pub supervised_target: SupervisedTarget,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Rcl,
            epochs: 200,
            batch_size: 512,
            warmup_epochs: 30,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentationPolicy::cmnist_default(),
            model: ModelConfig::default(),
            supervised_target: SupervisedTarget::Background,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.epochs {
            return Err(RclError::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(RclError::Config("batch_size must be at least 2".to_string()));
        }
        self.loss.validate()?;
        self.augment.validate()?;
        self.effective_model().validate()
    }

    /// Model config with mode-implied switches applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.dual_encoder = self.mode == Mode::ConcatFeatures;
        m
    }
}

/// Training phase of an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Joint,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Joint => "joint",
        }
    }
}

/// Warm-up applies to the two-branch objective only: the first
/// `warmup_epochs` epochs of `rcl` train just the reconstructive branch.
/// `rcl_no_warmup` and the single-objective modes are always joint.
pub fn phase_for_epoch(epoch: usize, cfg: &TrainConfig) -> Phase {
    if cfg.mode == Mode::Rcl && epoch < cfg.warmup_epochs {
        Phase::Warmup
    } else {
        Phase::Joint
    }
}

/// Step-wise learning rate: decayed once per boundary the epoch has passed.
pub fn lr_for_epoch(cfg: &OptimizerConfig, epoch: usize) -> f64 {
    let decays = cfg.decay_epochs.iter().filter(|&&b| epoch >= b).count() as i32;
    cfg.lr * cfg.decay_factor.powi(decays)
}

/// SGD-with-momentum / Adam over the flat parameter vector, restricted to the
/// branch ranges a step actually trains.
pub struct Optimizer {
    cfg: OptimizerConfig,
    velocity: Vec<f32>,
    adam_m: Vec<f32>,
    adam_v: Vec<f32>,
    adam_t: i32,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, param_len: usize) -> Self {
        let (adam_m, adam_v) = match cfg.kind {
            OptimKind::Adam => (vec![0.0; param_len], vec![0.0; param_len]),
            OptimKind::Sgd => (Vec::new(), Vec::new()),
        };
        let velocity = match cfg.kind {
            OptimKind::Sgd => vec![0.0; param_len],
            OptimKind::Adam => Vec::new(),
        };
        Optimizer {
            cfg,
            velocity,
            adam_m,
            adam_v,
            adam_t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64, active: &[Range<usize>]) {
        let lr = lr as f32;
        let wd = self.cfg.weight_decay as f32;
        match self.cfg.kind {
            OptimKind::Sgd => {
                let mu = self.cfg.momentum as f32;
                for range in active {
                    for i in range.clone() {
                        let g = grads[i] + wd * params[i];
                        self.velocity[i] = mu * self.velocity[i] + g;
                        params[i] -= lr * self.velocity[i];
                    }
                }
            }
            OptimKind::Adam => {
                const B1: f32 = 0.9;
                const B2: f32 = 0.999;
                const EPS: f32 = 1e-8;
                self.adam_t += 1;
                let bc1 = 1.0 - B1.powi(self.adam_t);
                let bc2 = 1.0 - B2.powi(self.adam_t);
                for range in active {
                    for i in range.clone() {
                        let g = grads[i] + wd * params[i];
                        self.adam_m[i] = B1 * self.adam_m[i] + (1.0 - B1) * g;
                        self.adam_v[i] = B2 * self.adam_v[i] + (1.0 - B2) * g * g;
                        let mhat = self.adam_m[i] / bc1;
                        let vhat = self.adam_v[i] / bc2;
                        params[i] -= lr * mhat / (vhat.sqrt() + EPS);
                    }
                }
            }
        }
    }
}

/// Per-step loss report. `recon` and `contrast` are the unweighted branch
/// losses; `total` is the objective actually optimized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub recon: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss_total: f64,
    pub loss_recon: f64,
    pub loss_contrast: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,phase,loss_total,loss_recon,loss_contrast,lr\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.phase.name(), r.loss_total, r.loss_recon, r.loss_contrast, r.lr
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| RclError::io(path, e))
    }
}

/// What one optimization step computes, derived from mode and phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct StepPlan {
    recon: Option<ReconInput>,
    contrast: bool,
    contrast_masked: bool,
    supervised: Option<SupervisedTarget>,
    dual: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ReconInput {
    Masked,
    Raw,
    Grayscale,
}

fn plan_for(cfg: &TrainConfig, phase: Phase) -> StepPlan {
    let none = StepPlan {
        recon: None,
        contrast: false,
        contrast_masked: false,
        supervised: None,
        dual: false,
    };
    match (cfg.mode, phase) {
        (Mode::Rcl, Phase::Warmup) => StepPlan {
            recon: Some(ReconInput::Masked),
            ..none
        },
        (Mode::Rcl, Phase::Joint) | (Mode::RclNoWarmup, _) => StepPlan {
            recon: Some(ReconInput::Masked),
            contrast: true,
            ..none
        },
        (Mode::InpaintingOnly, _) => StepPlan {
            recon: Some(ReconInput::Masked),
            ..none
        },
        (Mode::Autoencoder, _) => StepPlan {
            recon: Some(ReconInput::Raw),
            ..none
        },
        (Mode::Colorization, _) => StepPlan {
            recon: Some(ReconInput::Grayscale),
            ..none
        },
        (Mode::ContrastiveOnly, _) => StepPlan {
            contrast: true,
            ..none
        },
        (Mode::ContrastivePlusMasking, _) => StepPlan {
            contrast: true,
            contrast_masked: true,
            ..none
        },
        (Mode::Supervised, _) => StepPlan {
            supervised: Some(cfg.supervised_target),
            ..none
        },
        (Mode::ConcatFeatures, _) => StepPlan {
            recon: Some(ReconInput::Masked),
            contrast: true,
            dual: true,
            ..none
        },
    }
}

/// Inputs prepared for one sample of a step.
struct Prepared {
    recon_input: Option<Array3<f32>>,
    target: Option<Array3<f32>>,
    views: Option<(Array3<f32>, Array3<f32>)>,
    digit_label: u8,
    bkgd_label: u8,
    raw: Array3<f32>,
}

fn gray3(img: &Array3<f32>) -> Array3<f32> {
    let lum = luminance(img);
    let (_, h, w) = img.dim();
    Array3::from_shape_fn((3, h, w), |(_, i, j)| lum[(i, j)])
}

fn prepare_sample(
    sample: &ColorfulMnistSample,
    ds_index: usize,
    epoch: usize,
    mean_pixel: [f32; 3],
    cfg: &TrainConfig,
    plan: &StepPlan,
) -> Prepared {
    let mut rng = derive_rng(&[cfg.seed, epoch as u64, ds_index as u64, 0x51ff]);
    let raw = &sample.image;
    let (recon_input, target) = match plan.recon {
        Some(ReconInput::Masked) => {
            let (masked, _) = mask_random_patches(raw, mean_pixel, &mut rng);
            (Some(masked), Some(raw.clone()))
        }
        Some(ReconInput::Raw) => (Some(raw.clone()), Some(raw.clone())),
        Some(ReconInput::Grayscale) => (Some(gray3(raw)), Some(raw.clone())),
        None => (None, None),
    };
    let views = if plan.contrast {
        let v1 = apply_policy(raw, &cfg.augment, &mut rng);
        let v2 = apply_policy(raw, &cfg.augment, &mut rng);
        let (v1, v2) = if plan.contrast_masked {
            let (m1, _) = mask_random_patches(&v1, mean_pixel, &mut rng);
            let (m2, _) = mask_random_patches(&v2, mean_pixel, &mut rng);
            (m1, m2)
        } else {
            (v1, v2)
        };
        Some((v1, v2))
    } else {
        None
    };
    Prepared {
        recon_input,
        target,
        views,
        digit_label: sample.digit_label,
        bkgd_label: sample.bkgd_label,
        raw: raw.clone(),
    }
}

fn stack(images: &[&Array3<f32>]) -> Array4<f32> {
    let (c, h, w) = images[0].dim();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(img);
    }
    out
}

/// Forward state of one chunk's contrastive path, kept until the batch-wide
/// InfoNCE gradient is known.
struct ContrastForward {
    enc_caches: Vec<Cache<f32>>,
    head_caches: Vec<Cache<f32>>,
    z: Array2<f32>,
}

fn contrast_encoder<'a>(state: &'a ModelState, plan: &StepPlan) -> &'a Network {
    if plan.dual {
        state.encoder_b.as_ref().expect("dual encoder present")
    } else {
        &state.encoder
    }
}

fn forward_contrast_chunk(
    state: &ModelState,
    plan: &StepPlan,
    prepared: &[Prepared],
) -> ContrastForward {
    let mut view_refs = Vec::with_capacity(prepared.len() * 2);
    for p in prepared {
        let (v1, v2) = p.views.as_ref().expect("views prepared");
        view_refs.push(v1);
        view_refs.push(v2);
    }
    let views = stack(&view_refs);
    let (feats, enc_caches) =
        contrast_encoder(state, plan).forward_cached(&state.params, views.into_dyn());
    let (z, head_caches) = state.head.forward_cached(&state.params, feats);
    ContrastForward {
        enc_caches,
        head_caches,
        z: z.into_dimensionality::<ndarray::Ix2>().expect("embeddings 2-d"),
    }
}

/// Gradient accumulation for one chunk: contrastive backward from the given
/// embedding gradient slice, plus the sample-local reconstruction and
/// supervised objectives. Returns the chunk's unnormalized squared error and
/// supervised loss sum.
fn backward_chunk(
    state: &ModelState,
    plan: &StepPlan,
    prepared: &[Prepared],
    contrast: Option<(&ContrastForward, Array2<f32>)>,
    loss_cfg: &LossConfig,
    batch_elems: f64,
    batch_size: f64,
    grads: &mut GradBuf<f32>,
) -> Result<(f64, f64)> {
    if let Some((fwd, gz)) = contrast {
        let gfeats = state
            .head
            .backward(&state.params, &fwd.head_caches, gz.into_dyn(), grads);
        let _ = contrast_encoder(state, plan).backward(
            &state.params,
            &fwd.enc_caches,
            gfeats,
            grads,
        );
    }

    let mut sq_sum = 0.0f64;
    if plan.recon.is_some() {
        let inputs: Vec<&Array3<f32>> = prepared.iter().map(|p| p.recon_input.as_ref().unwrap()).collect();
        let targets: Vec<&Array3<f32>> = prepared.iter().map(|p| p.target.as_ref().unwrap()).collect();
        let x = stack(&inputs);
        let t = stack(&targets);
        let (feats, enc_caches) = state
            .encoder
            .forward_cached(&state.params, x.into_dyn());
        let (recon, dec_caches) = state.decoder.forward_cached(&state.params, feats);
        // Per-pixel squared error, normalized over the whole batch so chunked
        // and unchunked execution agree.
        let scale = (2.0 * loss_cfg.lambda1 / batch_elems) as f32;
        let mut grecon = recon.clone();
        for (g, &tv) in grecon.iter_mut().zip(t.iter()) {
            let d = *g - tv;
            sq_sum += (d as f64) * (d as f64);
            *g = d * scale;
        }
        if loss_cfg.lambda1 > 0.0 {
            let gfeats = state
                .decoder
                .backward(&state.params, &dec_caches, grecon, grads);
            let _ = state
                .encoder
                .backward(&state.params, &enc_caches, gfeats, grads);
        }
    }

    let mut sup_sum = 0.0f64;
    if let Some(target) = plan.supervised {
        let raws: Vec<&Array3<f32>> = prepared.iter().map(|p| &p.raw).collect();
        let x = stack(&raws);
        let (feats, enc_caches) = state
            .encoder
            .forward_cached(&state.params, x.into_dyn());
        let feats2 = feats
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("features 2-d")
            .to_owned();
        let mut gfeats = Array2::<f32>::zeros(feats2.raw_dim());
        let tasks: &[(ProbeTask, fn(&Prepared) -> u8)] = match target {
            SupervisedTarget::Digit => &[(ProbeTask::Digit, |p| p.digit_label)],
            SupervisedTarget::Background => &[(ProbeTask::Background, |p| p.bkgd_label)],
            SupervisedTarget::Both => &[
                (ProbeTask::Digit, |p| p.digit_label),
                (ProbeTask::Background, |p| p.bkgd_label),
            ],
        };
        let task_weight = 1.0 / tasks.len() as f64;
        for (task, label_fn) in tasks {
            let labels: Vec<u8> = prepared.iter().map(label_fn).collect();
            let net = match task {
                ProbeTask::Digit => &state.probe_digit,
                ProbeTask::Background => &state.probe_bkgd,
            };
            let (logits, head_caches) =
                net.forward_cached(&state.params, feats2.clone().into_dyn());
            let logits2 = logits
                .into_dimensionality::<ndarray::Ix2>()
                .expect("logits 2-d");
            let (ce, mut gl) = softmax_cross_entropy(&logits2, &labels)?;
            // softmax_cross_entropy normalizes by chunk rows; renormalize to
            // the full batch and apply the task weight.
            let renorm = (prepared.len() as f64 / batch_size * task_weight) as f32;
            gl.mapv_inplace(|v| v * renorm);
            sup_sum += ce as f64 * prepared.len() as f64 * task_weight;
            let gf = net.backward(&state.params, &head_caches, gl.into_dyn(), grads);
            gfeats += &gf
                .into_dimensionality::<ndarray::Ix2>()
                .expect("feature grad 2-d");
        }
        let _ = state
            .encoder
            .backward(&state.params, &enc_caches, gfeats.into_dyn(), grads);
    }

    Ok((sq_sum, sup_sum))
}

fn active_ranges(state: &ModelState, plan: &StepPlan, loss_cfg: &LossConfig) -> Vec<Range<usize>> {
    let mut ranges = Vec::new();
    let recon_on = plan.recon.is_some() && loss_cfg.lambda1 > 0.0;
    let contrast_on = plan.contrast && loss_cfg.lambda2 > 0.0;
    if recon_on || plan.supervised.is_some() || (contrast_on && !plan.dual) {
        ranges.push(state.ranges.encoder.clone());
    }
    if recon_on {
        ranges.push(state.ranges.decoder.clone());
    }
    if contrast_on {
        ranges.push(state.ranges.head.clone());
        if plan.dual {
            ranges.push(state.ranges.encoder_b.clone().expect("dual encoder"));
        }
    }
    match plan.supervised {
        Some(SupervisedTarget::Digit) => ranges.push(state.ranges.probe_digit.clone()),
        Some(SupervisedTarget::Background) => ranges.push(state.ranges.probe_bkgd.clone()),
        Some(SupervisedTarget::Both) => {
            ranges.push(state.ranges.probe_digit.clone());
            ranges.push(state.ranges.probe_bkgd.clone());
        }
        None => {}
    }
    ranges
}

fn compute_step(
    state: &ModelState,
    batch: &[(usize, &ColorfulMnistSample)],
    mean_pixel: [f32; 3],
    cfg: &TrainConfig,
    epoch: usize,
    phase: Phase,
    want_grads: bool,
) -> Result<(StepLosses, Option<GradBuf<f32>>)> {
    let plan = plan_for(cfg, phase);
    let n = batch.len();
    let prepared: Vec<Prepared> = batch
        .par_iter()
        .map(|(idx, s)| prepare_sample(s, *idx, epoch, mean_pixel, cfg, &plan))
        .collect();
    let chunks: Vec<&[Prepared]> = prepared.chunks(GRAD_CHUNK).collect();

    // Contrastive forward needs every embedding before any backward.
    let (contrast_fwd, loss_contrast, gz_all) = if plan.contrast {
        let fwds: Vec<ContrastForward> = chunks
            .par_iter()
            .map(|chunk| forward_contrast_chunk(state, &plan, chunk))
            .collect();
        let mut z = Array2::<f32>::zeros((2 * n, state.config.embedding_dim));
        for (ci, fwd) in fwds.iter().enumerate() {
            let rows = fwd.z.nrows();
            z.slice_mut(ndarray::s![2 * ci * GRAD_CHUNK..2 * ci * GRAD_CHUNK + rows, ..])
                .assign(&fwd.z);
        }
        let (lc, mut gz) = info_nce_with_grad(&z, cfg.loss.temperature as f32)?;
        let w = cfg.loss.lambda2 as f32;
        gz.mapv_inplace(|v| v * w);
        (Some(fwds), lc as f64, Some(gz))
    } else {
        (None, 0.0, None)
    };

    let batch_elems = prepared
        .first()
        .and_then(|p| p.target.as_ref())
        .map(|t| (t.len() * n) as f64)
        .unwrap_or(1.0);

    if !want_grads {
        // Loss-only evaluation still needs the reconstruction/supervised
        // sums; reuse the chunk walker with a throwaway gradient buffer on a
        // zero-parameter... simpler: compute directly here.
        let mut sq_sum = 0.0f64;
        let mut sup_sum = 0.0f64;
        for chunk in &chunks {
            if plan.recon.is_some() {
                let inputs: Vec<&Array3<f32>> =
                    chunk.iter().map(|p| p.recon_input.as_ref().unwrap()).collect();
                let targets: Vec<&Array3<f32>> =
                    chunk.iter().map(|p| p.target.as_ref().unwrap()).collect();
                let recon = state.forward_reconstruction(&stack(&inputs))?;
                let t = stack(&targets);
                sq_sum += recon
                    .iter()
                    .zip(t.iter())
                    .map(|(&r, &tv)| ((r - tv) as f64).powi(2))
                    .sum::<f64>();
            }
            if let Some(target) = plan.supervised {
                let raws: Vec<&Array3<f32>> = chunk.iter().map(|p| &p.raw).collect();
                let feats = state.forward_features(&stack(&raws))?;
                let tasks: Vec<(ProbeTask, Vec<u8>)> = match target {
                    SupervisedTarget::Digit => vec![(
                        ProbeTask::Digit,
                        chunk.iter().map(|p| p.digit_label).collect(),
                    )],
                    SupervisedTarget::Background => vec![(
                        ProbeTask::Background,
                        chunk.iter().map(|p| p.bkgd_label).collect(),
                    )],
                    SupervisedTarget::Both => vec![
                        (
                            ProbeTask::Digit,
                            chunk.iter().map(|p| p.digit_label).collect(),
                        ),
                        (
                            ProbeTask::Background,
                            chunk.iter().map(|p| p.bkgd_label).collect(),
                        ),
                    ],
                };
                let tw = 1.0 / tasks.len() as f64;
                for (task, labels) in tasks {
                    let logits = state.forward_probe(task, &feats);
                    let (ce, _) = softmax_cross_entropy(&logits, &labels)?;
                    sup_sum += ce as f64 * chunk.len() as f64 * tw;
                }
            }
        }
        let losses = assemble_losses(&plan, cfg, sq_sum, batch_elems, sup_sum, n, loss_contrast);
        return Ok((losses, None));
    }

    let gz_all = gz_all.map(|g| g);
    let results: Vec<Result<(GradBuf<f32>, f64, f64)>> = chunks
        .par_iter()
        .enumerate()
        .map(|(ci, chunk)| {
            let mut grads = GradBuf::zeros_like(&state.params);
            let contrast = match (&contrast_fwd, &gz_all) {
                (Some(fwds), Some(gz)) => {
                    let rows = fwds[ci].z.nrows();
                    let slice = gz
                        .slice(ndarray::s![
                            2 * ci * GRAD_CHUNK..2 * ci * GRAD_CHUNK + rows,
                            ..
                        ])
                        .to_owned();
                    Some((&fwds[ci], slice))
                }
                _ => None,
            };
            let (sq, sup) = backward_chunk(
                state,
                &plan,
                chunk,
                contrast,
                &cfg.loss,
                batch_elems,
                n as f64,
                &mut grads,
            )?;
            Ok((grads, sq, sup))
        })
        .collect();

    // Ordered reduction keeps the sum independent of scheduling.
    let mut total_grads: Option<GradBuf<f32>> = None;
    let mut sq_sum = 0.0f64;
    let mut sup_sum = 0.0f64;
    for r in results {
        let (g, sq, sup) = r?;
        sq_sum += sq;
        sup_sum += sup;
        match &mut total_grads {
            None => total_grads = Some(g),
            Some(t) => t.add_assign(&g),
        }
    }
    let losses = assemble_losses(&plan, cfg, sq_sum, batch_elems, sup_sum, n, loss_contrast);
    if !(losses.total.is_finite() && losses.recon.is_finite() && losses.contrast.is_finite()) {
        return Err(RclError::Numeric(format!(
            "non-finite training loss at epoch {epoch}: {losses:?}"
        )));
    }
    Ok((losses, total_grads))
}

fn assemble_losses(
    plan: &StepPlan,
    cfg: &TrainConfig,
    sq_sum: f64,
    batch_elems: f64,
    sup_sum: f64,
    batch_size: usize,
    loss_contrast: f64,
) -> StepLosses {
    let recon = if plan.recon.is_some() {
        sq_sum / batch_elems
    } else {
        0.0
    };
    let supervised = sup_sum / batch_size as f64;
    let mut total = 0.0;
    if plan.recon.is_some() {
        total += cfg.loss.lambda1 * recon;
    }
    if plan.contrast {
        total += cfg.loss.lambda2 * loss_contrast;
    }
    if plan.supervised.is_some() {
        total += supervised;
    }
    StepLosses {
        total,
        recon,
        contrast: if plan.contrast { loss_contrast } else { 0.0 },
    }
}

/// One optimization step on a batch. Gradients flow through the branches the
/// plan activates; only those branches' parameters are updated.
pub fn training_step(
    state: &mut ModelState,
    optimizer: &mut Optimizer,
    batch: &[(usize, &ColorfulMnistSample)],
    mean_pixel: [f32; 3],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<StepLosses> {
    let phase = phase_for_epoch(epoch, cfg);
    let (losses, grads) = compute_step(state, batch, mean_pixel, cfg, epoch, phase, true)?;
    let grads = grads.expect("gradients requested");
    let plan = plan_for(cfg, phase);
    let active = active_ranges(state, &plan, &cfg.loss);
    let lr = lr_for_epoch(&cfg.optimizer, epoch);
    optimizer.step(state.params.data_mut(), grads.data(), lr, &active);
    if !state.params.all_finite() {
        return Err(RclError::Numeric(format!(
            "non-finite parameters after update at epoch {epoch}"
        )));
    }
    Ok(losses)
}

/// Loss of the step's objective without updating anything; uses the same
/// per-sample generators as [`training_step`] for the given epoch.
pub fn evaluate_step_loss(
    state: &ModelState,
    batch: &[(usize, &ColorfulMnistSample)],
    mean_pixel: [f32; 3],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<StepLosses> {
    let phase = phase_for_epoch(epoch, cfg);
    let (losses, _) = compute_step(state, batch, mean_pixel, cfg, epoch, phase, false)?;
    Ok(losses)
}

/// Full training run: shuffled epochs, two-phase schedule, history rows, and
/// checkpoints at every decay boundary plus the end.
pub fn run_training(cfg: &TrainConfig, train: &Dataset, run_dir: &Path) -> Result<(ModelState, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(RclError::Argument("training dataset is empty".to_string()));
    }
    std::fs::create_dir_all(run_dir).map_err(|e| RclError::io(run_dir, e))?;
    let status_path = run_dir.join("status");
    std::fs::write(&status_path, "running\n").map_err(|e| RclError::io(&status_path, e))?;

    let mean_pixel = train.mean_pixel();
    let mut state = build_model(&cfg.effective_model(), cfg.seed)?;
    let mut optimizer = Optimizer::new(cfg.optimizer.clone(), state.params.len());
    let mut history = TrainHistory::default();
    let mut last_good = state.params.clone();

    let result = (|| -> Result<()> {
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            let mut shuffle_rng = derive_rng(&[cfg.seed, epoch as u64, 0x5481]);
            order.shuffle(&mut shuffle_rng);

            let phase = phase_for_epoch(epoch, cfg);
            let lr = lr_for_epoch(&cfg.optimizer, epoch);
            let mut weighted = StepLosses {
                total: 0.0,
                recon: 0.0,
                contrast: 0.0,
            };
            let mut seen = 0usize;
            for batch_idx in order.chunks(cfg.batch_size) {
                let batch: Vec<(usize, &ColorfulMnistSample)> = batch_idx
                    .iter()
                    .map(|&i| (i, &train.samples[i]))
                    .collect();
                let losses = match training_step(
                    &mut state,
                    &mut optimizer,
                    &batch,
                    mean_pixel,
                    cfg,
                    epoch,
                ) {
                    Ok(l) => l,
                    Err(e) => {
                        // Keep the last epoch-boundary parameters reachable.
                        let mut aborted = state.clone();
                        aborted.params = last_good.clone();
                        let _ = save_checkpoint(&aborted, &run_dir.join("ckpt_last_good"));
                        return Err(e);
                    }
                };
                let w = batch.len() as f64;
                weighted.total += losses.total * w;
                weighted.recon += losses.recon * w;
                weighted.contrast += losses.contrast * w;
                seen += batch.len();
            }
            history.records.push(EpochRecord {
                epoch,
                phase,
                loss_total: weighted.total / seen as f64,
                loss_recon: weighted.recon / seen as f64,
                loss_contrast: weighted.contrast / seen as f64,
                lr,
            });
            history.write_csv(&run_dir.join("history.csv"))?;
            last_good = state.params.clone();
            if cfg.optimizer.decay_epochs.contains(&(epoch + 1)) {
                save_checkpoint(&state, &run_dir.join(format!("ckpt_e{}", epoch + 1)))?;
            }
        }
        Ok(())
    })();

    match result {
        Ok(()) => {
            save_checkpoint(&state, &run_dir.join("ckpt_final"))?;
            std::fs::write(&status_path, "complete\n").map_err(|e| RclError::io(&status_path, e))?;
            Ok((state, history))
        }
        Err(e) => {
            let _ = std::fs::write(&status_path, format!("aborted: {}\n", e.category()));
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_phase_boundaries() {
        let cfg = TrainConfig {
            epochs: 60,
            warmup_epochs: 30,
            ..TrainConfig::default()
        };
        assert_eq!(phase_for_epoch(29, &cfg), Phase::Warmup);
        assert_eq!(phase_for_epoch(30, &cfg), Phase::Joint);
        let no_warmup = TrainConfig {
            mode: Mode::RclNoWarmup,
            ..cfg
        };
        assert_eq!(phase_for_epoch(0, &no_warmup), Phase::Joint);
    }

    #[test]
    fn lr_schedule_decays_at_boundaries() {
        let cfg = OptimizerConfig::default();
        assert_eq!(lr_for_epoch(&cfg, 0), 0.1);
        assert_eq!(lr_for_epoch(&cfg, 149), 0.1);
        assert!((lr_for_epoch(&cfg, 150) - 0.01).abs() < 1e-12);
        assert!((lr_for_epoch(&cfg, 175) - 0.001).abs() < 1e-12);
        assert!((lr_for_epoch(&cfg, 199) - 0.001).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_rejected() {
        let cfg = TrainConfig {
            warmup_epochs: 10,
            epochs: 5,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("bogus".parse::<Mode>().is_err());
    }

    #[test]
    fn plans_match_mode_semantics() {
        let cfg = TrainConfig::default();
        let warm = plan_for(&cfg, Phase::Warmup);
        assert_eq!(warm.recon, Some(ReconInput::Masked));
        assert!(!warm.contrast);
        let joint = plan_for(&cfg, Phase::Joint);
        assert!(joint.contrast && joint.recon.is_some());
        let auto = plan_for(
            &TrainConfig {
                mode: Mode::Autoencoder,
                ..cfg.clone()
            },
            Phase::Joint,
        );
        assert_eq!(auto.recon, Some(ReconInput::Raw));
        assert!(!auto.contrast);
        let color = plan_for(
            &TrainConfig {
                mode: Mode::Colorization,
                ..cfg.clone()
            },
            Phase::Joint,
        );
        assert_eq!(color.recon, Some(ReconInput::Grayscale));
        let cm = plan_for(
            &TrainConfig {
                mode: Mode::ContrastivePlusMasking,
                ..cfg
            },
            Phase::Joint,
        );
        assert!(cm.contrast && cm.contrast_masked && cm.recon.is_none());
    }
}
