//! Dual-branch training on RF clips: a small spatio-temporal residual
//! encoder over stacked horizontal/vertical frames, a deconvolutional
//! decoder reconstructing temporally masked clips, and a contrastive head
//! over ROI-aligned feature crops with jittered person boxes.
//!
//! Reuses the optimizer, schedule, history, and chunked-deterministic
//! gradient machinery of the image trainer.

use super::pipeline::{
    boxes_from_trajectory, detect_trajectory, jitter_box, mask_frames,
    median_background_subtract, DetectParams, MaskStrategy,
};
use super::{BoundingBox, RfSequence, RF_FPS};
use crate::loss::{info_nce_with_grad, LossConfig};
use crate::model::save_params;
use crate::nn::{
    Conv2d, ConvT2d, GradBuf, GroupNorm, Layer, Linear, Network, ParamSet, ResidualBlock,
};
use crate::seed::derive_rng;
use crate::train::{
    lr_for_epoch, EpochRecord, OptimKind, Optimizer, OptimizerConfig, Phase, TrainHistory,
    GRAD_CHUNK,
};
use crate::{RclError, Result};
use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use std::ops::Range;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct RfTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub clip_len: usize,
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
    pub roi_out: (usize, usize),
    pub jitter_m: f32,
    pub window_s: f32,
    pub mask: MaskStrategy,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for RfTrainConfig {
    fn default() -> Self {
        RfTrainConfig {
            epochs: 50,
            batch_size: 128,
            warmup_epochs: 5,
            clip_len: 4,
            channels: vec![32, 64, 64],
            embedding_dim: 64,
            roi_out: (4, 4),
            jitter_m: 0.3,
            window_s: 0.3,
            mask: MaskStrategy::RandomSegments { count: 5, len: 5 },
            loss: LossConfig {
                temperature: 0.1,
                lambda1: 100.0,
                lambda2: 1.0,
            },
            optimizer: OptimizerConfig {
                kind: OptimKind::Adam,
                lr: 1e-3,
                weight_decay: 1e-5,
                momentum: 0.9,
                decay_epochs: vec![],
                decay_factor: 0.1,
            },
            seed: 0,
        }
    }
}

impl RfTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.epochs {
            return Err(RclError::Config("warmup_epochs exceeds epochs".to_string()));
        }
        if self.channels.len() < 2 {
            return Err(RclError::Config(
                "RF encoder needs a stem and at least one residual block".to_string(),
            ));
        }
        self.loss.validate()
    }

    /// Total spatial downsampling of the encoder (one stride-2 stage per
    /// channel entry).
    fn feature_stride(&self) -> usize {
        1 << self.channels.len()
    }
}

/// RF model: spatial feature encoder, clip decoder, projection head.
pub struct RfModel {
    pub params: ParamSet<f32>,
    pub encoder: Network,
    pub decoder: Network,
    pub head: Network,
    pub enc_range: Range<usize>,
    pub dec_range: Range<usize>,
    pub head_range: Range<usize>,
    pub feat_ch: usize,
}

fn gn_groups(ch: usize) -> usize {
    if ch % 8 == 0 {
        8
    } else if ch % 4 == 0 {
        4
    } else {
        1
    }
}

/// Stem conv plus one downsampling residual block per remaining stage.
pub fn build_rf_model(cfg: &RfTrainConfig, seed: u64) -> Result<RfModel> {
    cfg.validate()?;
    let mut rng = derive_rng(&[seed, 0x7266_6d6f64]);
    let mut ps = ParamSet::<f32>::new();
    let in_ch = 2 * cfg.clip_len;

    let start = ps.len();
    let mut layers = vec![
        Layer::Conv2d(Conv2d::new(&mut ps, "rf_enc.stem", in_ch, cfg.channels[0], 3, 2, &mut rng)),
        Layer::GroupNorm(GroupNorm::new(
            &mut ps,
            "rf_enc.stem_norm",
            cfg.channels[0],
            gn_groups(cfg.channels[0]),
        )),
        Layer::Relu,
    ];
    for (i, win) in cfg.channels.windows(2).enumerate() {
        let (cin, cout) = (win[0], win[1]);
        let main = Network::new(vec![
            Layer::Conv2d(Conv2d::new(
                &mut ps,
                &format!("rf_enc.block{i}.conv0"),
                cin,
                cout,
                3,
                2,
                &mut rng,
            )),
            Layer::GroupNorm(GroupNorm::new(
                &mut ps,
                &format!("rf_enc.block{i}.norm0"),
                cout,
                gn_groups(cout),
            )),
            Layer::Relu,
            Layer::Conv2d(Conv2d::new(
                &mut ps,
                &format!("rf_enc.block{i}.conv1"),
                cout,
                cout,
                3,
                1,
                &mut rng,
            )),
            Layer::GroupNorm(GroupNorm::new(
                &mut ps,
                &format!("rf_enc.block{i}.norm1"),
                cout,
                gn_groups(cout),
            )),
        ]);
        let skip = Network::new(vec![Layer::Conv2d(Conv2d::new(
            &mut ps,
            &format!("rf_enc.block{i}.skip"),
            cin,
            cout,
            1,
            2,
            &mut rng,
        ))]);
        layers.push(Layer::Residual(Box::new(ResidualBlock {
            main,
            skip,
            final_relu: true,
        })));
    }
    let encoder = Network::new(layers);
    let enc_range = start..ps.len();

    let start = ps.len();
    let mut layers = Vec::new();
    let mut chs: Vec<usize> = cfg.channels.clone();
    chs.reverse();
    for (i, win) in chs.windows(2).enumerate() {
        layers.push(Layer::ConvT2d(ConvT2d::new(
            &mut ps,
            &format!("rf_dec.deconv{i}"),
            win[0],
            win[1],
            &mut rng,
        )));
        layers.push(Layer::GroupNorm(GroupNorm::new(
            &mut ps,
            &format!("rf_dec.norm{i}"),
            win[1],
            gn_groups(win[1]),
        )));
        layers.push(Layer::Relu);
    }
    layers.push(Layer::ConvT2d(ConvT2d::new(
        &mut ps,
        &format!("rf_dec.deconv{}", chs.len() - 1),
        *chs.last().unwrap(),
        in_ch,
        &mut rng,
    )));
    let decoder = Network::new(layers);
    let dec_range = start..ps.len();

    let start = ps.len();
    let feat_ch = *cfg.channels.last().unwrap();
    let roi_dim = feat_ch * cfg.roi_out.0 * cfg.roi_out.1;
    let head = Network::new(vec![
        Layer::Flatten,
        Layer::Linear(Linear::new(&mut ps, "rf_head.fc0", roi_dim, 128, &mut rng)),
        Layer::Relu,
        Layer::Linear(Linear::new(&mut ps, "rf_head.fc1", 128, cfg.embedding_dim, &mut rng)),
        Layer::L2Normalize { eps: 1e-12 },
    ]);
    let head_range = start..ps.len();

    Ok(RfModel {
        params: ps,
        encoder,
        decoder,
        head,
        enc_range,
        dec_range,
        head_range,
        feat_ch,
    })
}

/// Maps a continuous image-pixel rectangle onto feature-map pixels for a
/// given total stride (feature pixel center q corresponds to image pixel
/// `q*stride + (stride-1)/2`).
fn rect_to_feature(rect: (f32, f32, f32, f32), stride: usize) -> (f32, f32, f32, f32) {
    let s = stride as f32;
    let off = (s - 1.0) / 2.0;
    (
        (rect.0 - off) / s,
        (rect.1 - off) / s,
        (rect.2 - off) / s,
        (rect.3 - off) / s,
    )
}

/// Bilinear ROI crop of a feature stack with support for backprop.
fn roi_forward(
    maps: &Array3<f32>,
    rect: (f32, f32, f32, f32),
    out: (usize, usize),
) -> Result<Array3<f32>> {
    super::pipeline::roi_crop_stack(maps, rect, out)
}

/// Adjoint of [`roi_forward`]: scatters the crop gradient back onto the map.
fn roi_backward(
    grad: &Array3<f32>,
    rect: (f32, f32, f32, f32),
    map_dims: (usize, usize),
    gmaps: &mut Array3<f32>,
) {
    let (h, w) = map_dims;
    let (x0, y0, x1, y1) = rect;
    let cx0 = x0.max(-0.5);
    let cy0 = y0.max(-0.5);
    let cx1 = x1.min(w as f32 - 0.5);
    let cy1 = y1.min(h as f32 - 0.5);
    let (c, oh, ow) = grad.dim();
    let bh = (cy1 - cy0) / oh as f32;
    let bw = (cx1 - cx0) / ow as f32;
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let g = grad[(ch, i, j)];
                let sy = (cy0 + (i as f32 + 0.5) * bh).clamp(0.0, (h - 1) as f32);
                let sx = (cx0 + (j as f32 + 0.5) * bw).clamp(0.0, (w - 1) as f32);
                let y0i = sy.floor() as usize;
                let x0i = sx.floor() as usize;
                let y1i = (y0i + 1).min(h - 1);
                let x1i = (x0i + 1).min(w - 1);
                let ty = sy - y0i as f32;
                let tx = sx - x0i as f32;
                gmaps[(ch, y0i, x0i)] += g * (1.0 - tx) * (1.0 - ty);
                gmaps[(ch, y0i, x1i)] += g * tx * (1.0 - ty);
                gmaps[(ch, y1i, x0i)] += g * (1.0 - tx) * ty;
                gmaps[(ch, y1i, x1i)] += g * tx * ty;
            }
        }
    }
}

/// A training anchor: a clip inside one sequence.
#[derive(Debug, Clone, Copy)]
struct Anchor {
    seq: usize,
    frame: usize,
}

struct PreparedSeq {
    seq: RfSequence,
    masked: RfSequence,
    boxes: Vec<BoundingBox>,
}

fn clip_stack(seq: &RfSequence, start: usize, len: usize) -> Array3<f32> {
    let (h, w) = seq.frames[0].horizontal.dim();
    let mut out = Array3::zeros((2 * len, h, w));
    for k in 0..len {
        out.index_axis_mut(Axis(0), 2 * k)
            .assign(&seq.frames[start + k].horizontal);
        out.index_axis_mut(Axis(0), 2 * k + 1)
            .assign(&seq.frames[start + k].vertical);
    }
    out
}

fn stack4(clips: &[Array3<f32>]) -> Array4<f32> {
    let (c, h, w) = clips[0].dim();
    let mut out = Array4::zeros((clips.len(), c, h, w));
    for (i, clip) in clips.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(clip);
    }
    out
}

/// Runs the detection pipeline and температures masks for every sequence, then
/// trains the dual-branch RF model. Writes `history.csv` and `ckpt_final`
/// into the run directory.
pub fn run_rf_training(
    cfg: &RfTrainConfig,
    sequences: &[RfSequence],
    run_dir: &Path,
) -> Result<(RfModel, TrainHistory)> {
    cfg.validate()?;
    if sequences.is_empty() {
        return Err(RclError::Argument("no RF sequences provided".to_string()));
    }
    std::fs::create_dir_all(run_dir).map_err(|e| RclError::io(run_dir, e))?;

    // Signal-processing front end: per-sequence boxes from detected
    // trajectories, plus the temporally masked copy for the reconstruction.
    let mut prepared = Vec::with_capacity(sequences.len());
    for (si, seq) in sequences.iter().enumerate() {
        if seq.len() < cfg.clip_len {
            return Err(RclError::Argument(format!(
                "sequence {si} shorter than clip length {}",
                cfg.clip_len
            )));
        }
        let residuals = median_background_subtract(seq, seq.len())?;
        let traj = detect_trajectory(&residuals, seq.scale, &DetectParams::default())?;
        let boxes = boxes_from_trajectory(&traj)?;
        let mut rng = derive_rng(&[cfg.seed, si as u64, 0x6d61736b]);
        let (masked, _) = mask_frames(seq, cfg.mask, &mut rng)?;
        prepared.push(PreparedSeq {
            seq: seq.clone(),
            masked,
            boxes,
        });
    }

    let anchors: Vec<Anchor> = prepared
        .iter()
        .enumerate()
        .flat_map(|(si, p)| {
            (0..=p.seq.len() - cfg.clip_len).map(move |f| Anchor { seq: si, frame: f })
        })
        .collect();

    let mut model = build_rf_model(cfg, cfg.seed)?;
    let mut optimizer = Optimizer::new(cfg.optimizer.clone(), model.params.len());
    let mut history = TrainHistory::default();
    let stride = cfg.feature_stride();
    let grid = prepared[0].seq.frames[0].horizontal.dim();

    for epoch in 0..cfg.epochs {
        let phase = if epoch < cfg.warmup_epochs {
            Phase::Warmup
        } else {
            Phase::Joint
        };
        let lr = lr_for_epoch(&cfg.optimizer, epoch);
        let mut order = anchors.clone();
        let mut rng = derive_rng(&[cfg.seed, epoch as u64, 0x73687566]);
        order.shuffle(&mut rng);

        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let losses = rf_training_step(
                &mut model,
                &mut optimizer,
                &prepared,
                batch,
                cfg,
                epoch,
                phase,
                lr,
                stride,
                grid,
            )?;
            let w = batch.len() as f64;
            sums.0 += losses.0 * w;
            sums.1 += losses.1 * w;
            sums.2 += losses.2 * w;
            seen += batch.len();
        }
        history.records.push(EpochRecord {
            epoch,
            phase,
            loss_total: sums.0 / seen as f64,
            loss_recon: sums.1 / seen as f64,
            loss_contrast: sums.2 / seen as f64,
            lr,
        });
        history.write_csv(&run_dir.join("history.csv"))?;
    }
    save_params(&model.params, &run_dir.join("ckpt_final"))?;
    Ok((model, history))
}

struct RfContrastFwd {
    enc_a: Vec<crate::nn::Cache<f32>>,
    enc_p: Vec<crate::nn::Cache<f32>>,
    fmap_dims: (usize, usize),
    rects_a: Vec<(f32, f32, f32, f32)>,
    rects_p: Vec<(f32, f32, f32, f32)>,
    head_caches: Vec<crate::nn::Cache<f32>>,
    z: Array2<f32>,
}

fn rf_training_step(
    model: &mut RfModel,
    optimizer: &mut Optimizer,
    prepared: &[PreparedSeq],
    batch: &[Anchor],
    cfg: &RfTrainConfig,
    epoch: usize,
    phase: Phase,
    lr: f64,
    stride: usize,
    grid: (usize, usize),
) -> Result<(f64, f64, f64)> {
    let contrast = phase == Phase::Joint && cfg.loss.lambda2 > 0.0;
    let n = batch.len();
    let window = (cfg.window_s * RF_FPS).round() as i64;

    // Per-anchor preparation: masked clip, target clip, and (joint phase)
    // the anchor/positive clips with jittered boxes.
    struct Item {
        masked: Array3<f32>,
        target: Array3<f32>,
        clip_a: Option<Array3<f32>>,
        clip_p: Option<Array3<f32>>,
        rect_a: (f32, f32, f32, f32),
        rect_p: (f32, f32, f32, f32),
    }
    let items: Vec<Item> = batch
        .par_iter()
        .enumerate()
        .map(|(bi, a)| {
            let p = &prepared[a.seq];
            let mut rng = derive_rng(&[cfg.seed, epoch as u64, bi as u64, 0x706169]);
            let masked = clip_stack(&p.masked, a.frame, cfg.clip_len);
            let target = clip_stack(&p.seq, a.frame, cfg.clip_len);
            let (clip_a, clip_p, rect_a, rect_p) = if contrast {
                let max_anchor = p.seq.len() - cfg.clip_len;
                let lo = (a.frame as i64 - window).max(0) as usize;
                let hi = ((a.frame as i64 + window) as usize).min(max_anchor);
                let pos = rng.gen_range(lo..=hi);
                let ba = jitter_box(&p.boxes[a.frame], cfg.jitter_m, &mut rng);
                let bp = jitter_box(&p.boxes[pos], cfg.jitter_m, &mut rng);
                (
                    Some(clip_stack(&p.seq, a.frame, cfg.clip_len)),
                    Some(clip_stack(&p.seq, pos, cfg.clip_len)),
                    rect_to_feature(ba.pixel_rect(p.seq.scale, grid), stride),
                    rect_to_feature(bp.pixel_rect(p.seq.scale, grid), stride),
                )
            } else {
                let zero = (0.0, 0.0, 0.0, 0.0);
                (None, None, zero, zero)
            };
            Item {
                masked,
                target,
                clip_a,
                clip_p,
                rect_a,
                rect_p,
            }
        })
        .collect();

    let chunks: Vec<&[Item]> = items.chunks(GRAD_CHUNK).collect();

    // Contrastive forward across all chunks before the loss couples them.
    let contrast_fwd: Option<Vec<RfContrastFwd>> = if contrast {
        let fwds: Vec<RfContrastFwd> = chunks
            .par_iter()
            .map(|chunk| {
                let clips_a: Vec<Array3<f32>> =
                    chunk.iter().map(|i| i.clip_a.clone().unwrap()).collect();
                let clips_p: Vec<Array3<f32>> =
                    chunk.iter().map(|i| i.clip_p.clone().unwrap()).collect();
                let (fa, enc_a) = model
                    .encoder
                    .forward_cached(&model.params, stack4(&clips_a).into_dyn());
                let (fp, enc_p) = model
                    .encoder
                    .forward_cached(&model.params, stack4(&clips_p).into_dyn());
                let fa = fa.into_dimensionality::<ndarray::Ix4>().unwrap();
                let fp = fp.into_dimensionality::<ndarray::Ix4>().unwrap();
                let fdims = (fa.dim().2, fa.dim().3);
                let mut crops = Vec::with_capacity(2 * chunk.len());
                let mut rects_a = Vec::new();
                let mut rects_p = Vec::new();
                for (i, item) in chunk.iter().enumerate() {
                    let ca = roi_forward(
                        &fa.index_axis(Axis(0), i).to_owned(),
                        item.rect_a,
                        cfg.roi_out,
                    )
                    .expect("roi overlaps");
                    let cp = roi_forward(
                        &fp.index_axis(Axis(0), i).to_owned(),
                        item.rect_p,
                        cfg.roi_out,
                    )
                    .expect("roi overlaps");
                    crops.push(ca);
                    crops.push(cp);
                    rects_a.push(item.rect_a);
                    rects_p.push(item.rect_p);
                }
                let (z, head_caches) = model
                    .head
                    .forward_cached(&model.params, stack4(&crops).into_dyn());
                RfContrastFwd {
                    enc_a,
                    enc_p,
                    fmap_dims: fdims,
                    rects_a,
                    rects_p,
                    head_caches,
                    z: z.into_dimensionality::<ndarray::Ix2>().unwrap(),
                }
            })
            .collect();
        Some(fwds)
    } else {
        None
    };

    let (loss_contrast, gz) = if let Some(fwds) = &contrast_fwd {
        let mut z = Array2::<f32>::zeros((2 * n, cfg.embedding_dim));
        for (ci, fwd) in fwds.iter().enumerate() {
            let rows = fwd.z.nrows();
            z.slice_mut(ndarray::s![2 * ci * GRAD_CHUNK..2 * ci * GRAD_CHUNK + rows, ..])
                .assign(&fwd.z);
        }
        let (lc, mut g) = info_nce_with_grad(&z, cfg.loss.temperature as f32)?;
        let w = cfg.loss.lambda2 as f32;
        g.mapv_inplace(|v| v * w);
        (lc as f64, Some(g))
    } else {
        (0.0, None)
    };

    let clip_elems: usize = items[0].target.len();
    let batch_elems = (clip_elems * n) as f64;
    let results: Vec<Result<(GradBuf<f32>, f64)>> = chunks
        .par_iter()
        .enumerate()
        .map(|(ci, chunk)| {
            let mut grads = GradBuf::zeros_like(&model.params);
            // Reconstruction branch.
            let masked: Vec<Array3<f32>> = chunk.iter().map(|i| i.masked.clone()).collect();
            let targets: Vec<Array3<f32>> = chunk.iter().map(|i| i.target.clone()).collect();
            let (fmap, enc_caches) = model
                .encoder
                .forward_cached(&model.params, stack4(&masked).into_dyn());
            let (recon, dec_caches) = model.decoder.forward_cached(&model.params, fmap);
            let t = stack4(&targets);
            let mut sq = 0.0f64;
            let scale = (2.0 * cfg.loss.lambda1 / batch_elems) as f32;
            let mut grecon = recon.clone();
            for (g, &tv) in grecon.iter_mut().zip(t.iter()) {
                let d = *g - tv;
                sq += (d as f64) * (d as f64);
                *g = d * scale;
            }
            if cfg.loss.lambda1 > 0.0 {
                let gf = model
                    .decoder
                    .backward(&model.params, &dec_caches, grecon, &mut grads);
                let _ = model
                    .encoder
                    .backward(&model.params, &enc_caches, gf, &mut grads);
            }

            // Contrastive branch.
            if let (Some(fwds), Some(gz)) = (&contrast_fwd, &gz) {
                let fwd = &fwds[ci];
                let rows = fwd.z.nrows();
                let gz_chunk = gz
                    .slice(ndarray::s![
                        2 * ci * GRAD_CHUNK..2 * ci * GRAD_CHUNK + rows,
                        ..
                    ])
                    .to_owned();
                let gcrops = model.head.backward(
                    &model.params,
                    &fwd.head_caches,
                    gz_chunk.into_dyn(),
                    &mut grads,
                );
                let gcrops = gcrops.into_dimensionality::<ndarray::Ix4>().unwrap();
                let half = chunk.len();
                let (fh, fw) = fwd.fmap_dims;
                let mut gfa = Array4::<f32>::zeros((half, model.feat_ch, fh, fw));
                let mut gfp = Array4::<f32>::zeros((half, model.feat_ch, fh, fw));
                for i in 0..half {
                    let mut ga = gfa.index_axis_mut(Axis(0), i).to_owned();
                    roi_backward(
                        &gcrops.index_axis(Axis(0), 2 * i).to_owned(),
                        fwd.rects_a[i],
                        (fh, fw),
                        &mut ga,
                    );
                    gfa.index_axis_mut(Axis(0), i).assign(&ga);
                    let mut gp = gfp.index_axis_mut(Axis(0), i).to_owned();
                    roi_backward(
                        &gcrops.index_axis(Axis(0), 2 * i + 1).to_owned(),
                        fwd.rects_p[i],
                        (fh, fw),
                        &mut gp,
                    );
                    gfp.index_axis_mut(Axis(0), i).assign(&gp);
                }
                let _ = model
                    .encoder
                    .backward(&model.params, &fwd.enc_a, gfa.into_dyn(), &mut grads);
                let _ = model
                    .encoder
                    .backward(&model.params, &fwd.enc_p, gfp.into_dyn(), &mut grads);
            }
            Ok((grads, sq))
        })
        .collect();

    let mut total: Option<GradBuf<f32>> = None;
    let mut sq_sum = 0.0f64;
    for r in results {
        let (g, sq) = r?;
        sq_sum += sq;
        match &mut total {
            None => total = Some(g),
            Some(t) => t.add_assign(&g),
        }
    }
    let grads = total.expect("nonempty batch");
    let loss_recon = sq_sum / batch_elems;
    let loss_total = cfg.loss.lambda1 * loss_recon
        + if contrast {
            cfg.loss.lambda2 * loss_contrast
        } else {
            0.0
        };
    if !loss_total.is_finite() {
        return Err(RclError::Numeric(format!(
            "non-finite RF loss at epoch {epoch}"
        )));
    }

    let mut active = vec![model.enc_range.clone()];
    if cfg.loss.lambda1 > 0.0 {
        active.push(model.dec_range.clone());
    }
    if contrast {
        active.push(model.head_range.clone());
    }
    optimizer.step(model.params.data_mut(), grads.data(), lr, &active);
    if !model.params.all_finite() {
        return Err(RclError::Numeric(format!(
            "non-finite RF parameters after update at epoch {epoch}"
        )));
    }
    Ok((loss_total, loss_recon, if contrast { loss_contrast } else { 0.0 }))
}

/// Proxy downstream task: ridge-style linear regression from pooled ROI
/// features to the ground-truth person center, reported as RMSE in meters.
pub fn center_probe_rmse(
    model: &RfModel,
    cfg: &RfTrainConfig,
    sequences: &[RfSequence],
) -> Result<f64> {
    let stride = cfg.feature_stride();
    let mut feats: Vec<Vec<f32>> = Vec::new();
    let mut targets: Vec<(f32, f32)> = Vec::new();
    for seq in sequences {
        let residuals = median_background_subtract(seq, seq.len())?;
        let traj = detect_trajectory(&residuals, seq.scale, &DetectParams::default())?;
        let boxes = boxes_from_trajectory(&traj)?;
        let grid = seq.frames[0].horizontal.dim();
        for f in (0..=seq.len() - cfg.clip_len).step_by(4) {
            let clip = clip_stack(seq, f, cfg.clip_len);
            let fmap = model
                .encoder
                .forward(&model.params, stack4(&[clip]).into_dyn())
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            let rect = rect_to_feature(boxes[f].pixel_rect(seq.scale, grid), stride);
            let crop = roi_forward(&fmap.index_axis(Axis(0), 0).to_owned(), rect, cfg.roi_out)?;
            // Global average pool per channel.
            let (c, oh, ow) = crop.dim();
            let pooled: Vec<f32> = (0..c)
                .map(|ch| crop.index_axis(Axis(0), ch).sum() / (oh * ow) as f32)
                .collect();
            feats.push(pooled);
            targets.push(seq.ground_truth[f]);
        }
    }
    let n = feats.len();
    let d = feats[0].len();
    // Closed-form ridge regression on centered data.
    let lambda = 1e-3f64;
    let mut mean_f = vec![0.0f64; d];
    let mut mean_t = [0.0f64; 2];
    for (f, t) in feats.iter().zip(targets.iter()) {
        for (m, &v) in mean_f.iter_mut().zip(f.iter()) {
            *m += v as f64;
        }
        mean_t[0] += t.0 as f64;
        mean_t[1] += t.1 as f64;
    }
    for m in mean_f.iter_mut() {
        *m /= n as f64;
    }
    mean_t[0] /= n as f64;
    mean_t[1] /= n as f64;
    let mut xtx = vec![0.0f64; d * d];
    let mut xty = vec![0.0f64; d * 2];
    for (f, t) in feats.iter().zip(targets.iter()) {
        let fc: Vec<f64> = f.iter().zip(mean_f.iter()).map(|(&v, &m)| v as f64 - m).collect();
        let tc = [t.0 as f64 - mean_t[0], t.1 as f64 - mean_t[1]];
        for i in 0..d {
            for j in 0..d {
                xtx[i * d + j] += fc[i] * fc[j];
            }
            xty[i * 2] += fc[i] * tc[0];
            xty[i * 2 + 1] += fc[i] * tc[1];
        }
    }
    for i in 0..d {
        xtx[i * d + i] += lambda * n as f64;
    }
    let w = solve_sym(&mut xtx, &mut xty, d, 2)?;
    let mut sq = 0.0f64;
    for (f, t) in feats.iter().zip(targets.iter()) {
        let fc: Vec<f64> = f.iter().zip(mean_f.iter()).map(|(&v, &m)| v as f64 - m).collect();
        let px: f64 = (0..d).map(|i| fc[i] * w[i * 2]).sum::<f64>() + mean_t[0];
        let py: f64 = (0..d).map(|i| fc[i] * w[i * 2 + 1]).sum::<f64>() + mean_t[1];
        sq += (px - t.0 as f64).powi(2) + (py - t.1 as f64).powi(2);
    }
    Ok((sq / n as f64).sqrt())
}

/// Gaussian elimination with partial pivoting for the small SPD systems the
/// center probe produces. Solves in place; `b` holds `rhs_cols` columns.
fn solve_sym(a: &mut [f64], b: &mut [f64], n: usize, rhs_cols: usize) -> Result<Vec<f64>> {
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * n + col].abs() < 1e-12 {
            return Err(RclError::Numeric("singular system in center probe".to_string()));
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            for j in 0..rhs_cols {
                b.swap(col * rhs_cols + j, pivot * rhs_cols + j);
            }
        }
        let inv = 1.0 / a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] * inv;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= factor * a[col * n + j];
            }
            for j in 0..rhs_cols {
                b[row * rhs_cols + j] -= factor * b[col * rhs_cols + j];
            }
        }
    }
    let mut x = vec![0.0f64; n * rhs_cols];
    for col in (0..n).rev() {
        for j in 0..rhs_cols {
            let mut acc = b[col * rhs_cols + j];
            for k in col + 1..n {
                acc -= a[col * n + k] * x[k * rhs_cols + j];
            }
            x[col * rhs_cols + j] = acc / a[col * n + col];
        }
    }
    Ok(x)
}
