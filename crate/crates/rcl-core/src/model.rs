//! Model assembly: shared encoder, symmetric deconvolutional decoder,
//! projection head, and linear probe heads, all over one flat parameter set.

use crate::nn::{
    Conv2d, ConvT2d, GradBuf, GroupNorm, Layer, Linear, Network, ParamSet,
};
use crate::seed::derive_rng;
use crate::{RclError, Result};
use ndarray::{Array2, Array4, Axis};
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

/// Network shape. The defaults give a 6-layer encoder over 64×64×3 inputs
/// with a 256-d feature and a 64-d normalized embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Output channels of each stride-2 encoder conv; the decoder mirrors
    /// them in reverse.
    pub encoder_channels: Vec<usize>,
    pub embedding_dim: usize,
    pub head_layers: usize,
    pub norm_groups: usize,
    pub input_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Builds a second, independent encoder for the feature-concatenation
    /// baseline (no parameter sharing between branches).
    pub dual_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_channels: vec![32, 64, 64, 128, 128, 256],
            embedding_dim: 64,
            head_layers: 2,
            norm_groups: 8,
            input_size: 64,
            in_channels: 3,
            num_classes: 10,
            dual_encoder: false,
        }
    }
}

impl ModelConfig {
    pub fn encoder_layers(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Spatial side of the encoder output feature map.
    pub fn feature_map_size(&self) -> usize {
        self.input_size >> self.encoder_layers()
    }

    /// Flattened feature dimension of one encoder.
    pub fn feature_dim(&self) -> usize {
        let s = self.feature_map_size();
        self.encoder_channels.last().copied().unwrap_or(0) * s * s
    }

    /// Feature dimension seen by the probes (doubled for dual encoders).
    pub fn probe_dim(&self) -> usize {
        self.feature_dim() * if self.dual_encoder { 2 } else { 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() {
            return Err(RclError::Config("encoder needs at least one layer".to_string()));
        }
        if self.embedding_dim < 2 {
            return Err(RclError::Config(format!(
                "embedding_dim must be at least 2, got {}",
                self.embedding_dim
            )));
        }
        if self.input_size % (1 << self.encoder_layers()) != 0 {
            return Err(RclError::Config(format!(
                "input size {} not divisible by 2^{} encoder strides",
                self.input_size,
                self.encoder_layers()
            )));
        }
        for &ch in &self.encoder_channels {
            if ch % self.norm_groups != 0 {
                return Err(RclError::Config(format!(
                    "channel width {ch} not divisible by norm_groups {}",
                    self.norm_groups
                )));
            }
        }
        if self.head_layers == 0 {
            return Err(RclError::Config("head needs at least one layer".to_string()));
        }
        Ok(())
    }
}

/// Flat index ranges of each branch inside the parameter vector, used to
/// restrict optimizer updates to the branches a step actually trains.
#[derive(Debug, Clone)]
pub struct BranchRanges {
    pub encoder: Range<usize>,
    pub decoder: Range<usize>,
    pub head: Range<usize>,
    pub probe_digit: Range<usize>,
    pub probe_bkgd: Range<usize>,
    pub encoder_b: Option<Range<usize>>,
}

/// Model parameters plus the branch networks reading them. The contrastive
/// and reconstructive branches share `encoder`; `encoder_b` exists only in
/// the no-sharing concatenation baseline.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
    pub encoder: Network,
    pub decoder: Network,
    pub head: Network,
    pub probe_digit: Network,
    pub probe_bkgd: Network,
    pub encoder_b: Option<Network>,
    pub ranges: BranchRanges,
}

fn build_encoder(
    ps: &mut ParamSet<f32>,
    cfg: &ModelConfig,
    prefix: &str,
    rng: &mut impl rand::Rng,
) -> Network {
    let mut layers = Vec::new();
    let mut in_ch = cfg.in_channels;
    for (i, &out_ch) in cfg.encoder_channels.iter().enumerate() {
        layers.push(Layer::Conv2d(Conv2d::new(
            ps,
            &format!("{prefix}.conv{i}"),
            in_ch,
            out_ch,
            3,
            2,
            rng,
        )));
        layers.push(Layer::GroupNorm(GroupNorm::new(
            ps,
            &format!("{prefix}.norm{i}"),
            out_ch,
            cfg.norm_groups,
        )));
        layers.push(Layer::Relu);
        in_ch = out_ch;
    }
    layers.push(Layer::Flatten);
    Network::new(layers)
}

/// Builds the full model deterministically from the seed.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ModelState> {
    cfg.validate()?;
    let mut rng = derive_rng(&[seed, 0x6d6f64656c]);
    let mut ps = ParamSet::<f32>::new();

    let start = ps.len();
    let encoder = build_encoder(&mut ps, cfg, "encoder", &mut rng);
    let encoder_range = start..ps.len();

    // Decoder mirrors the encoder: deconvs walking the channel list backwards,
    // group-normalized except for the final linear reconstruction layer.
    let start = ps.len();
    let fm = cfg.feature_map_size();
    let top_ch = *cfg.encoder_channels.last().unwrap();
    let mut layers = vec![Layer::Unflatten {
        channels: top_ch,
        h: fm,
        w: fm,
    }];
    let mut in_ch = top_ch;
    for i in (0..cfg.encoder_layers()).rev() {
        let out_ch = if i == 0 {
            cfg.in_channels
        } else {
            cfg.encoder_channels[i - 1]
        };
        layers.push(Layer::ConvT2d(ConvT2d::new(
            &mut ps,
            &format!("decoder.deconv{}", cfg.encoder_layers() - 1 - i),
            in_ch,
            out_ch,
            &mut rng,
        )));
        if i != 0 {
            layers.push(Layer::GroupNorm(GroupNorm::new(
                &mut ps,
                &format!("decoder.norm{}", cfg.encoder_layers() - 1 - i),
                out_ch,
                cfg.norm_groups,
            )));
            layers.push(Layer::Relu);
        }
        in_ch = out_ch;
    }
    let decoder = Network::new(layers);
    let decoder_range = start..ps.len();

    let start = ps.len();
    let feat = cfg.feature_dim();
    let mut layers = Vec::new();
    let mut dim = feat;
    for i in 0..cfg.head_layers {
        let out = if i + 1 == cfg.head_layers {
            cfg.embedding_dim
        } else {
            feat
        };
        layers.push(Layer::Linear(Linear::new(
            &mut ps,
            &format!("head.fc{i}"),
            dim,
            out,
            &mut rng,
        )));
        if i + 1 != cfg.head_layers {
            layers.push(Layer::Relu);
        }
        dim = out;
    }
    layers.push(Layer::L2Normalize { eps: 1e-12 });
    let head = Network::new(layers);
    let head_range = start..ps.len();

    let start = ps.len();
    let probe_digit = Network::new(vec![Layer::Linear(Linear::new(
        &mut ps,
        "probe_digit.fc",
        cfg.probe_dim(),
        cfg.num_classes,
        &mut rng,
    ))]);
    let probe_digit_range = start..ps.len();
    let start = ps.len();
    let probe_bkgd = Network::new(vec![Layer::Linear(Linear::new(
        &mut ps,
        "probe_bkgd.fc",
        cfg.probe_dim(),
        cfg.num_classes,
        &mut rng,
    ))]);
    let probe_bkgd_range = start..ps.len();

    let (encoder_b, encoder_b_range) = if cfg.dual_encoder {
        let start = ps.len();
        let net = build_encoder(&mut ps, cfg, "encoder_b", &mut rng);
        (Some(net), Some(start..ps.len()))
    } else {
        (None, None)
    };

    Ok(ModelState {
        config: cfg.clone(),
        params: ps,
        encoder,
        decoder,
        head,
        probe_digit,
        probe_bkgd,
        encoder_b,
        ranges: BranchRanges {
            encoder: encoder_range,
            decoder: decoder_range,
            head: head_range,
            probe_digit: probe_digit_range,
            probe_bkgd: probe_bkgd_range,
            encoder_b: encoder_b_range,
        },
    })
}

impl ModelState {
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// FNV-1a fingerprint of the raw parameter bits; used to assert branch
    /// freezes.
    pub fn fingerprint_range(&self, range: &Range<usize>) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.params.data()[range.clone()] {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        }
        h
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint_range(&(0..self.params.len()))
    }

    fn check_finite_input(batch: &Array4<f32>) -> Result<()> {
        if batch.is_empty() {
            return Err(RclError::Argument("batch must be nonempty".to_string()));
        }
        if !batch.iter().all(|v| v.is_finite()) {
            return Err(RclError::Numeric("non-finite input batch".to_string()));
        }
        Ok(())
    }

    /// Encoder features for a batch of images; concatenates both encoders'
    /// features in the dual-encoder configuration.
    pub fn forward_features(&self, batch: &Array4<f32>) -> Result<Array2<f32>> {
        Self::check_finite_input(batch)?;
        let fa = self
            .encoder
            .forward(&self.params, batch.clone().into_dyn())
            .into_dimensionality::<ndarray::Ix2>()
            .expect("features are 2-d");
        match &self.encoder_b {
            None => Ok(fa),
            Some(enc_b) => {
                let fb = enc_b
                    .forward(&self.params, batch.clone().into_dyn())
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("features are 2-d");
                Ok(ndarray::concatenate(Axis(1), &[fa.view(), fb.view()])
                    .expect("feature concat"))
            }
        }
    }

    /// Decoder output for a batch of masked images.
    pub fn forward_reconstruction(&self, masked: &Array4<f32>) -> Result<Array4<f32>> {
        Self::check_finite_input(masked)?;
        let feats = self.encoder.forward(&self.params, masked.clone().into_dyn());
        Ok(self
            .decoder
            .forward(&self.params, feats)
            .into_dimensionality::<ndarray::Ix4>()
            .expect("reconstruction is 4-d"))
    }

    /// Unit-norm contrastive embeddings for a feature batch.
    pub fn forward_projection(&self, features: &Array2<f32>) -> Result<Array2<f32>> {
        if !features.iter().all(|v| v.is_finite()) {
            return Err(RclError::Numeric("non-finite features".to_string()));
        }
        Ok(self
            .head
            .forward(&self.params, features.clone().into_dyn())
            .into_dimensionality::<ndarray::Ix2>()
            .expect("embeddings are 2-d"))
    }

    /// Probe logits for the given task over probe-input features.
    pub fn forward_probe(&self, task: ProbeTask, features: &Array2<f32>) -> Array2<f32> {
        let net = match task {
            ProbeTask::Digit => &self.probe_digit,
            ProbeTask::Background => &self.probe_bkgd,
        };
        net.forward(&self.params, features.clone().into_dyn())
            .into_dimensionality::<ndarray::Ix2>()
            .expect("logits are 2-d")
    }

    pub fn grads(&self) -> GradBuf<f32> {
        GradBuf::zeros_like(&self.params)
    }
}

/// Downstream classification task selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProbeTask {
    Digit,
    Background,
}

impl ProbeTask {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeTask::Digit => "digit",
            ProbeTask::Background => "background",
        }
    }
}

impl std::str::FromStr for ProbeTask {
    type Err = RclError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "digit" => Ok(ProbeTask::Digit),
            "background" | "bkgd" => Ok(ProbeTask::Background),
            other => Err(RclError::Argument(format!("unknown task `{other}`"))),
        }
    }
}

const CKPT_MAGIC: &[u8; 4] = b"RCLM";
const CKPT_VERSION: u32 = 1;

/// Writes a parameter set's named tensors in the RCLM checkpoint format.
pub fn save_params(params: &ParamSet<f32>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| RclError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let werr = |e| RclError::io(path, e);
    w.write_all(CKPT_MAGIC).map_err(werr)?;
    w.write_all(&CKPT_VERSION.to_le_bytes()).map_err(werr)?;
    for (name, shape, values) in params.iter_named() {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(werr)?;
        w.write_all(name.as_bytes()).map_err(werr)?;
        w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(werr)?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes()).map_err(werr)?;
        }
        for v in values {
            w.write_all(&v.to_le_bytes()).map_err(werr)?;
        }
    }
    w.flush().map_err(werr)
}

/// Fills an existing parameter set from an RCLM checkpoint; every tensor in
/// the file must match a registered parameter, and all must be present.
pub fn load_params_into(params: &mut ParamSet<f32>, path: &Path) -> Result<()> {
    let file = std::fs::File::open(path).map_err(|e| RclError::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| RclError::io(path, e))?;
    if &magic != CKPT_MAGIC {
        return Err(RclError::Format("bad checkpoint magic".to_string()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|e| RclError::io(path, e))?;
    let version = u32::from_le_bytes(u32buf);
    if version != CKPT_VERSION {
        return Err(RclError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut loaded = 0usize;
    loop {
        match r.read_exact(&mut u32buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(RclError::io(path, e)),
        }
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|e| RclError::io(path, e))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| RclError::Format("checkpoint tensor name is not UTF-8".to_string()))?;
        r.read_exact(&mut u32buf).map_err(|e| RclError::io(path, e))?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u32buf).map_err(|e| RclError::io(path, e))?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = vec![0f32; len];
        for v in values.iter_mut() {
            r.read_exact(&mut u32buf).map_err(|e| RclError::io(path, e))?;
            *v = f32::from_le_bytes(u32buf);
        }
        params.load_named(&name, &values)?;
        loaded += 1;
    }
    if loaded != params.num_tensors() {
        return Err(RclError::Format(format!(
            "checkpoint holds {loaded} tensors, model expects {}",
            params.num_tensors()
        )));
    }
    Ok(())
}

/// Writes a model's parameters as an RCLM checkpoint.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    save_params(&state.params, path)
}

/// Rebuilds a model from the config and fills its parameters from an RCLM
/// checkpoint.
pub fn load_checkpoint(cfg: &ModelConfig, path: &Path) -> Result<ModelState> {
    let mut state = build_model(cfg, 0)?;
    load_params_into(&mut state.params, path)?;
    Ok(state)
}
