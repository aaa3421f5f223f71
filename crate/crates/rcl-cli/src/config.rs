//! Flat dotted-key run configuration: documented defaults, plain-text config
//! files (`key = value` lines, `#` comments), command-line overrides, and
//! unknown-key rejection with a nearest-key suggestion.

use rcl_core::augment::AugmentationPolicy;
use rcl_core::loss::LossConfig;
use rcl_core::model::ModelConfig;
use rcl_core::rf::{MaskStrategy, RfTrainConfig};
use rcl_core::train::{OptimKind, OptimizerConfig, SupervisedTarget, TrainConfig};
use rcl_core::{RclError, Result};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Bool,
    Int,
    Float,
    IntList,
    Word,
}

/// Every known key with its type and default. Single source of truth for
/// defaults; `config.resolved` dumps exactly these keys.
const KEYS: &[(&str, Kind, &str)] = &[
    ("data", Kind::Word, ""),
    ("out", Kind::Word, ""),
    ("seed", Kind::Int, "0"),
    ("train.mode", Kind::Word, "rcl"),
    ("train.epochs", Kind::Int, "200"),
    ("train.batch_size", Kind::Int, "512"),
    ("train.warmup_epochs", Kind::Int, "30"),
    ("train.supervised_target", Kind::Word, "background"),
    ("optim.kind", Kind::Word, "sgd"),
    ("optim.lr", Kind::Float, "0.1"),
    ("optim.weight_decay", Kind::Float, "0.0001"),
    ("optim.momentum", Kind::Float, "0.9"),
    ("optim.decay_epochs", Kind::IntList, "150,175"),
    ("optim.decay_factor", Kind::Float, "0.1"),
    ("loss.temperature", Kind::Float, "0.1"),
    ("loss.lambda1", Kind::Float, "20"),
    ("loss.lambda2", Kind::Float, "1"),
    ("model.channels", Kind::IntList, "32,64,64,128,128,256"),
    ("model.embedding_dim", Kind::Int, "64"),
    ("model.head_layers", Kind::Int, "2"),
    ("model.norm_groups", Kind::Int, "8"),
    ("aug.crop", Kind::Bool, "true"),
    ("aug.crop_scale_min", Kind::Float, "0.2"),
    ("aug.crop_scale_max", Kind::Float, "1.0"),
    ("aug.flip", Kind::Bool, "false"),
    ("aug.flip_prob", Kind::Float, "0.5"),
    ("aug.color_jitter", Kind::Bool, "true"),
    ("aug.jitter_strength", Kind::Float, "0.4"),
    ("aug.jitter_hue", Kind::Float, "0.1"),
    ("aug.grayscale", Kind::Bool, "false"),
    ("aug.grayscale_prob", Kind::Float, "0.2"),
    ("aug.blur", Kind::Bool, "false"),
    ("aug.blur_prob", Kind::Float, "0.5"),
    ("aug.blur_sigma_min", Kind::Float, "0.1"),
    ("aug.blur_sigma_max", Kind::Float, "2.0"),
    ("probe.lr", Kind::Float, "0.5"),
    ("probe.max_iters", Kind::Int, "500"),
    ("probe.finetune_epochs", Kind::Int, "5"),
    ("probe.finetune_lr", Kind::Float, "0.01"),
    ("rf.epochs", Kind::Int, "50"),
    ("rf.batch_size", Kind::Int, "128"),
    ("rf.warmup_epochs", Kind::Int, "5"),
    ("rf.clip_len", Kind::Int, "4"),
    ("rf.channels", Kind::IntList, "32,64,64"),
    ("rf.embedding_dim", Kind::Int, "64"),
    ("rf.roi_h", Kind::Int, "4"),
    ("rf.roi_w", Kind::Int, "4"),
    ("rf.jitter_m", Kind::Float, "0.3"),
    ("rf.window_s", Kind::Float, "0.3"),
    ("rf.mask", Kind::Word, "segments"),
    ("rf.temperature", Kind::Float, "0.1"),
    ("rf.lambda1", Kind::Float, "100"),
    ("rf.lambda2", Kind::Float, "1"),
    ("rf.lr", Kind::Float, "0.001"),
    ("rf.weight_decay", Kind::Float, "0.00001"),
];

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let cost = if ca == cb { 0 } else { 1 };
            cur[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn kind_of(key: &str) -> Option<Kind> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, kind, _)| *kind)
}

fn check_value(key: &str, kind: Kind, value: &str) -> Result<()> {
    let bad = |expected: &str| {
        Err(RclError::Config(format!(
            "key `{key}` expects {expected}, got `{value}`"
        )))
    };
    match kind {
        Kind::Bool => {
            if value.parse::<bool>().is_err() {
                return bad("true or false");
            }
        }
        Kind::Int => {
            if value.parse::<u64>().is_err() {
                return bad("a nonnegative integer");
            }
        }
        Kind::Float => {
            if value.parse::<f64>().map(|v| !v.is_finite()).unwrap_or(true) {
                return bad("a finite number");
            }
        }
        Kind::IntList => {
            if !value.is_empty()
                && value.split(',').any(|p| p.trim().parse::<u64>().is_err())
            {
                return bad("a comma-separated list of integers");
            }
        }
        Kind::Word => {}
    }
    Ok(())
}

/// Fully resolved run configuration: every known key has a value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn defaults() -> Self {
        RunConfig {
            values: KEYS
                .iter()
                .map(|(k, _, d)| (k.to_string(), d.to_string()))
                .collect(),
        }
    }

    /// Sets one key, rejecting unknown names with the nearest valid key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some(kind) = kind_of(key) else {
            let nearest = KEYS
                .iter()
                .map(|(k, _, _)| *k)
                .min_by_key(|k| levenshtein(key, k))
                .unwrap();
            return Err(RclError::Config(format!(
                "unknown key `{key}` (did you mean `{nearest}`?)"
            )));
        };
        check_value(key, kind, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("unknown config key `{key}`"))
    }

    pub fn get_u64(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated at set time")
    }

    pub fn get_usize(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated at set time")
    }

    pub fn get_f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated at set time")
    }

    pub fn get_bool(&self, key: &str) -> bool {
        self.get(key).parse().expect("validated at set time")
    }

    pub fn get_usize_list(&self, key: &str) -> Vec<usize> {
        let v = self.get(key);
        if v.trim().is_empty() {
            return Vec::new();
        }
        v.split(',')
            .map(|p| p.trim().parse().expect("validated at set time"))
            .collect()
    }

    /// Full `key=value` dump, sorted, one per line.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| RclError::io(path, e))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(RclError::Config(format!(
                    "{}:{}: expected `key = value`, got `{line}`",
                    path.display(),
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Builds the training configuration from the resolved keys.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            mode: self.get("train.mode").parse()?,
            epochs: self.get_usize("train.epochs"),
            batch_size: self.get_usize("train.batch_size"),
            warmup_epochs: self.get_usize("train.warmup_epochs"),
            supervised_target: self.get("train.supervised_target").parse()?,
            optimizer: OptimizerConfig {
                kind: match self.get("optim.kind") {
                    "sgd" => OptimKind::Sgd,
                    "adam" => OptimKind::Adam,
                    other => {
                        return Err(RclError::Config(format!(
                            "optim.kind must be sgd or adam, got `{other}`"
                        )))
                    }
                },
                lr: self.get_f64("optim.lr"),
                weight_decay: self.get_f64("optim.weight_decay"),
                momentum: self.get_f64("optim.momentum"),
                decay_epochs: self.get_usize_list("optim.decay_epochs"),
                decay_factor: self.get_f64("optim.decay_factor"),
            },
            loss: LossConfig {
                temperature: self.get_f64("loss.temperature"),
                lambda1: self.get_f64("loss.lambda1"),
                lambda2: self.get_f64("loss.lambda2"),
            },
            augment: self.augment_policy(),
            model: ModelConfig {
                encoder_channels: self.get_usize_list("model.channels"),
                embedding_dim: self.get_usize("model.embedding_dim"),
                head_layers: self.get_usize("model.head_layers"),
                norm_groups: self.get_usize("model.norm_groups"),
                ..ModelConfig::default()
            },
            seed: self.get_u64("seed"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn augment_policy(&self) -> AugmentationPolicy {
        AugmentationPolicy {
            crop: self.get_bool("aug.crop"),
            crop_scale: (
                self.get_f64("aug.crop_scale_min") as f32,
                self.get_f64("aug.crop_scale_max") as f32,
            ),
            flip: self.get_bool("aug.flip"),
            flip_prob: self.get_f64("aug.flip_prob") as f32,
            color_jitter: self.get_bool("aug.color_jitter"),
            jitter_strength: self.get_f64("aug.jitter_strength") as f32,
            jitter_hue: self.get_f64("aug.jitter_hue") as f32,
            grayscale: self.get_bool("aug.grayscale"),
            grayscale_prob: self.get_f64("aug.grayscale_prob") as f32,
            blur: self.get_bool("aug.blur"),
            blur_prob: self.get_f64("aug.blur_prob") as f32,
            blur_sigma: (
                self.get_f64("aug.blur_sigma_min") as f32,
                self.get_f64("aug.blur_sigma_max") as f32,
            ),
        }
    }

    pub fn rf_train_config(&self) -> Result<RfTrainConfig> {
        let mask = match self.get("rf.mask") {
            "segments" => MaskStrategy::RandomSegments { count: 5, len: 5 },
            "center" => MaskStrategy::CenterSegment { len: 25 },
            "random" => MaskStrategy::Random { p: 0.25 },
            other => {
                return Err(RclError::Config(format!(
                    "rf.mask must be segments, center, or random, got `{other}`"
                )))
            }
        };
        Ok(RfTrainConfig {
            epochs: self.get_usize("rf.epochs"),
            batch_size: self.get_usize("rf.batch_size"),
            warmup_epochs: self.get_usize("rf.warmup_epochs"),
            clip_len: self.get_usize("rf.clip_len"),
            channels: self.get_usize_list("rf.channels"),
            embedding_dim: self.get_usize("rf.embedding_dim"),
            roi_out: (self.get_usize("rf.roi_h"), self.get_usize("rf.roi_w")),
            jitter_m: self.get_f64("rf.jitter_m") as f32,
            window_s: self.get_f64("rf.window_s") as f32,
            mask,
            loss: LossConfig {
                temperature: self.get_f64("rf.temperature"),
                lambda1: self.get_f64("rf.lambda1"),
                lambda2: self.get_f64("rf.lambda2"),
            },
            optimizer: OptimizerConfig {
                kind: OptimKind::Adam,
                lr: self.get_f64("rf.lr"),
                weight_decay: self.get_f64("rf.weight_decay"),
                momentum: 0.9,
                decay_epochs: vec![],
                decay_factor: 0.1,
            },
            seed: self.get_u64("seed"),
        })
    }
}

/// Resolves a config from an optional file plus `key=value` overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::defaults();
    if let Some(p) = path {
        if !p.exists() {
            return Err(RclError::NotFound(format!("config file {}", p.display())));
        }
        cfg.load_file(p)?;
    }
    for item in overrides {
        let Some((k, v)) = item.split_once('=') else {
            return Err(RclError::Config(format!(
                "override `{item}` must have the form key=value"
            )));
        };
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let cfg = RunConfig::defaults();
        assert_eq!(cfg.get_usize("train.epochs"), 200);
        assert_eq!(cfg.get_usize("train.batch_size"), 512);
        assert_eq!(cfg.get_usize("train.warmup_epochs"), 30);
        assert_eq!(cfg.get_f64("optim.lr"), 0.1);
        assert_eq!(cfg.get_f64("optim.weight_decay"), 1e-4);
        assert_eq!(cfg.get_usize_list("optim.decay_epochs"), vec![150, 175]);
        assert_eq!(cfg.get_f64("loss.temperature"), 0.1);
        assert_eq!(cfg.get_f64("loss.lambda1"), 20.0);
        assert_eq!(
            cfg.get_usize_list("model.channels"),
            vec![32, 64, 64, 128, 128, 256]
        );
        let tc = cfg.train_config().unwrap();
        assert_eq!(tc.epochs, 200);
        let rf = cfg.rf_train_config().unwrap();
        assert_eq!(rf.loss.lambda1, 100.0);
        assert_eq!(rf.warmup_epochs, 5);
    }

    #[test]
    fn empty_file_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.cfg");
        std::fs::write(&path, "# nothing here\n\n").unwrap();
        let cfg = parse_config(Some(&path), &[]).unwrap();
        assert_eq!(cfg, RunConfig::defaults());
    }

    #[test]
    fn override_wins_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        std::fs::write(&path, "loss.lambda1 = 7\n").unwrap();
        let cfg = parse_config(Some(&path), &["loss.lambda1=100".to_string()]).unwrap();
        assert_eq!(cfg.get_f64("loss.lambda1"), 100.0);
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let mut cfg = RunConfig::defaults();
        let err = cfg.set("loss.lamda1", "5").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("loss.lambda1"), "{msg}");
    }

    #[test]
    fn type_mismatch_is_config_error() {
        let mut cfg = RunConfig::defaults();
        assert!(cfg.set("train.epochs", "sixty").is_err());
        assert!(cfg.set("aug.crop", "maybe").is_err());
        assert!(cfg.set("optim.decay_epochs", "150,abc").is_err());
    }

    #[test]
    fn resolved_dump_round_trips() {
        let mut cfg = RunConfig::defaults();
        cfg.set("loss.lambda1", "100").unwrap();
        let dump = cfg.resolved();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resolved.cfg");
        std::fs::write(&path, &dump).unwrap();
        let back = parse_config(Some(&path), &[]).unwrap();
        assert_eq!(back, cfg);
    }
}
