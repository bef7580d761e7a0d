//! Training configuration and its flat `key = value` text form.
//!
//! ```text
//! [model]
//! dim = 32
//! layers = 2
//!
//! [augment]
//! ops = crop,mask,reorder
//! ```
//!
//! Section headers only group keys for readability; every key is unique.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentOp, AugmentationPolicy};
use crate::encoder::{EncoderConfig, VarianceAggregation};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastiveLoss {
    /// InfoNCE with negative squared 2-Wasserstein logits.
    Wdm,
    /// InfoNCE with cosine logits over `[mean ; variance]`.
    Cosine,
    None,
}

impl ContrastiveLoss {
    pub fn name(self) -> &'static str {
        match self {
            ContrastiveLoss::Wdm => "wdm",
            ContrastiveLoss::Cosine => "cosine",
            ContrastiveLoss::None => "none",
        }
    }
}

impl std::str::FromStr for ContrastiveLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wdm" => Ok(Self::Wdm),
            "cosine" => Ok(Self::Cosine),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown cl_loss `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    /// Inner width of the feed-forward layers; `0` means `dim`.
    pub ffn_dim: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub beta: f64,
    pub lambda: f64,
    pub pvn_margin: f64,
    pub tau: f64,
    pub cl_loss: ContrastiveLoss,
    pub variance_aggregation: VarianceAggregation,
    pub augmentation: AugmentationPolicy,
    pub correlation_k: usize,
    pub seed: u64,
    pub patience: usize,
    pub max_epochs: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Exclude each user's training items from the ranked candidates.
    pub exclude_history: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            layers: 1,
            heads: 1,
            max_len: 50,
            ffn_dim: 0,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            dropout: 0.3,
            batch_size: 256,
            beta: 0.1,
            lambda: 0.1,
            pvn_margin: 0.5,
            tau: 1.0,
            cl_loss: ContrastiveLoss::Wdm,
            variance_aggregation: VarianceAggregation::Squared,
            augmentation: AugmentationPolicy::default(),
            correlation_k: 10,
            seed: 42,
            patience: 50,
            max_epochs: 500,
            grad_clip: 5.0,
            exclude_history: false,
        }
    }
}

/// Every key accepted by [`TrainConfig::set`], grouped by section.
pub const TRAIN_KEYS: [(&str, &[&str]); 4] = [
    ("model", &["dim", "layers", "heads", "max_len", "ffn_dim", "dropout", "variance_aggregation"]),
    (
        "train",
        &[
            "learning_rate",
            "weight_decay",
            "batch_size",
            "beta",
            "lambda",
            "pvn_margin",
            "tau",
            "cl_loss",
            "seed",
            "patience",
            "max_epochs",
            "grad_clip",
        ],
    ),
    (
        "augment",
        &[
            "ops",
            "crop_ratio",
            "mask_ratio",
            "reorder_ratio",
            "substitute_rate",
            "insert_rate",
            "short_threshold",
            "correlation_k",
        ],
    ),
    ("eval", &["exclude_history"]),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn encoder_config(&self, item_count: usize) -> EncoderConfig {
        EncoderConfig {
            item_count,
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            max_len: self.max_len,
            ffn_dim: if self.ffn_dim == 0 { self.dim } else { self.ffn_dim },
            dropout: self.dropout,
            variance_aggregation: self.variance_aggregation,
        }
    }

    pub fn is_key(key: &str) -> bool {
        TRAIN_KEYS.iter().any(|(_, keys)| keys.contains(&key))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let aug = &mut self.augmentation;
        match key {
            "dim" => self.dim = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "ffn_dim" => self.ffn_dim = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "variance_aggregation" => self.variance_aggregation = value.trim().parse()?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "pvn_margin" => self.pvn_margin = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "cl_loss" => self.cl_loss = value.trim().parse()?,
            "seed" => self.seed = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "ops" => {
                aug.ops = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse::<AugmentOp>)
                    .collect::<Result<_>>()?
            }
            "crop_ratio" => aug.crop_ratio = parse(key, value)?,
            "mask_ratio" => aug.mask_ratio = parse(key, value)?,
            "reorder_ratio" => aug.reorder_ratio = parse(key, value)?,
            "substitute_rate" => aug.substitute_rate = parse(key, value)?,
            "insert_rate" => aug.insert_rate = parse(key, value)?,
            "short_threshold" => aug.short_threshold = parse(key, value)?,
            "correlation_k" => self.correlation_k = parse(key, value)?,
            "exclude_history" => self.exclude_history = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let a = &self.augmentation;
        Some(match key {
            "dim" => self.dim.to_string(),
            "layers" => self.layers.to_string(),
            "heads" => self.heads.to_string(),
            "max_len" => self.max_len.to_string(),
            "ffn_dim" => self.ffn_dim.to_string(),
            "dropout" => self.dropout.to_string(),
            "variance_aggregation" => match self.variance_aggregation {
                VarianceAggregation::Squared => "squared".into(),
                VarianceAggregation::Linear => "linear".into(),
            },
            "learning_rate" => self.learning_rate.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "beta" => self.beta.to_string(),
            "lambda" => self.lambda.to_string(),
            "pvn_margin" => self.pvn_margin.to_string(),
            "tau" => self.tau.to_string(),
            "cl_loss" => self.cl_loss.name().into(),
            "seed" => self.seed.to_string(),
            "patience" => self.patience.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "ops" => a.ops.iter().map(|o| o.name()).collect::<Vec<_>>().join(","),
            "crop_ratio" => a.crop_ratio.to_string(),
            "mask_ratio" => a.mask_ratio.to_string(),
            "reorder_ratio" => a.reorder_ratio.to_string(),
            "substitute_rate" => a.substitute_rate.to_string(),
            "insert_rate" => a.insert_rate.to_string(),
            "short_threshold" => a.short_threshold.to_string(),
            "correlation_k" => self.correlation_k.to_string(),
            "exclude_history" => self.exclude_history.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config(1).validate()?;
        self.augmentation.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate and weight_decay must be non-negative".into()));
        }
        if !(self.beta >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config("beta and lambda must be non-negative".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }

    /// Section-grouped text form accepted by [`parse_kv_text`].
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        for (section, keys) in TRAIN_KEYS {
            let _ = writeln!(out, "[{section}]");
            for key in keys {
                let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
            }
            out.push('\n');
        }
        out
    }
}

/// Parse `key = value` lines with optional `[section]` headers and `#`
/// comments into ordered pairs.
pub fn parse_kv_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
        out.push((key.trim().to_owned(), value.trim().to_owned()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.set("dim", "64").unwrap();
        cfg.set("ops", "mask,crop").unwrap();
        cfg.set("cl_loss", "cosine").unwrap();
        let mut back = TrainConfig::default();
        for (k, v) in parse_kv_text(&cfg.to_kv_text()).unwrap() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_and_bad_value() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("dim", "x").is_err());
        assert!(cfg.set("cl_loss", "kl").is_err());
        assert!(parse_kv_text("dim 3").is_err());
    }

    #[test]
    fn validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        cfg.heads = 2;
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn comments_and_sections() {
        let kv = parse_kv_text("[model]\n# c\ndim = 8 # inline\n\n[train]\nseed=3\n").unwrap();
        assert_eq!(kv, vec![("dim".into(), "8".into()), ("seed".into(), "3".into())]);
    }
}
