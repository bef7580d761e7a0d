//! Run configuration: training hyperparameters plus paths, perturbations
//! and sweep lists, layered as defaults < config file < `WDM_SEED` < flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use wdm_core::config::{parse_kv_text, TrainConfig, TRAIN_KEYS};
use wdm_core::evaluation::DEFAULT_LENGTH_EDGES;
use wdm_core::{Error, Result};

pub const SEED_ENV: &str = "WDM_SEED";

/// Keys accepted in addition to the training keys, in the `[run]` section.
pub const RUN_KEYS: &[&str] = &[
    "corpus",
    "noise",
    "portion",
    "noise_values",
    "portion_values",
    "batch_values",
    "length_edges",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub corpus: Option<PathBuf>,
    /// Fraction of extra random items injected into each training prefix.
    pub noise: f64,
    /// Fraction of users kept for training and evaluation.
    pub portion: f64,
    pub noise_values: Vec<f64>,
    pub portion_values: Vec<f64>,
    pub batch_values: Vec<usize>,
    pub length_edges: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            corpus: None,
            noise: 0.0,
            portion: 1.0,
            noise_values: (0..10).map(|i| f64::from(i) / 10.0).collect(),
            portion_values: (1..=5).map(|i| f64::from(i) / 5.0).collect(),
            batch_values: vec![16, 32, 64, 128, 256],
            length_edges: DEFAULT_LENGTH_EDGES.to_vec(),
        }
    }
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("cannot parse `{s}` in `{key}`")))
        })
        .collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn number(key: &str, value: &str) -> Result<f64> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}

impl RunConfig {
    pub fn is_key(key: &str) -> bool {
        TrainConfig::is_key(key) || RUN_KEYS.contains(&key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "corpus" => self.corpus = Some(PathBuf::from(value.trim())),
            "noise" => self.noise = number(key, value)?,
            "portion" => self.portion = number(key, value)?,
            "noise_values" => self.noise_values = list(key, value)?,
            "portion_values" => self.portion_values = list(key, value)?,
            "batch_values" => self.batch_values = list(key, value)?,
            "length_edges" => self.length_edges = list(key, value)?,
            _ => self.train.set(key, value)?,
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "corpus" => self.corpus.as_ref()?.display().to_string(),
            "noise" => self.noise.to_string(),
            "portion" => self.portion.to_string(),
            "noise_values" => join(&self.noise_values),
            "portion_values" => join(&self.portion_values),
            "batch_values" => join(&self.batch_values),
            "length_edges" => join(&self.length_edges),
            _ => return self.train.get(key),
        })
    }

    /// Layer a config file, the seed variable and explicit overrides on top
    /// of the defaults.
    pub fn resolve(file: Option<&Path>, seed_env: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        if let Some(seed) = seed_env {
            cfg.set("seed", seed)
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{seed}` is not an unsigned integer")))?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv_text(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 1]", self.noise)));
        }
        if !(self.portion > 0.0 && self.portion <= 1.0) {
            return Err(Error::Config(format!("portion {} outside (0, 1]", self.portion)));
        }
        if self.noise_values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("noise_values must lie in [0, 1]".into()));
        }
        if self.portion_values.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
            return Err(Error::Config("portion_values must lie in (0, 1]".into()));
        }
        if self.batch_values.contains(&0) {
            return Err(Error::Config("batch_values must be positive".into()));
        }
        if self.length_edges.is_empty() || self.length_edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("length_edges must be non-empty and increasing".into()));
        }
        Ok(())
    }

    pub fn corpus_path(&self) -> Result<&Path> {
        self.corpus
            .as_deref()
            .ok_or_else(|| Error::Config("no corpus given (use --corpus or `corpus =` in the config)".into()))
    }

    /// Complete text form; parsing it back yields the same configuration.
    pub fn to_text(&self) -> String {
        let mut out = self.train.to_kv_text();
        out.push_str("[run]\n");
        for key in RUN_KEYS {
            if let Some(v) = self.get(key) {
                let _ = writeln!(out, "{key} = {v}");
            }
        }
        out
    }
}

/// Every key that can appear as a `--key value` flag.
pub fn all_keys() -> impl Iterator<Item = &'static str> {
    TRAIN_KEYS
        .iter()
        .flat_map(|(_, keys)| keys.iter().copied())
        .chain(RUN_KEYS.iter().copied())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "[train]\nseed = 5\nbatch_size = 8\n[run]\nnoise = 0.2\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), Some("9"), &[("batch_size".into(), "4".into())]).unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.noise, 0.2);
        let flag = RunConfig::resolve(Some(&path), Some("9"), &[("seed".into(), "1".into())]).unwrap();
        assert_eq!(flag.train.seed, 1);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("corpus", "data/x.corpus").unwrap();
        cfg.set("batch_values", "4,8").unwrap();
        cfg.set("dim", "12").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::resolve(None, Some("x"), &[]).is_err());
        assert!(RunConfig::resolve(None, None, &[("noise".into(), "2".into())]).is_err());
        assert!(RunConfig::resolve(None, None, &[("bogus".into(), "1".into())]).is_err());
    }
}
