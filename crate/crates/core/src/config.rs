//! Run configuration: flat `key = value` text with strict validation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::guidance::Head;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    Duplicate { line: usize, key: String },
    #[error("{key}: cannot parse {value:?}")]
    Value { key: String, value: String },
    #[error("{key}: {detail}")]
    Range { key: &'static str, detail: String },
    #[error("environment variable {var}: cannot parse {value:?}")]
    Env { var: &'static str, value: String },
}

/// Which mechanism a run removes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Ablation {
    #[default]
    Full,
    NoCcm,
    NoGuidance,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoCcm, Ablation::NoGuidance];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoCcm => "no_ccm",
            Ablation::NoGuidance => "no_guidance",
        }
    }
}

impl FromStr for Ablation {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        Self::ALL.into_iter().find(|a| a.as_str() == s).ok_or(())
    }
}

impl FromStr for Head {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "linear" => Ok(Head::Linear),
            "tanh" => Ok(Head::Tanh),
            _ => Err(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Training set file; `None` generates `dataset_size` scenes from the seed.
    pub dataset: Option<PathBuf>,
    pub dataset_size: usize,
    pub test_seed: u64,
    pub test_size: usize,
    pub d: usize,
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub tau: f64,
    pub lambda: f64,
    pub sigma2: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lora: bool,
    pub lora_rank: usize,
    pub ablation: Ablation,
    pub hidden: usize,
    pub enc_hidden: usize,
    pub noise_draws: usize,
    pub posterior_variance: bool,
    pub head: Head,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    /// Checkpoint whose matching parameters seed this run.
    pub init_ckpt: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: None,
            dataset_size: 2000,
            test_seed: 999,
            test_size: 200,
            d: 16,
            t_steps: 50,
            beta_start: 1e-3,
            beta_end: 0.2,
            tau: 0.07,
            lambda: 1.0,
            sigma2: 0.01,
            lr: 1e-3,
            batch_size: 32,
            epochs: 30,
            lora: false,
            lora_rank: 2,
            ablation: Ablation::Full,
            hidden: 512,
            enc_hidden: 128,
            noise_draws: 4,
            posterior_variance: false,
            head: Head::Tanh,
            threads: 0,
            init_ckpt: None,
        }
    }
}

pub const KEYS: [&str; 25] = [
    "seed",
    "dataset",
    "dataset_size",
    "test_seed",
    "test_size",
    "d",
    "t_steps",
    "beta_start",
    "beta_end",
    "tau",
    "lambda",
    "sigma2",
    "lr",
    "batch_size",
    "epochs",
    "lora",
    "lora_rank",
    "ablation",
    "hidden",
    "enc_hidden",
    "noise_draws",
    "posterior_variance",
    "head",
    "threads",
    "init_ckpt",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_switch(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.to_string(),
            value: value.to_string(),
        }),
    }
}

fn path_or_none(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "dataset" => self.dataset = path_or_none(v),
            "dataset_size" => self.dataset_size = parse(key, v)?,
            "test_seed" => self.test_seed = parse(key, v)?,
            "test_size" => self.test_size = parse(key, v)?,
            "d" => self.d = parse(key, v)?,
            "t_steps" => self.t_steps = parse(key, v)?,
            "beta_start" => self.beta_start = parse(key, v)?,
            "beta_end" => self.beta_end = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "sigma2" => self.sigma2 = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lora" => self.lora = parse_switch(key, v)?,
            "lora_rank" => self.lora_rank = parse(key, v)?,
            "ablation" => self.ablation = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "enc_hidden" => self.enc_hidden = parse(key, v)?,
            "noise_draws" => self.noise_draws = parse(key, v)?,
            "posterior_variance" => self.posterior_variance = parse_switch(key, v)?,
            "head" => self.head = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "init_ckpt" => self.init_ckpt = path_or_none(v),
            _ => unreachable!("key list and setter disagree on {key}"),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let switch = |b: bool| if b { "on" } else { "off" }.to_string();
        match key {
            "seed" => self.seed.to_string(),
            "dataset" => path_text(&self.dataset),
            "dataset_size" => self.dataset_size.to_string(),
            "test_seed" => self.test_seed.to_string(),
            "test_size" => self.test_size.to_string(),
            "d" => self.d.to_string(),
            "t_steps" => self.t_steps.to_string(),
            "beta_start" => self.beta_start.to_string(),
            "beta_end" => self.beta_end.to_string(),
            "tau" => self.tau.to_string(),
            "lambda" => self.lambda.to_string(),
            "sigma2" => self.sigma2.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "lora" => switch(self.lora),
            "lora_rank" => self.lora_rank.to_string(),
            "ablation" => self.ablation.as_str().to_string(),
            "hidden" => self.hidden.to_string(),
            "enc_hidden" => self.enc_hidden.to_string(),
            "noise_draws" => self.noise_draws.to_string(),
            "posterior_variance" => switch(self.posterior_variance),
            "head" => self.head.as_str().to_string(),
            "threads" => self.threads.to_string(),
            "init_ckpt" => path_text(&self.init_ckpt),
            _ => unreachable!(),
        }
    }

    /// Parses config text; missing keys keep their defaults. Validates ranges.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: raw.to_string(),
            })?;
            let (k, v) = (k.trim(), v.trim());
            let key = *KEYS
                .iter()
                .find(|&&key| key == k)
                .ok_or_else(|| ConfigError::UnknownKey { line, key: k.to_string() })?;
            if seen.contains(&key) {
                return Err(ConfigError::Duplicate { line, key: k.to_string() });
            }
            seen.push(key);
            cfg.set(key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a file and applies `VLAD_SEED` / `VLAD_THREADS` from the process environment.
    pub fn load(path: impl AsRef<Path>) -> crate::error::Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| crate::error::Error::io(path.as_ref(), e))?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = lookup("VLAD_SEED") {
            self.seed = v.trim().parse().map_err(|_| ConfigError::Env {
                var: "VLAD_SEED",
                value: v,
            })?;
        }
        if let Some(v) = lookup("VLAD_THREADS") {
            self.threads = v.trim().parse().map_err(|_| ConfigError::Env {
                var: "VLAD_THREADS",
                value: v,
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let range = |key: &'static str, ok: bool, detail: String| if ok { Ok(()) } else { Err(ConfigError::Range { key, detail }) };
        range("d", (1..=256).contains(&self.d), format!("must lie in 1..=256, got {}", self.d))?;
        range(
            "t_steps",
            (1..=10_000).contains(&self.t_steps),
            format!("must lie in 1..=10000, got {}", self.t_steps),
        )?;
        range(
            "beta_start",
            0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0,
            format!("need 0 < beta_start <= beta_end < 1, got ({}, {})", self.beta_start, self.beta_end),
        )?;
        range(
            "tau",
            self.tau > 0.0 && self.tau.is_finite(),
            format!("must be positive, got {}", self.tau),
        )?;
        range(
            "lambda",
            self.lambda >= 0.0 && self.lambda.is_finite(),
            format!("must be non-negative, got {}", self.lambda),
        )?;
        range(
            "sigma2",
            self.sigma2 >= 0.0 && self.sigma2.is_finite(),
            format!("must be non-negative, got {}", self.sigma2),
        )?;
        range("lr", self.lr > 0.0 && self.lr < 1.0, format!("must lie in (0, 1), got {}", self.lr))?;
        range(
            "batch_size",
            self.batch_size >= 2,
            format!("must be at least 2, got {}", self.batch_size),
        )?;
        range(
            "dataset_size",
            self.dataset_size >= self.batch_size,
            format!("must be at least batch_size ({}), got {}", self.batch_size, self.dataset_size),
        )?;
        range(
            "test_size",
            self.test_size >= 2,
            format!("must be at least 2, got {}", self.test_size),
        )?;
        range("epochs", self.epochs >= 1, "must be at least 1".into())?;
        range(
            "lora_rank",
            self.lora_rank >= 1 && self.lora_rank <= self.d,
            format!("must lie in 1..=d ({}), got {}", self.d, self.lora_rank),
        )?;
        range("hidden", self.hidden >= 1, "must be at least 1".into())?;
        range("enc_hidden", self.enc_hidden >= 1, "must be at least 1".into())?;
        range("noise_draws", self.noise_draws >= 1, "must be at least 1".into())?;
        range(
            "threads",
            self.threads <= 1024,
            format!("must be at most 1024, got {}", self.threads),
        )?;
        Ok(())
    }

    /// Canonical text: every key, fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    /// SHA-256 of [`RunConfig::to_text`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn with_ablation(&self, ablation: Ablation) -> Self {
        RunConfig { ablation, ..self.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig {
            seed: 7,
            lora: true,
            ablation: Ablation::NoGuidance,
            beta_end: 0.15,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.hash().len(), 64);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn rejects_unknown_duplicate_and_out_of_range() {
        assert!(matches!(
            RunConfig::parse("bogus = 1"),
            Err(ConfigError::UnknownKey { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("d = 4\nd = 5"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        assert!(matches!(RunConfig::parse("tau = 0"), Err(ConfigError::Range { key: "tau", .. })));
        assert!(matches!(RunConfig::parse("tau = x"), Err(ConfigError::Value { .. })));
        assert!(matches!(RunConfig::parse("tau"), Err(ConfigError::Syntax { .. })));
        assert!(RunConfig::parse("# comment\n\nseed = 3 # trailing\n").is_ok());
    }

    #[test]
    fn env_overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_env(|k| match k {
            "VLAD_SEED" => Some("42".into()),
            "VLAD_THREADS" => Some("3".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!((cfg.seed, cfg.threads), (42, 3));
        assert!(cfg.apply_env(|_| Some("x".into())).is_err());
    }
}
