use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::patterns::{PatternKind, PatternSpec};

/// Architecture hyperparameters of a [`LightTransformerLm`](super::LightTransformerLm).
///
/// Defaults follow the 3-layer recipe: width 320, 16 heads, feed-forward
/// width 2000, segments of 70 tokens, dropout 0.4.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
    /// Rows of the positional table; the longest sequence the model accepts.
    pub max_len: usize,
    pub dropout: f64,
    /// Deviation of the truncated-normal weight initialization.
    pub init_std: f64,
    pub ln_eps: f64,
    pub pattern: PatternSpec,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 10_000,
            d_model: 320,
            d_ff: 2000,
            heads: 16,
            layers: 3,
            max_len: 70,
            dropout: 0.4,
            init_std: 0.02,
            ln_eps: 1e-5,
            pattern: PatternSpec::full(),
            seed: 1,
        }
    }
}

const KEYS: &[&str] = &[
    "vocab-size",
    "dmodel",
    "dff",
    "heads",
    "layers",
    "max-len",
    "dropout",
    "init-std",
    "ln-eps",
    "pattern",
    "k",
    "d-base",
    "b",
    "m",
    "seed",
];

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab-size", self.vocab_size),
            ("dmodel", self.d_model),
            ("dff", self.d_ff),
            ("heads", self.heads),
            ("max-len", self.max_len),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dmodel {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!("init-std {} must be finite and non-negative", self.init_std)));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::Config(format!("ln-eps {} must be positive", self.ln_eps)));
        }
        self.pattern.validate()
    }

    /// `key=value` lines, one per field, in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key}={}", self.get(key).expect("known key"));
        }
        out
    }

    /// Parses the output of [`ModelConfig::to_kv`]. Every key must be present.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut config = ModelConfig::default();
        let mut seen = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed config line '{line}'")))?;
            config.set(key.trim(), value.trim())?;
            seen.push(key.trim().to_string());
        }
        if let Some(missing) = KEYS.iter().find(|k| !seen.iter().any(|s| s == *k)) {
            return Err(Error::Config(format!("config is missing '{missing}'")));
        }
        Ok(config)
    }

    pub fn is_key(key: &str) -> bool {
        KEYS.contains(&key)
    }

    fn get(&self, key: &str) -> Option<String> {
        let p = &self.pattern;
        Some(match key {
            "vocab-size" => self.vocab_size.to_string(),
            "dmodel" => self.d_model.to_string(),
            "dff" => self.d_ff.to_string(),
            "heads" => self.heads.to_string(),
            "layers" => self.layers.to_string(),
            "max-len" => self.max_len.to_string(),
            "dropout" => self.dropout.to_string(),
            "init-std" => self.init_std.to_string(),
            "ln-eps" => self.ln_eps.to_string(),
            "pattern" => p.kind.to_string(),
            "k" => p.filter_size.to_string(),
            "d-base" => p.dilation_base.to_string(),
            "b" => p.base_window.to_string(),
            "m" => p.cardinal.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// Assigns one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
        }
        match key {
            "vocab-size" => self.vocab_size = parse(key, value)?,
            "dmodel" => self.d_model = parse(key, value)?,
            "dff" => self.d_ff = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "max-len" => self.max_len = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "init-std" => self.init_std = parse(key, value)?,
            "ln-eps" => self.ln_eps = parse(key, value)?,
            "pattern" => self.pattern.kind = value.parse::<PatternKind>()?,
            "k" => self.pattern.filter_size = parse(key, value)?,
            "d-base" => self.pattern.dilation_base = parse(key, value)?,
            "b" => self.pattern.base_window = parse(key, value)?,
            "m" => self.pattern.cardinal = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown model key '{other}'"))),
        }
        Ok(())
    }
}
