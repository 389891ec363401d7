//! Flat `key=value` run configuration for the `train` command.
//!
//! Keys are the model keys of [`ModelConfig`] plus the optimization, data
//! and output keys below. Values are merged defaults < file < flags, and the
//! merged result is what gets written next to the run's outputs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use lightformer::pipeline::TrainConfig;
use lightformer::ModelConfig;

use crate::UsageError;

const RUN_KEYS: &[&str] = &[
    "lr",
    "epochs",
    "batch",
    "seq-len",
    "clip-norm",
    "lr-decay",
    "log-interval",
    "eval-batch",
    "train",
    "valid",
    "test",
    "out-dir",
    "threads",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Worker threads for the numeric kernels; 0 lets the runtime decide.
    pub threads: usize,
    /// Keys assigned by a file or flag rather than left at their default.
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            train_path: None,
            valid_path: None,
            test_path: None,
            out_dir: PathBuf::from("runs/latest"),
            threads: 0,
            explicit: BTreeSet::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, UsageError> {
    value.parse().map_err(|_| UsageError(format!("invalid value '{value}' for '{key}'")))
}

/// `none` (or `off`) disables an optional setting.
fn parse_opt(key: &str, value: &str) -> Result<Option<f64>, UsageError> {
    match value {
        "none" | "off" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |v| v.to_string())
}

fn fmt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(String::new, |p| p.display().to_string())
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), UsageError> {
        let value = value.trim();
        match key {
            "lr" => self.train.lr = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch" => self.train.batch_size = parse(key, value)?,
            "seq-len" => self.train.seq_len = parse(key, value)?,
            "clip-norm" => self.train.clip_norm = parse_opt(key, value)?,
            "lr-decay" => self.train.lr_decay = parse_opt(key, value)?,
            "log-interval" => self.train.log_interval = parse(key, value)?,
            "eval-batch" => self.train.eval_batch = parse(key, value)?,
            "train" => self.train_path = path(value),
            "valid" => self.valid_path = path(value),
            "test" => self.test_path = path(value),
            "out-dir" => self.out_dir = PathBuf::from(value),
            "threads" => self.threads = parse(key, value)?,
            k if ModelConfig::is_key(k) => self.model.set(k, value).map_err(|e| UsageError(e.to_string()))?,
            other => return Err(UsageError(format!("unknown config key '{other}'"))),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Applies a config file: `key=value` lines, blank lines and `#` comments ignored.
    pub fn apply_file(&mut self, text: &str) -> Result<(), UsageError> {
        for (number, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                UsageError(format!("config line {}: expected key=value, got '{line}'", number + 1))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| UsageError(format!("config line {}: {}", number + 1, e.0)))?;
        }
        Ok(())
    }

    /// Checks everything that can be checked without reading the corpora.
    pub fn validate(&self) -> Result<(), UsageError> {
        let wrap = |e: lightformer::Error| UsageError(e.to_string());
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        if self.model.layers == 0 {
            return Err(UsageError("layers must be at least 1".into()));
        }
        if self.train.seq_len > self.model.max_len {
            return Err(UsageError(format!(
                "seq-len {} exceeds max-len {}",
                self.train.seq_len, self.model.max_len
            )));
        }
        if self.train_path.is_none() || self.valid_path.is_none() {
            return Err(UsageError("both 'train' and 'valid' corpus paths are required".into()));
        }
        Ok(())
    }

    /// Every key with its effective value, model keys first.
    pub fn to_text(&self) -> String {
        let mut out = self.model.to_kv();
        let t = &self.train;
        let values = [
            t.lr.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.seq_len.to_string(),
            fmt_opt(t.clip_norm),
            fmt_opt(t.lr_decay),
            t.log_interval.to_string(),
            t.eval_batch.to_string(),
            fmt_path(&self.train_path),
            fmt_path(&self.valid_path),
            fmt_path(&self.test_path),
            self.out_dir.display().to_string(),
            self.threads.to_string(),
        ];
        for (key, value) in RUN_KEYS.iter().zip(values) {
            let _ = writeln!(out, "{key}={value}");
        }
        out
    }
}
