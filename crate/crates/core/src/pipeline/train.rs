use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use super::batch::make_batches;
use super::eval::evaluate_perplexity_batched;
use crate::autograd::sgd_step;
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, LightTransformerLm, Mode};

/// Optimization settings. Model shape and dropout live in the model config.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Keys the dropout streams.
    pub seed: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Global gradient-norm limit; off when `None`.
    pub clip_norm: Option<f64>,
    /// Multiply the learning rate by this factor whenever validation
    /// perplexity fails to improve; off when `None`.
    pub lr_decay: Option<f64>,
    /// Log the mean training loss every this many steps.
    pub log_interval: usize,
    /// Segments per forward pass during validation.
    pub eval_batch: usize,
    /// Where to write the best-validation checkpoint, if anywhere.
    pub checkpoint: Option<PathBuf>,
    /// Vocabulary stored alongside checkpoints.
    pub vocab: Option<Vec<String>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 10.0,
            epochs: 40,
            seed: 1,
            batch_size: 20,
            seq_len: 70,
            clip_norm: None,
            lr_decay: None,
            log_interval: 100,
            eval_batch: 16,
            checkpoint: None,
            vocab: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.log_interval == 0 || self.eval_batch == 0 {
            return Err(Error::Config(
                "batch, seq-len, log-interval and eval-batch must be at least 1".into(),
            ));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("clip-norm {c} must be positive")));
            }
        }
        if let Some(d) = self.lr_decay {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::Config(format!("lr-decay {d} must lie in (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub ppl: f64,
    pub tokens_per_sec: f64,
}

impl LogRecord {
    pub const TSV_HEADER: &'static str = "step\tepoch\tsplit\tloss\tppl\ttokens_per_sec";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.6}\t{:.4}\t{:.1}",
            self.step, self.epoch, self.split, self.loss, self.ppl, self.tokens_per_sec
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_valid_ppl: Option<f64>,
    pub best_epoch: Option<usize>,
    pub final_lr: f64,
}

/// SGD over independent segments.
///
/// Each epoch walks the lane batches of `train` in order: forward with
/// dropout keyed by `(cfg.seed, site, step)`, mean cross-entropy, backward,
/// update. After every epoch the validation perplexity is measured; the
/// best-scoring weights are checkpointed (when a path is configured) and
/// restored into `model` before returning.
pub fn train(
    model: &LightTransformerLm,
    train_ids: &[usize],
    valid_ids: &[usize],
    cfg: &TrainConfig,
    on_log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainingLog> {
    cfg.validate()?;
    if cfg.seq_len > model.config().max_len {
        return Err(Error::SequenceTooLong { len: cfg.seq_len, max: model.config().max_len });
    }
    let batches = make_batches(train_ids, cfg.batch_size, cfg.seq_len)?;
    let params = model.parameters();
    let mut log = TrainingLog { final_lr: cfg.lr, ..TrainingLog::default() };
    let mut lr = cfg.lr;
    let mut best: Option<Vec<Vec<f64>>> = None;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut interval_loss = 0.0;
        let mut interval_steps = 0usize;
        let mut interval_start = Instant::now();
        for batch in &batches {
            step += 1;
            let mode = Mode::Train { seed: cfg.seed, step: step as u64 };
            let diverged = || Error::Divergence { step, lr };
            let loss = match model.loss(&batch.inputs, &batch.targets, batch.batch, mode) {
                Ok(loss) => loss,
                Err(Error::NonFinite { .. }) => return Err(diverged()),
                Err(e) => return Err(e),
            };
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(diverged());
            }
            loss.backward()?;
            sgd_step(&params, lr, cfg.clip_norm)?;
            log.step_losses.push(value);
            interval_loss += value;
            interval_steps += 1;

            if step.is_multiple_of(cfg.log_interval) {
                let mean = interval_loss / interval_steps as f64;
                let tokens = (interval_steps * batch.inputs.len()) as f64;
                let record = LogRecord {
                    step,
                    epoch,
                    split: Split::Train,
                    loss: mean,
                    ppl: mean.exp(),
                    tokens_per_sec: tokens / interval_start.elapsed().as_secs_f64().max(1e-9),
                };
                on_log(&record);
                log.records.push(record);
                interval_loss = 0.0;
                interval_steps = 0;
                interval_start = Instant::now();
            }
        }

        if valid_ids.len() < 2 {
            continue;
        }
        let started = Instant::now();
        let ppl = evaluate_perplexity_batched(model, valid_ids, cfg.seq_len, cfg.eval_batch)?;
        let record = LogRecord {
            step,
            epoch,
            split: Split::Valid,
            loss: ppl.ln(),
            ppl,
            tokens_per_sec: (valid_ids.len() - 1) as f64 / started.elapsed().as_secs_f64().max(1e-9),
        };
        on_log(&record);
        log.records.push(record);

        if log.best_valid_ppl.is_none_or(|b| ppl < b) {
            log.best_valid_ppl = Some(ppl);
            log.best_epoch = Some(epoch);
            best = Some(model.snapshot());
            if let Some(path) = &cfg.checkpoint {
                save_checkpoint(path, model, cfg.vocab.as_deref())?;
            }
        } else if let Some(decay) = cfg.lr_decay {
            lr *= decay;
        }
    }

    if let Some(best) = best {
        model.restore(&best)?;
    } else if let Some(path) = &cfg.checkpoint {
        save_checkpoint(path, model, cfg.vocab.as_deref())?;
    }
    log.final_lr = lr;
    Ok(log)
}
