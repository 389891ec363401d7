//! `lightformer`: train, evaluate and inspect sparse-attention Transformer
//! language models.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lightformer::patterns::MaskFormat;
use lightformer::{PatternKind, PatternSpec};

/// A problem with the command line or configuration, reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "lightformer", version, about = "Sparse-attention Transformer language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its log, best checkpoint and metrics.
    Train(Box<TrainArgs>),
    /// Report the perplexity of a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Print connection counts, cost bounds and receptive fields of a pattern.
    Analyze(AnalyzeArgs),
    /// Write one layer's attention mask as CSV or PGM.
    DumpMask(DumpMaskArgs),
}

/// Every flag mirrors the config key of the same name and overrides it.
#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Flat key=value config file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Directory for config.txt, train_log.tsv, best.ckpt and metrics.tsv.
    #[arg(long, env = "LIGHTFORMER_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    threads: Option<usize>,
    /// full, dilated, dilated-memory or cascade.
    #[arg(long)]
    pattern: Option<PatternKind>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    d_base: Option<usize>,
    #[arg(long)]
    b: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dmodel: Option<usize>,
    #[arg(long)]
    dff: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Positional table size; follows seq-len unless set.
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    init_std: Option<f64>,
    #[arg(long)]
    ln_eps: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    /// Global gradient-norm limit, or `none`.
    #[arg(long)]
    clip_norm: Option<String>,
    /// Learning-rate factor applied when validation stops improving, or `none`.
    #[arg(long)]
    lr_decay: Option<String>,
    #[arg(long)]
    log_interval: Option<usize>,
    #[arg(long)]
    eval_batch: Option<usize>,
}

impl TrainArgs {
    /// Flag values as `(config key, value)` pairs.
    fn overrides(&self) -> Vec<(&'static str, String)> {
        fn put<T: ToString>(out: &mut Vec<(&'static str, String)>, key: &'static str, v: &Option<T>) {
            if let Some(v) = v {
                out.push((key, v.to_string()));
            }
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut out = Vec::new();
        put(&mut out, "train", &path(&self.train));
        put(&mut out, "valid", &path(&self.valid));
        put(&mut out, "test", &path(&self.test));
        put(&mut out, "out-dir", &path(&self.out_dir));
        put(&mut out, "threads", &self.threads);
        put(&mut out, "pattern", &self.pattern);
        put(&mut out, "k", &self.k);
        put(&mut out, "d-base", &self.d_base);
        put(&mut out, "b", &self.b);
        put(&mut out, "m", &self.m);
        put(&mut out, "layers", &self.layers);
        put(&mut out, "dmodel", &self.dmodel);
        put(&mut out, "dff", &self.dff);
        put(&mut out, "heads", &self.heads);
        put(&mut out, "max-len", &self.max_len);
        put(&mut out, "vocab-size", &self.vocab_size);
        put(&mut out, "dropout", &self.dropout);
        put(&mut out, "init-std", &self.init_std);
        put(&mut out, "ln-eps", &self.ln_eps);
        put(&mut out, "seed", &self.seed);
        put(&mut out, "lr", &self.lr);
        put(&mut out, "epochs", &self.epochs);
        put(&mut out, "batch", &self.batch);
        put(&mut out, "seq-len", &self.seq_len);
        put(&mut out, "clip-norm", &self.clip_norm);
        put(&mut out, "lr-decay", &self.lr_decay);
        put(&mut out, "log-interval", &self.log_interval);
        put(&mut out, "eval-batch", &self.eval_batch);
        out
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Segment length; defaults to the model's positional table size.
    #[arg(long)]
    seq_len: Option<usize>,
    /// Build the vocabulary from this corpus instead of the checkpoint's.
    #[arg(long)]
    vocab_from: Option<PathBuf>,
    /// Segments per forward pass; does not change the result.
    #[arg(long, default_value_t = 16)]
    eval_batch: usize,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args, Debug, Clone, Copy)]
pub struct PatternArgs {
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    d_base: usize,
    #[arg(long, default_value_t = 4)]
    b: usize,
    #[arg(long, default_value_t = 2)]
    m: usize,
}

impl PatternArgs {
    fn spec(&self, kind: PatternKind) -> PatternSpec {
        PatternSpec {
            kind,
            filter_size: self.k,
            dilation_base: self.d_base,
            base_window: self.b,
            cardinal: self.m,
        }
    }
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Analyze only this pattern; all four when omitted.
    #[arg(long)]
    pattern: Option<PatternKind>,
    #[command(flatten)]
    spec: PatternArgs,
    #[arg(long, default_value_t = 70)]
    n: usize,
    /// Hidden width used in the cost formulas.
    #[arg(long, default_value_t = 320)]
    h: usize,
    #[arg(long, default_value_t = 3)]
    layers: usize,
    /// Feed-forward width; adds parameter counts to the report.
    #[arg(long)]
    dff: Option<usize>,
    #[arg(long, default_value_t = 16)]
    heads: usize,
    #[arg(long, default_value_t = 10_000)]
    vocab_size: usize,
}

#[derive(Args, Debug)]
pub struct DumpMaskArgs {
    #[arg(long, default_value = "full")]
    pattern: PatternKind,
    #[command(flatten)]
    spec: PatternArgs,
    /// 0-based layer index.
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, default_value_t = 70)]
    n: usize,
    /// csv or pgm.
    #[arg(long, default_value = "csv")]
    format: MaskFormat,
    /// Write here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<lightformer::Error>() {
        Some(lightformer::Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => commands::train(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Analyze(args) => commands::analyze(&args),
        Command::DumpMask(args) => commands::dump_mask(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
