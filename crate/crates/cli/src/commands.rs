use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lightformer::model::load_checkpoint;
use lightformer::patterns::{
    complexity_report, parameter_count, receptive_field, write_csv, write_pgm, MaskFormat,
};
use lightformer::pipeline::{
    build_vocab, evaluate_perplexity_batched, train as run_training, BatchStream, LogRecord, Vocabulary,
};
use lightformer::{build_mask, Error, LightTransformerLm, ModelConfig, PatternKind};

use crate::config::RunConfig;
use crate::{AnalyzeArgs, DumpMaskArgs, EvalArgs, TrainArgs, UsageError};

pub const METRICS_HEADER: &str = "pattern\tlayers\tdmodel\tdff\theads\tparams\tval_ppl\ttest_ppl";

fn init_threads(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().context("starting worker threads")
}

fn read_corpus(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn resolve_config(args: &TrainArgs) -> Result<RunConfig, UsageError> {
    let mut config = RunConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("reading config {}: {e}", path.display())))?;
        config.apply_file(&text)?;
    }
    for (key, value) in args.overrides() {
        config.set(key, &value)?;
    }
    if !config.is_explicit("max-len") {
        config.model.max_len = config.train.seq_len;
    }
    config.validate()?;
    Ok(config)
}

/// Files a run has created so far, removed again if setup fails.
struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Outputs { dir: dir.to_path_buf(), created_dir, files: Vec::new() })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(path);
        Ok(())
    }

    fn remove(self) {
        for file in &self.files {
            let _ = fs::remove_file(file);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

/// Data-dependent configuration checks that need the corpora.
fn check_data(
    config: &RunConfig,
    vocab: &Vocabulary,
    train_ids: &[usize],
    valid_ids: &[usize],
) -> Result<(), UsageError> {
    if config.is_explicit("vocab-size") && config.model.vocab_size != vocab.len() {
        return Err(UsageError(format!(
            "vocab-size is {} but the training corpus has {} tokens",
            config.model.vocab_size,
            vocab.len()
        )));
    }
    BatchStream::new(train_ids, config.train.batch_size, config.train.seq_len)
        .map_err(|e| UsageError(format!("training corpus: {e}")))?;
    if valid_ids.len() < 2 {
        return Err(UsageError("validation corpus needs at least two tokens".into()));
    }
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut config = resolve_config(args)?;
    init_threads(config.threads)?;
    let train_text = read_corpus(config.train_path.as_deref().expect("validated"))?;
    let valid_text = read_corpus(config.valid_path.as_deref().expect("validated"))?;
    let test_text = config.test_path.as_deref().map(read_corpus).transpose()?;

    let vocab = build_vocab(&train_text).context("building the vocabulary")?;
    let train_ids = vocab.encode(&train_text);
    let valid_ids = vocab.encode(&valid_text);
    let test_ids = test_text.map(|t| vocab.encode(&t));
    let vocab_matches = !config.is_explicit("vocab-size") || config.model.vocab_size == vocab.len();
    if vocab_matches {
        config.model.vocab_size = vocab.len();
    }

    let mut outputs = Outputs::create(&config.out_dir)?;
    outputs.write("config.txt", &config.to_text())?;
    if let Err(err) = check_data(&config, &vocab, &train_ids, &valid_ids) {
        outputs.remove();
        return Err(err.into());
    }

    let model = LightTransformerLm::new(config.model.clone())?;
    let log_path = config.out_dir.join("train_log.tsv");
    let mut log_file =
        BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    writeln!(log_file, "{}", LogRecord::TSV_HEADER)?;
    println!("{}", LogRecord::TSV_HEADER);

    let mut train_cfg = config.train.clone();
    train_cfg.seed = config.model.seed;
    train_cfg.checkpoint = Some(config.out_dir.join("best.ckpt"));
    train_cfg.vocab = Some(vocab.tokens().to_vec());
    let mut write_error = None;
    let outcome = run_training(&model, &train_ids, &valid_ids, &train_cfg, &mut |record| {
        let line = record.to_tsv();
        println!("{line}");
        if let Err(e) = writeln!(log_file, "{line}").and_then(|_| log_file.flush()) {
            write_error.get_or_insert(e);
        }
    });
    if let Some(e) = write_error {
        return Err(e).context("writing the training log");
    }
    let log = match outcome {
        Ok(log) => log,
        Err(err @ Error::Divergence { .. }) => {
            if train_cfg.clip_norm.is_none() {
                eprintln!("warning: training diverged; consider gradient clipping, e.g. --clip-norm 0.25");
            }
            return Err(err.into());
        }
        Err(err) => return Err(err.into()),
    };

    let val_ppl = log.best_valid_ppl.context("no validation perplexity was recorded")?;
    let test_ppl = match &test_ids {
        Some(ids) => Some(evaluate_perplexity_batched(&model, ids, train_cfg.seq_len, train_cfg.eval_batch)?),
        None => None,
    };
    let m = &config.model;
    let params = parameter_count(m).total;
    let row = format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{:.4}\t{}",
        m.pattern.kind,
        m.layers,
        m.d_model,
        m.d_ff,
        m.heads,
        params,
        val_ppl,
        test_ppl.map_or_else(|| "NA".to_string(), |p| format!("{p:.4}"))
    );
    fs::write(config.out_dir.join("metrics.tsv"), format!("{METRICS_HEADER}\n{row}\n"))
        .context("writing metrics.tsv")?;
    eprintln!(
        "{} model, {params} parameters: best validation perplexity {val_ppl:.2} (epoch {}){}",
        m.pattern.kind,
        log.best_epoch.unwrap_or(0),
        test_ppl.map_or_else(String::new, |p| format!(", test perplexity {p:.2}"))
    );
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    init_threads(args.threads)?;
    let checkpoint = load_checkpoint(&args.checkpoint, None)?;
    let model = checkpoint.model;
    let text = read_corpus(&args.corpus)?;
    let vocab = match (&args.vocab_from, checkpoint.vocab) {
        (Some(path), _) => build_vocab(&read_corpus(path)?)?,
        (None, Some(tokens)) => Vocabulary::from_tokens(tokens)?,
        (None, None) => build_vocab(&text)?,
    };
    let expected = model.config().vocab_size;
    if vocab.len() != expected {
        return Err(UsageError(format!(
            "vocabulary has {} tokens but the checkpoint expects {expected}",
            vocab.len()
        ))
        .into());
    }
    let max_len = model.config().max_len;
    let seq_len = args.seq_len.unwrap_or(max_len);
    if seq_len == 0 || seq_len > max_len {
        return Err(UsageError(format!("seq-len must lie in 1..={max_len}")).into());
    }
    let ids = vocab.encode(&text);
    let ppl = evaluate_perplexity_batched(&model, &ids, seq_len, args.eval_batch)?;
    println!("ppl\t{ppl}");
    let c = model.config();
    eprintln!(
        "{}: {} layers of {} ({} pattern), {} scored tokens in segments of {seq_len}, perplexity {ppl:.3}",
        args.checkpoint.display(),
        c.layers,
        c.d_model,
        c.pattern.kind,
        ids.len() - 1
    );
    Ok(())
}

fn describe_layers(config_kind: PatternKind, spec: &lightformer::PatternSpec, layers: usize) -> Vec<String> {
    (0..layers)
        .map(|l| match config_kind {
            PatternKind::Full => format!("# layer {l}: all previous positions"),
            PatternKind::Dilated => {
                format!("# layer {l}: {} taps, dilation {}", spec.filter_size, spec.dilation(l))
            }
            PatternKind::DilatedMemory if l == 0 => {
                format!("# layer {l}: {} taps, dilation {}", spec.filter_size, spec.dilation(l))
            }
            PatternKind::DilatedMemory => format!(
                "# layer {l}: {} taps, dilations {} and {}",
                spec.filter_size,
                spec.dilation(l),
                spec.dilation(l - 1)
            ),
            PatternKind::Cascade => format!("# layer {l}: window {}", spec.window(l)),
        })
        .collect()
}

const FORMULAS: [(PatternKind, &str); 4] = [
    (PatternKind::Full, "O(n^2 h)"),
    (PatternKind::Dilated, "O(n k h)"),
    (PatternKind::DilatedMemory, "O(n k c h)"),
    (PatternKind::Cascade, "O(n b m^l h)"),
];

pub fn analyze(args: &AnalyzeArgs) -> Result<()> {
    if args.n == 0 || args.h == 0 || args.layers == 0 {
        return Err(UsageError("n, h and layers must be at least 1".into()).into());
    }
    let params = match args.dff {
        Some(d_ff) => {
            let model = ModelConfig {
                vocab_size: args.vocab_size,
                d_model: args.h,
                d_ff,
                heads: args.heads,
                layers: args.layers,
                max_len: args.n,
                ..ModelConfig::default()
            };
            model.validate()?;
            Some(parameter_count(&model))
        }
        None => None,
    };
    let kinds: Vec<PatternKind> = match args.pattern {
        Some(kind) => vec![kind],
        None => PatternKind::ALL.to_vec(),
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for kind in kinds {
        let spec = args.spec.spec(kind);
        let report = complexity_report(&spec, args.n, args.h, args.layers, params)?;
        writeln!(out, "# pattern {kind}, n={} h={} layers={}", args.n, args.h, args.layers)?;
        for line in describe_layers(kind, &spec, args.layers) {
            writeln!(out, "{line}")?;
        }
        write!(out, "{}", report.to_tsv())?;
        let coverage = receptive_field(&spec, args.layers, args.n)?;
        writeln!(
            out,
            "# receptive field of position {}: {} of {} positions",
            args.n - 1,
            coverage[args.n - 1],
            args.n
        )?;
        writeln!(out)?;
    }
    writeln!(out, "# cost per block, instantiated per layer (c = 1 at layer 0, 2 above)")?;
    for (kind, formula) in FORMULAS {
        let report = complexity_report(&args.spec.spec(kind), args.n, args.h, args.layers, None)?;
        let bounds: Vec<String> = report.layers.iter().map(|l| l.symbolic_bound.to_string()).collect();
        writeln!(out, "# {kind}\t{formula}\t{}", bounds.join(","))?;
    }
    Ok(())
}

pub fn dump_mask(args: &DumpMaskArgs) -> Result<()> {
    let mask = build_mask(&args.spec.spec(args.pattern), args.layer, args.n)?;
    let mut sink: Box<dyn Write> = match &args.output {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    match args.format {
        MaskFormat::Csv => write_csv(&mask, &mut sink)?,
        MaskFormat::Pgm => write_pgm(&mask, &mut sink)?,
    }
    sink.flush()?;
    Ok(())
}
