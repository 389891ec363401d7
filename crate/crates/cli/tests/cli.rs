use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/tiny").join(name)
}

fn lightformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lightformer"))
        .args(args)
        .env_remove("LIGHTFORMER_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

const SMALL: &[&str] = &[
    "--pattern",
    "cascade",
    "--b",
    "2",
    "--dmodel",
    "16",
    "--dff",
    "32",
    "--heads",
    "2",
    "--layers",
    "2",
    "--seq-len",
    "24",
    "--batch",
    "8",
    "--lr",
    "0.5",
    "--clip-norm",
    "1",
    "--epochs",
    "1",
    "--dropout",
    "0.1",
];

fn train_small(out_dir: &Path, extra: &[&str]) -> Output {
    let (train, valid, test) = (fixture("train.txt"), fixture("valid.txt"), fixture("test.txt"));
    let mut args = vec![
        "train",
        "--train",
        train.to_str().unwrap(),
        "--valid",
        valid.to_str().unwrap(),
        "--test",
        test.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    lightformer(&args)
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = lightformer(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn unsupported_mask_format_is_a_usage_error() {
    let out = lightformer(&["dump-mask", "--format", "png"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_mask_csv_is_lower_triangular() {
    let out = lightformer(&["dump-mask", "--pattern", "full", "--n", "4", "--format", "csv"]);
    assert!(out.status.success());
    assert_eq!(stdout(&out), "1,0,0,0\n1,1,0,0\n1,1,1,0\n1,1,1,1\n");
}

#[test]
fn dilated_second_layer_skips_every_other_position() {
    let out = lightformer(&["dump-mask", "--pattern", "dilated", "--layer", "1", "--n", "8"]);
    let rows: Vec<String> = stdout(&out).lines().map(String::from).collect();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows[7], "0,0,0,1,0,1,0,1");
}

#[test]
fn pgm_dump_to_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mask.pgm");
    let out = lightformer(&[
        "dump-mask",
        "--pattern",
        "cascade",
        "--b",
        "2",
        "--n",
        "3",
        "--format",
        "pgm",
        "--output",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(path).unwrap();
    let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines, ["P2", "3 3", "255", "255 0 0", "255 255 0", "0 255 255"]);
}

fn table_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty() && !l.starts_with("layer"))
        .map(|l| l.split('\t').map(String::from).collect())
        .collect()
}

#[test]
fn analyze_full_reports_the_quadratic_bound() {
    let out = lightformer(&["analyze", "--pattern", "full", "--n", "70", "--h", "320"]);
    assert!(out.status.success());
    let rows = table_rows(&stdout(&out));
    assert_eq!(rows.len(), 4);
    for row in &rows[..3] {
        assert_eq!(row[2], "2485");
        assert_eq!(row[3], "1568000");
    }
}

#[test]
fn analyze_cascade_lists_growing_windows() {
    let out = lightformer(&["analyze", "--pattern", "cascade", "--b", "4", "--m", "2", "--layers", "3"]);
    let text = stdout(&out);
    for (l, w) in [(0, 4), (1, 8), (2, 16)] {
        assert!(text.contains(&format!("# layer {l}: window {w}\n")), "{text}");
    }
}

#[test]
fn analyze_orders_the_four_patterns() {
    let out = lightformer(&["analyze", "--dff", "2000"]);
    assert!(out.status.success());
    let totals: Vec<(String, usize)> = table_rows(&stdout(&out))
        .into_iter()
        .filter(|r| r[0] == "total")
        .map(|r| (r[1].clone(), r[2].parse().unwrap()))
        .collect();
    let get = |k: &str| totals.iter().find(|(name, _)| name == k).unwrap().1;
    assert!(get("dilated") <= get("dilated-memory"));
    assert!(get("dilated-memory") <= get("full"));
    assert!(get("cascade") < get("full"));
    assert!(stdout(&out).contains("# receptive field of position 69: 15 of 70"));
}

#[test]
fn train_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = train_small(&a, &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    for name in ["config.txt", "train_log.tsv", "best.ckpt", "metrics.tsv"] {
        assert!(a.join(name).exists(), "missing {name}");
    }
    assert!(stdout(&out).starts_with("step\tepoch\tsplit\tloss\tppl\ttokens_per_sec\n"));
    let metrics = fs::read_to_string(a.join("metrics.tsv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "pattern\tlayers\tdmodel\tdff\theads\tparams\tval_ppl\ttest_ppl");
    assert!(lines[1].starts_with("cascade\t2\t16\t32\t2\t"), "{}", lines[1]);

    assert!(train_small(&b, &[]).status.success());
    assert_eq!(metrics, fs::read_to_string(b.join("metrics.tsv")).unwrap());
    assert_eq!(fs::read(a.join("best.ckpt")).unwrap(), fs::read(b.join("best.ckpt")).unwrap());

    // Evaluating the checkpoint on the validation split reproduces the logged value.
    let ckpt = a.join("best.ckpt");
    let valid = fixture("valid.txt");
    let args = [
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--corpus",
        valid.to_str().unwrap(),
        "--seq-len",
        "24",
    ];
    let first = lightformer(&args);
    assert!(first.status.success(), "{}", stderr(&first));
    assert_eq!(stdout(&first), stdout(&lightformer(&args)));
    let line = stdout(&first);
    let ppl: f64 = line.trim().strip_prefix("ppl\t").unwrap().parse().unwrap();
    let logged: f64 = lines[1].split('\t').nth(6).unwrap().parse().unwrap();
    assert!((ppl - logged).abs() < 1e-4, "{ppl} vs {logged}");
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.txt");
    fs::write(&config, "# shared\nlr=3\nseed=9\nlog-interval=7\n").unwrap();
    let out_dir = dir.path().join("run");
    let out = train_small(&out_dir, &["--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let written = fs::read_to_string(out_dir.join("config.txt")).unwrap();
    assert!(written.contains("\nlr=0.5\n"), "{written}");
    assert!(written.contains("\nseed=9\n"));
    assert!(written.contains("\nlog-interval=7\n"));
    assert!(written.contains("\nmax-len=24\n"));
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("from-env");
    let mut args: Vec<String> = ["train", "--train", "--valid"].iter().map(|s| s.to_string()).collect();
    args.insert(2, fixture("train.txt").display().to_string());
    args.push(fixture("valid.txt").display().to_string());
    args.extend(SMALL.iter().map(|s| s.to_string()));
    let out = Command::new(env!("CARGO_BIN_EXE_lightformer"))
        .args(&args)
        .env("LIGHTFORMER_OUT_DIR", &out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(out_dir.join("metrics.tsv").exists());
    assert!(fs::read_to_string(out_dir.join("metrics.tsv")).unwrap().trim_end().ends_with("\tNA"));
}

#[test]
fn invalid_config_key_exits_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.txt");
    fs::write(&config, "learning-rate=3\n").unwrap();
    let out_dir = dir.path().join("run");
    let out = train_small(&out_dir, &["--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning-rate"));
    assert!(!out_dir.exists());
}

#[test]
fn too_small_corpus_removes_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = dir.path().join("tiny.txt");
    fs::write(&tiny, "a b c\n").unwrap();
    let out_dir = dir.path().join("run");
    let out = lightformer(&[
        "train",
        "--train",
        tiny.to_str().unwrap(),
        "--valid",
        tiny.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(!out_dir.exists());
}

#[test]
fn missing_corpus_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.txt");
    let out = lightformer(&[
        "train",
        "--train",
        missing.to_str().unwrap(),
        "--valid",
        missing.to_str().unwrap(),
        "--out-dir",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("absent.txt"));
}

/// A corpus whose vocabulary has exactly `words + 2` entries.
fn wide_corpus(path: &Path, words: usize) {
    let mut text = String::new();
    for chunk in (0..words).collect::<Vec<_>>().chunks(10) {
        let line: Vec<String> = chunk.iter().map(|i| format!("w{i}")).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

#[test]
fn untrained_model_scores_near_vocabulary_size() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("wide.txt");
    wide_corpus(&corpus, 9_998);
    let out_dir = dir.path().join("run");
    let c = corpus.to_str().unwrap();
    let out = lightformer(&[
        "train",
        "--train",
        c,
        "--valid",
        c,
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--lr",
        "0",
        "--epochs",
        "1",
        "--dmodel",
        "8",
        "--dff",
        "16",
        "--heads",
        "2",
        "--layers",
        "1",
        "--seq-len",
        "32",
        "--batch",
        "4",
        "--vocab-size",
        "10000",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let ckpt = out_dir.join("best.ckpt");
    let eval = lightformer(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--corpus", c]);
    let ppl: f64 = stdout(&eval).trim().strip_prefix("ppl\t").unwrap().parse().unwrap();
    assert!((ppl / 10_000.0 - 1.0).abs() < 0.05, "{ppl}");

    // A vocabulary of a different size is refused with both sizes named.
    let other = dir.path().join("narrow.txt");
    wide_corpus(&other, 50);
    let eval = lightformer(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--corpus",
        c,
        "--vocab-from",
        other.to_str().unwrap(),
    ]);
    assert_eq!(eval.status.code(), Some(2));
    let msg = stderr(&eval);
    assert!(msg.contains("52") && msg.contains("10000"), "{msg}");
}
