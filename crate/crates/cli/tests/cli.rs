use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_neurotok");

const SUBCOMMANDS: [&str; 8] = [
    "preprocess",
    "train-codec",
    "tokenize",
    "detokenize",
    "build-dataset",
    "evaluate",
    "report",
    "synth-data",
];

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(cwd).output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "neurotok {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn help_and_unknown_flags() {
    let dir = tempfile::tempdir().unwrap();
    for sub in SUBCOMMANDS {
        let help = ok(&[sub, "--help"], dir.path());
        assert!(help.contains("Usage: neurotok"), "{sub}: {help}");
        let out = run(&[sub, "--no-such-flag"], dir.path());
        assert_eq!(out.status.code(), Some(2), "{sub}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("--no-such-flag"));
    }
    let help = ok(&["train-codec", "--help"], dir.path());
    for flag in ["--config", "--seed", "--output-dir", "--steps", "--batch-size", "--learning-rate"] {
        assert!(help.contains(flag), "{flag} undocumented");
    }
}

#[test]
fn config_errors_are_enumerated() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.json"),
        r#"{"preprocess": {"low_hz": 90}, "codec": {"learning_rate": -1}, "pairs": []}"#,
    )
    .unwrap();
    let out = run(&["preprocess", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("4 problems"), "{err}");
    for needle in ["preprocess:", "codec:", "pairs:", "signals_dir:"] {
        assert!(err.contains(needle), "{needle} missing from {err}");
    }

    std::fs::write(dir.path().join("typo.json"), r#"{"seeed": 1}"#).unwrap();
    let out = run(&["preprocess", "--config", "typo.json"], dir.path());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seeed"));

    let out = Command::new(BIN)
        .args(["synth-data", "--out-dir", "x"])
        .env("NEUROCODEC_THREADS", "zero")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

/// A short pipeline run from `root`; returns nothing, leaves artifacts.
fn small_pipeline(root: &Path, seed: &str) {
    ok(&["synth-data", "--out-dir", "data", "--duration-s", "12", "--seed", seed], root);
    let cfg = "data/config.json";
    ok(&["preprocess", "--config", cfg, "--seed", seed], root);
    ok(&["train-codec", "--config", cfg, "--seed", seed, "--steps", "3", "--batch-size", "4"], root);
    ok(
        &["tokenize", "--config", cfg, "--input", "data/out/windows/test/000000", "--output", "tokens.json"],
        root,
    );
}

#[test]
fn pipeline_is_deterministic_and_idempotent() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    small_pipeline(a.path(), "5");
    small_pipeline(b.path(), "5");
    for file in ["data/out/losses.csv", "tokens.json", "data/out/manifest.jsonl", "data/out/codec.ckpt"] {
        assert_eq!(read(&a.path().join(file)), read(&b.path().join(file)), "{file} differs");
    }
    let losses = String::from_utf8(read(&a.path().join("data/out/losses.csv"))).unwrap();
    assert_eq!(losses.lines().next().unwrap(), "step,l_t,l_f,l_w,l_d,l_g,l_feat,l_G");
    assert_eq!(losses.lines().count(), 4);

    // Re-running a command rewrites the same outputs.
    let manifest = read(&a.path().join("data/out/manifest.jsonl"));
    ok(&["preprocess", "--config", "data/config.json", "--seed", "5"], a.path());
    assert_eq!(read(&a.path().join("data/out/manifest.jsonl")), manifest);

    let c = tempfile::tempdir().unwrap();
    small_pipeline(c.path(), "6");
    assert_ne!(read(&a.path().join("data/out/losses.csv")), read(&c.path().join("data/out/losses.csv")));
}

#[test]
fn tokens_restore_the_signal_shape_and_datasets_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    small_pipeline(root, "2");
    let cfg = "data/config.json";
    ok(&["detokenize", "--config", cfg, "--input", "tokens.json", "--output", "restored"], root);
    let original = neurotok::signal::read_signal(&root.join("data/out/windows/test/000000")).unwrap();
    let restored = neurotok::signal::read_signal(&root.join("restored")).unwrap();
    assert_eq!(original.header(), restored.header());
    assert_eq!(original.samples().dim(), restored.samples().dim());

    ok(&["build-dataset", "--config", cfg, "--pairs", "eg->text,text->eg", "--split", "test"], root);
    let records = neurotok::prompts::read_chatml_jsonl(&root.join("data/out/dataset/test.jsonl")).unwrap();
    assert!(!records.is_empty());
    assert!(!root.join("data/out/dataset/train.jsonl").exists());

    let text = ok(
        &["evaluate", "--dataset", "data/out/dataset/test.jsonl", "--pair", "eg->text", "--echo", "--out-dir", "eval"],
        root,
    );
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(report["summary"]["bleu1_pct"], 100.0);
    assert_eq!(report["summary"]["cer_pct"], 0.0);
    let csv = String::from_utf8(read(&root.join("eval/per_pair.csv"))).unwrap();
    assert_eq!(csv.lines().count() as u64, 1 + report["summary"]["pairs"].as_u64().unwrap());

    let files = ok(
        &["report", "--config", cfg, "--input", "data/out/windows/test/000000", "--length", "800", "--out-dir", "rep"],
        root,
    );
    assert!(files.lines().any(|l| l.ends_with("timeseries.png")));
    let out = run(&["report", "--config", cfg, "--input", "restored", "--channel", "9", "--out-dir", "rep"], root);
    assert_eq!(out.status.code(), Some(1));
}
