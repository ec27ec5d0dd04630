mod config;
mod manifest;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use neurotok::codec::{reconstruct_report, Codec, LossReport, Trainer};
use neurotok::metrics::{
    evaluate, random_selecting_baseline, read_external_scores, read_jsonl_pairs, read_line_pairs, EvalPair,
    PairScores,
};
use neurotok::preprocess::{attach_transcripts, preprocess_signal, read_word_onsets, split_dataset, write_word_onsets};
use neurotok::prompts::{build_dataset, read_chatml_jsonl, write_chatml_jsonl, Modality, PairTag, TemplatePool};
use neurotok::signal::{read_signal, write_signal};
use neurotok::synth::{synth_recording, synth_words, SynthSpec};
use neurotok::tokens::{detokenize_signal, tokenize_signal, TokenizedSignal};

use config::{Needs, PipelineConfig};

#[derive(Parser)]
#[command(name = "neurotok", version, about = "Neural-signal tokenizer pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Band-pass, resample, window and split every recording; writes window
    /// files and `manifest.jsonl` into the output directory.
    Preprocess(PreprocessArgs),
    /// Train the codec on the training windows; writes `codec.ckpt` and
    /// `losses.csv` into the output directory.
    TrainCodec(TrainArgs),
    /// Signal file to token file.
    Tokenize(TokenizeArgs),
    /// Token file back to a signal file of the original shape.
    Detokenize(TokenizeArgs),
    /// Chat-style JSON-lines datasets for the requested modality pairs.
    BuildDataset(BuildArgs),
    /// Text-generation metrics for predictions against references.
    Evaluate(EvaluateArgs),
    /// Reconstruction report (time series and STFT plots) for one channel.
    Report(ReportArgs),
    /// Seeded synthetic recordings, word onsets, split and config.
    SynthData(SynthArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline configuration (JSON); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.output_dir {
            cfg.output_dir = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct PreprocessArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    signals_dir: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    low_hz: Option<f64>,
    #[arg(long)]
    high_hz: Option<f64>,
    #[arg(long)]
    target_hz: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args)]
struct TokenizeArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Codec checkpoint; defaults to `codec.ckpt` in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Comma-separated pairs such as `eg->text,speech->eg`.
    #[arg(long, value_delimiter = ',')]
    pairs: Option<Vec<PairTag>>,
    /// Restrict to one split (`train`, `val` or `test`).
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predictions, one per line.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// References, one per line, aligned with `--predictions`.
    #[arg(long, conflicts_with_all = ["pairs", "dataset"])]
    references: Option<PathBuf>,
    /// JSON lines of `{"prediction": .., "references": [..]}`.
    #[arg(long, conflicts_with_all = ["predictions", "dataset"])]
    pairs: Option<PathBuf>,
    /// Chat dataset whose text-target assistant turns are the references.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Only score dataset records of this pair (its target must be text).
    #[arg(long, requires = "dataset")]
    pair: Option<PairTag>,
    /// Use the references as predictions (a pipeline sanity check).
    #[arg(long, requires = "dataset", conflicts_with = "predictions")]
    echo: bool,
    /// Per-pair scores from an external scorer (`index,score` CSV).
    #[arg(long, requires = "external_name")]
    external: Option<PathBuf>,
    #[arg(long)]
    external_name: Option<String>,
    /// Also score the random-selecting baseline with this seed.
    #[arg(long)]
    baseline_seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    channel: usize,
    /// First sample of the excerpt.
    #[arg(long, default_value_t = 0)]
    start: usize,
    /// Excerpt length in samples; the rest of the signal when omitted.
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 2)]
    channels: usize,
    #[arg(long, default_value_t = 120.0)]
    duration_s: f64,
    #[arg(long, default_value_t = 1000.0)]
    sample_rate_hz: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use 1-40 Hz noise instead of the slow-wave default.
    #[arg(long)]
    broadband: bool,
}

fn checkpoint_or_default(flag: &Option<PathBuf>, cfg: &PipelineConfig) -> PathBuf {
    flag.clone().unwrap_or_else(|| cfg.checkpoint_path())
}

fn load_codec(path: &Path) -> Result<Codec> {
    Codec::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_preprocess(args: &PreprocessArgs) -> Result<()> {
    let mut cfg = args.common.load()?;
    if let Some(d) = &args.signals_dir {
        cfg.signals_dir = d.clone();
    }
    if let Some(a) = &args.annotations {
        cfg.annotations = Some(a.clone());
    }
    if let Some(v) = args.low_hz {
        cfg.preprocess.low_hz = v;
    }
    if let Some(v) = args.high_hz {
        cfg.preprocess.high_hz = v;
    }
    if let Some(v) = args.target_hz {
        cfg.preprocess.target_hz = v;
    }
    cfg.validate(Needs {
        signals: true,
        ..Needs::default()
    })?;

    let mut headers: Vec<PathBuf> = fs::read_dir(&cfg.signals_dir)
        .with_context(|| format!("listing {}", cfg.signals_dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    headers.retain(|p| p.extension().is_some_and(|e| e == "json"));
    headers.sort();
    if headers.is_empty() {
        bail!("no signal headers (*.json) in {}", cfg.signals_dir.display());
    }
    let words = match &cfg.annotations {
        Some(a) => read_word_onsets(a)?,
        None => Vec::new(),
    };

    let mut channel_names: Option<Vec<String>> = None;
    let mut windows = Vec::new();
    for path in &headers {
        let signal = read_signal(path)?;
        let names = &signal.header().channel_names;
        match &channel_names {
            None => channel_names = Some(names.clone()),
            Some(first) if first != names => {
                bail!("{} has channels {:?}, expected {:?}", path.display(), names, first)
            }
            Some(_) => {}
        }
        if signal.header().story_id.is_none() {
            bail!("{} has no story_id", path.display());
        }
        let mut w = preprocess_signal(&signal, &cfg.preprocess, cfg.seed)
            .with_context(|| format!("preprocessing {}", path.display()))?;
        attach_transcripts(&mut w, &words, cfg.preprocess.window.window_s);
        eprintln!("{}: {} windows", path.display(), w.len());
        windows.extend(w);
    }
    let split = split_dataset(windows, &cfg.split)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let manifest = manifest::write_windows(&split, channel_names.as_deref().unwrap_or_default(), &cfg.output_dir)?;
    let summary = serde_json::json!({
        "train": split.train.len(),
        "val": split.val.len(),
        "test": split.test.len(),
        "audit": split.audit,
    });
    fs::write(cfg.output_dir.join("preprocess_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("{}", serde_json::to_string(&summary)?);
    eprintln!("wrote {}", manifest.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.common.load()?;
    if let Some(v) = args.steps {
        cfg.codec.steps = v;
    }
    if let Some(v) = args.batch_size {
        cfg.codec.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.codec.learning_rate = v;
    }
    cfg.validate(Needs {
        manifest: true,
        ..Needs::default()
    })?;
    let windows = manifest::load_windows(&cfg.manifest_path(), Some("train"))?;
    // Every channel of every window is one single-channel example.
    let examples: Vec<Vec<f32>> = windows
        .iter()
        .flat_map(|w| w.signal.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>())
        .collect();
    if examples.is_empty() {
        bail!("the training split is empty");
    }
    let codec_cfg = cfg.codec_config();
    let steps = codec_cfg.steps;
    let mut trainer = Trainer::new(Codec::new(codec_cfg)?);
    let csv_path = cfg.output_dir.join("losses.csv");
    let mut csv = String::from(LossReport::CSV_HEADER);
    csv.push('\n');
    let t0 = Instant::now();
    trainer.train(&examples, steps, |i, o| {
        csv.push_str(&o.report.csv_row(i));
        csv.push('\n');
        if i % 50 == 0 || i + 1 == steps {
            eprintln!(
                "step {i:>5} {:>7.1}s l_t={:.4} l_f={:.4} l_G={:.3}",
                t0.elapsed().as_secs_f64(),
                o.report.l_t,
                o.report.l_f,
                o.report.l_total
            );
        }
    })?;
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
    let ckpt = cfg.checkpoint_path();
    trainer.codec().save(&ckpt)?;
    eprintln!("wrote {} and {} after {:.1}s", ckpt.display(), csv_path.display(), t0.elapsed().as_secs_f64());
    Ok(())
}

fn cmd_tokenize(args: &TokenizeArgs) -> Result<()> {
    let cfg = args.common.load()?;
    cfg.validate(Needs::default())?;
    let codec = load_codec(&checkpoint_or_default(&args.checkpoint, &cfg))?;
    let registry = cfg.registry.build()?;
    let signal = read_signal(&args.input)?;
    let tokens = tokenize_signal(&signal, &codec, &registry)?;
    tokens.write_json(&args.output, &registry)?;
    eprintln!(
        "{} steps x {} channels -> {}",
        tokens.tokens.num_steps(),
        tokens.tokens.num_channels(),
        args.output.display()
    );
    Ok(())
}

fn cmd_detokenize(args: &TokenizeArgs) -> Result<()> {
    let cfg = args.common.load()?;
    cfg.validate(Needs::default())?;
    let codec = load_codec(&checkpoint_or_default(&args.checkpoint, &cfg))?;
    let registry = cfg.registry.build()?;
    let tokens = TokenizedSignal::read_json(&args.input, &registry)?;
    let signal = detokenize_signal(&tokens, &codec, &registry)?;
    write_signal(&signal, &args.output)?;
    Ok(())
}

fn cmd_build_dataset(args: &BuildArgs) -> Result<()> {
    let mut cfg = args.common.load()?;
    if let Some(p) = &args.pairs {
        cfg.pairs = p.clone();
    }
    if let Some(t) = &args.templates {
        cfg.templates = Some(t.clone());
    }
    if let Some(s) = &args.split {
        if !manifest::SPLITS.contains(&s.as_str()) {
            bail!("unknown split {s:?}; expected one of {:?}", manifest::SPLITS);
        }
    }
    let needs_default_ckpt = args.checkpoint.is_none().then_some("checkpoint");
    cfg.validate(Needs {
        manifest: true,
        checkpoint: needs_default_ckpt,
        ..Needs::default()
    })?;
    let codec = load_codec(&checkpoint_or_default(&args.checkpoint, &cfg))?;
    let registry = cfg.registry.build()?;
    let pool = match &cfg.templates {
        Some(p) => TemplatePool::read(p)?,
        None => TemplatePool::default(),
    };
    let out = cfg.output_dir.join("dataset");
    fs::create_dir_all(&out)?;
    let splits: Vec<&str> = match &args.split {
        Some(s) => vec![s.as_str()],
        None => manifest::SPLITS.to_vec(),
    };
    let mut summaries = serde_json::Map::new();
    for split in splits {
        let windows = manifest::load_windows(&cfg.manifest_path(), Some(split))?;
        if windows.is_empty() {
            eprintln!("{split}: no windows, skipped");
            continue;
        }
        let seed = cfg.seed ^ neurotok::rng::fnv1a(split.as_bytes());
        let (records, summary) = build_dataset(&windows, &codec, &registry, &cfg.pairs, &pool, seed)?;
        let path = out.join(format!("{split}.jsonl"));
        write_chatml_jsonl(&records, &path)?;
        eprintln!("{split}: {} records -> {}", records.len(), path.display());
        summaries.insert(split.to_string(), serde_json::to_value(&summary)?);
    }
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summaries)?)?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let pairs: Vec<EvalPair> = match (&args.pairs, &args.dataset, &args.predictions, &args.references) {
        (Some(p), _, _, _) => read_jsonl_pairs(p)?,
        (None, Some(d), preds, _) => {
            if let Some(p) = args.pair.filter(|p| p.target() != Modality::Text) {
                bail!("pair {p} does not produce text");
            }
            let refs: Vec<String> = read_chatml_jsonl(d)?
                .iter()
                .filter(|r| r.pair.target() == Modality::Text && args.pair.is_none_or(|p| p == r.pair))
                .map(|r| r.assistant().to_string())
                .collect();
            let preds = match preds {
                Some(p) => read_lines(p)?,
                None if args.echo => refs.clone(),
                None => bail!("--dataset needs --predictions or --echo"),
            };
            if preds.len() != refs.len() {
                bail!("{} predictions for {} text-target records", preds.len(), refs.len());
            }
            preds.into_iter().zip(refs).map(|(p, r)| EvalPair::single(p, r)).collect()
        }
        (None, None, Some(p), Some(r)) => read_line_pairs(p, r)?,
        _ => bail!("give --pairs, --dataset, or both --predictions and --references"),
    };
    let mut summary = evaluate(&pairs)?;
    if let (Some(path), Some(name)) = (&args.external, &args.external_name) {
        summary.attach_external(name, &read_external_scores(path)?)?;
    }
    fs::create_dir_all(&args.out_dir)?;
    let mut csv = String::from(PairScores::CSV_HEADER);
    csv.push('\n');
    for (i, p) in pairs.iter().enumerate() {
        csv.push_str(&PairScores::of(p)?.csv_row(i));
        csv.push('\n');
    }
    fs::write(args.out_dir.join("per_pair.csv"), csv)?;
    let mut report = serde_json::json!({ "summary": summary });
    if let Some(seed) = args.baseline_seed {
        let refs: Vec<String> = pairs.iter().map(|p| p.references[0].clone()).collect();
        report["random_baseline"] = serde_json::to_value(random_selecting_baseline(&refs, seed)?)?;
    }
    let text = serde_json::to_string_pretty(&report)?;
    fs::write(args.out_dir.join("metrics.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let cfg = args.common.load()?;
    let codec = load_codec(&checkpoint_or_default(&args.checkpoint, &cfg))?;
    let signal = read_signal(&args.input)?;
    if args.channel >= signal.num_channels() {
        bail!("channel {} out of range for {} channels", args.channel, signal.num_channels());
    }
    let row = signal.samples().row(args.channel).to_vec();
    let end = args.length.map_or(row.len(), |n| args.start.saturating_add(n));
    if args.start >= end || end > row.len() {
        bail!("excerpt {}..{} outside a signal of {} samples", args.start, end, row.len());
    }
    let files = reconstruct_report(&codec, &row[args.start..end], &args.out_dir)?;
    for f in files.files {
        println!("{}", f.display());
    }
    Ok(())
}

fn story_file_name(story: &str) -> String {
    story.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = PipelineConfig {
        seed: args.seed,
        ..Default::default()
    };
    let spec = if args.broadband { SynthSpec::broadband() } else { SynthSpec::default() };
    let signals = args.out_dir.join("signals");
    fs::create_dir_all(&signals)?;
    let stories: Vec<String> = cfg
        .split
        .train_stories
        .iter()
        .chain(&cfg.split.val_stories)
        .chain(&cfg.split.test_stories)
        .cloned()
        .collect();
    let mut words = Vec::new();
    for story in &stories {
        let rec = synth_recording(&spec, story, args.channels, args.duration_s, args.sample_rate_hz, args.seed)?;
        write_signal(&rec, &signals.join(story_file_name(story)))?;
        words.extend(synth_words(story, args.duration_s, cfg.registry.speech_size, args.seed));
    }
    write_word_onsets(&args.out_dir.join("words.jsonl"), &words)?;
    cfg.signals_dir = PathBuf::from("signals");
    cfg.annotations = Some(PathBuf::from("words.jsonl"));
    cfg.output_dir = PathBuf::from("out");
    let path = args.out_dir.join("config.json");
    let mut f = fs::File::create(&path)?;
    writeln!(f, "{}", serde_json::to_string_pretty(&cfg)?)?;
    eprintln!("{} stories x {} channels -> {}", stories.len(), args.channels, path.display());
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NEUROCODEC_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("NEUROCODEC_THREADS={v:?} is not a positive integer"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::TrainCodec(a) => cmd_train(a),
        Command::Tokenize(a) => cmd_tokenize(a),
        Command::Detokenize(a) => cmd_detokenize(a),
        Command::BuildDataset(a) => cmd_build_dataset(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
        Command::SynthData(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn story_names_become_file_names() {
        assert_eq!(story_file_name("cable spool fort"), "cable_spool_fort");
    }
}
