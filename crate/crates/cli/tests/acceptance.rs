//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero when
//! any criterion fails.

use std::collections::HashMap;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::{Array2, ArrayView1};
use neurotok::codec::{
    loss_discriminator, loss_feature_match, loss_generator_adv, loss_reconstruction, loss_stft, loss_total,
    Codec, CodecConfig, LossReport, LossWeights, Trainer,
};
use neurotok::metrics::{bleu1, cer, edit_distance, normalize_words, rouge1, wer, EvalPair};
use neurotok::preprocess::{
    attach_transcripts, bandpass, extract_windows, resample, split_dataset, window_count, SosFilter, SplitSpec,
    WindowConfig, FILTER_ORDER,
};
use neurotok::prompts::{compose_prompt, PairTag, PromptStyle, TemplatePool};
use neurotok::quantizer::{code_histogram, entropy, RvqConfig, RvqState};
use neurotok::rng::seeded;
use neurotok::signal::{NeuralSignal, SignalHeader};
use neurotok::spectral::StftConfig;
use neurotok::synth::{codec_windows, synth_recording, synth_words, SynthSpec};
use neurotok::tensor::{grad_check, Tape, Tensor, TensorError, Var};
use neurotok::tokens::{
    default_channel_names, parse_neural, parse_neural_channels, parse_speech, serialize_neural, serialize_speech, NeuralTokenSequence,
    VocabRegistry,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// Gradient suite.

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut t = random(shape, seed);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>>;

fn op_cases(s: u64) -> Vec<(&'static str, OpFn, Vec<Tensor<f64>>)> {
    let z0 = random(&[8], s + 11);
    let offset: Vec<f64> = z0.data().iter().map(|x| (x * 4.0).round() / 4.0 + 0.125 - x).collect();
    vec![
        (
            "conv1d",
            Box::new(|tp, v| {
                let y = tp.conv1d(v[0], v[1], v[2], 2, 1)?;
                Ok(tp.l2sq(y))
            }),
            vec![random(&[2, 3, 11], s), random(&[2, 3, 4], s + 1), random(&[2], s + 2)],
        ),
        (
            "conv_transpose1d",
            Box::new(|tp, v| {
                let y = tp.conv_transpose1d(v[0], v[1], v[2], 3, 1)?;
                Ok(tp.l2sq(y))
            }),
            vec![random(&[2, 2, 5], s), random(&[2, 3, 5], s + 1), random(&[3], s + 2)],
        ),
        (
            "elu",
            Box::new(|tp, v| {
                let y = tp.elu(v[0]);
                Ok(tp.l2sq(y))
            }),
            vec![random(&[17], s + 3)],
        ),
        (
            "relu",
            Box::new(|tp, v| {
                let y = tp.relu(v[0]);
                Ok(tp.l2sq(y))
            }),
            vec![away_from_zero(&[17], s + 4)],
        ),
        (
            "add/sub/scalar",
            Box::new(|tp, v| {
                let a = tp.add(v[0], v[1])?;
                let b = tp.mul_scalar(a, 1.7);
                let c = tp.add_scalar(b, -0.3);
                let d = tp.sub(c, v[1])?;
                Ok(tp.l2sq(d))
            }),
            vec![random(&[2, 5], s + 5), random(&[2, 5], s + 6)],
        ),
        ("l1", Box::new(|tp, v| Ok(tp.l1(v[0]))), vec![away_from_zero(&[9], s + 7)]),
        (
            "mean/sqrt/div",
            Box::new(|tp, v| {
                let sq = tp.l2sq(v[0]);
                let r = tp.sqrt(sq)?;
                let m = tp.mean(v[1]);
                let m = tp.add_scalar(m, 3.0);
                tp.div(r, m)
            }),
            vec![random(&[6], s + 8), random(&[4], s + 9)],
        ),
        (
            "avg_pool/mean_last_axis",
            Box::new(|tp, v| {
                let p = tp.avg_pool1d(v[0], 3)?;
                let m = tp.mean_last_axis(p)?;
                let e = tp.elu(m);
                Ok(tp.l2sq(e))
            }),
            vec![random(&[2, 2, 10], s + 10)],
        ),
        (
            "straight_through",
            Box::new(move |tp, v| {
                let mut q = tp.value(v[0]).clone();
                q.data_mut().iter_mut().zip(&offset).for_each(|(x, o)| *x += o);
                let y = tp.straight_through(v[0], q)?;
                let y = tp.elu(y);
                Ok(tp.l2sq(y))
            }),
            vec![z0],
        ),
        (
            "dft_features",
            Box::new(|tp, v| {
                let m = tp.dft_features(v[0], 16, 4)?;
                Ok(tp.l1(m))
            }),
            vec![random(&[2, 40], s + 12)],
        ),
    ]
}

fn micro(seed: u64) -> CodecConfig {
    CodecConfig {
        seed,
        ..CodecConfig::micro()
    }
}

fn batch(windows: &[Vec<f32>]) -> Array2<f32> {
    Array2::from_shape_vec((windows.len(), windows[0].len()), windows.concat()).unwrap()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst_op = 0.0f64;
    for seed in 0..10u64 {
        for (name, f, inputs) in op_cases(seed * 100) {
            let r = grad_check(f, &inputs).map_err(|e| format!("{name}: {e}"))?;
            ensure!(r.kinks == 0, "{name} seed {seed}: {} coordinates straddle a kink", r.kinks);
            ensure!(r.max_relative_error < 1e-3, "{name} seed {seed}: relative error {:.3e}", r.max_relative_error);
            worst_op = worst_op.max(r.max_relative_error);
        }
    }
    let mut worst_total = 0.0f64;
    let mut coordinates = 0;
    for seed in 0..10u64 {
        let mut trainer = Trainer::new(Codec::new(micro(seed)).map_err(|e| e.to_string())?);
        let x = batch(&codec_windows(&SynthSpec::default(), 2, 200, 400.0, 100 + seed));
        for _ in 0..3 {
            trainer.step(x.view()).map_err(|e| e.to_string())?;
        }
        let codec = trainer.into_codec();
        let mut rng = seeded(seed);
        let mut coords = Vec::new();
        for (i, (name, t)) in codec.generator_params.iter().enumerate() {
            if name.ends_with(".b") || t.numel() <= 96 {
                coords.extend((0..t.numel()).map(|k| (i, k)));
            } else {
                coords.extend((0..96).map(|_| (i, rng.random_range(0..t.numel()))));
            }
        }
        let r = codec.generator_grad_check(x.view(), Some(&coords)).map_err(|e| e.to_string())?;
        ensure!(r.kinks * 20 < r.coordinates, "L_G seed {seed}: {} of {} coordinates at kinks", r.kinks, r.coordinates);
        ensure!(r.max_relative_error < 1e-3, "L_G seed {seed}: relative error {:.3e}", r.max_relative_error);
        worst_total = worst_total.max(r.max_relative_error);
        coordinates += r.coordinates;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "took {secs:.1}s");
    Ok(format!(
        "10 ops x 10 seeds worst {worst_op:.2e}; L_G 10 seeds, {coordinates} coordinates, worst {worst_total:.2e}; {secs:.1}s"
    ))
}

// Loss identities.

fn normal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn loss_identities() -> Outcome {
    let e = |r: Result<f64, neurotok::codec::CodecError>| r.map_err(|e| e.to_string());
    let x = normal(1600, 1);
    ensure!(e(loss_reconstruction(&x, &x))? == 0.0, "L_t(x, x) != 0");
    ensure!(e(loss_stft(&x, &x, &StftConfig::default()))? == 0.0, "L_f(x, x) != 0");
    let t = |v: Vec<f64>| Tensor::new(vec![v.len()], v).unwrap();
    let feats = vec![vec![t(vec![1.0, -2.0]), t(vec![3.0])], vec![t(vec![0.5, 0.25])]];
    ensure!(e(loss_feature_match(&feats, &feats))? == 0.0, "L_feat(x, x) != 0");
    ensure!(e(loss_discriminator(&[1.0; 3], &[-1.0; 3]))? == 0.0, "L_D at the margins != 0");

    let hand: [(&str, f64, f64); 9] = [
        ("L_t [1,1] vs [0,0]", e(loss_reconstruction(&[1.0, 1.0], &[0.0, 0.0]))?, 1.0),
        ("L_D zeros", e(loss_discriminator(&[0.0], &[0.0]))?, 2.0),
        ("L_D inverted K=2", e(loss_discriminator(&[-1.0, -1.0], &[1.0, 1.0]))?, 4.0),
        ("L_g ones", e(loss_generator_adv(&[1.0, 1.0]))?, 0.0),
        ("L_g zero", e(loss_generator_adv(&[0.0]))?, 1.0),
        ("L_g -3,1,1", e(loss_generator_adv(&[-3.0, 1.0, 1.0]))?, 4.0 / 3.0),
        (
            "L_feat [2,2] vs [0,0]",
            e(loss_feature_match(&[vec![t(vec![2.0, 2.0])]], &[vec![t(vec![0.0, 0.0])]]))?,
            2.0,
        ),
        ("L_G zeros", loss_total(&report(0.0, 0.0, 0.0, 0.0, 0.0), &LossWeights::default()), 0.0),
        ("L_G L_t=1", loss_total(&report(1.0, 0.0, 0.0, 0.0, 0.0), &LossWeights::default()), 500.0),
    ];
    for (name, got, want) in hand {
        ensure!((got - want).abs() <= 1e-7, "{name}: {got} != {want}");
    }
    let mixed = loss_total(&report(0.1, 2.0, 0.5, 1.0, 0.3), &LossWeights::default());
    ensure!((mixed - 72.5).abs() < 1e-12, "weighted total {mixed} != 72.5");

    let mut trainer = Trainer::new(Codec::new(micro(1)).map_err(|e| e.to_string())?);
    let xb = batch(&codec_windows(&SynthSpec::default(), 2, 200, 400.0, 1));
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let r = trainer.step(xb.view()).map_err(|e| e.to_string())?.report;
        let w = trainer.codec().config.weights;
        let rel = (r.l_total - loss_total(&r, &w)).abs() / r.l_total.abs().max(1.0);
        worst = worst.max(rel);
    }
    ensure!(worst <= 1e-6, "L_G recombination off by {worst:.2e}");
    Ok(format!("zero identities exact; 10 hand examples exact; recombination within {worst:.1e}"))
}

fn report(l_t: f64, l_f: f64, l_g: f64, l_feat: f64, l_w: f64) -> LossReport {
    LossReport {
        l_t,
        l_f,
        l_w,
        l_d: 0.0,
        l_g,
        l_feat,
        l_total: 0.0,
    }
}

// Codec training.

fn moving_average(history: &[LossReport], range: std::ops::Range<usize>, f: impl Fn(&LossReport) -> f64) -> f64 {
    history[range.clone()].iter().map(f).sum::<f64>() / range.len() as f64
}

fn codec_training() -> Outcome {
    let windows = codec_windows(&SynthSpec::default(), 512, 1600, 400.0, 7);
    let cfg = CodecConfig {
        seed: 11,
        ..CodecConfig::default()
    };
    ensure!(cfg.batch_size == 32 && cfg.steps == 2000, "unexpected default schedule");

    let mut probe = Trainer::new(Codec::new(cfg.clone()).map_err(|e| e.to_string())?);
    let head = probe.train(&windows, 20, |_, _| {}).map_err(|e| e.to_string())?;

    let start = Instant::now();
    let mut trainer = Trainer::new(Codec::new(cfg.clone()).map_err(|e| e.to_string())?);
    let history = trainer
        .train(&windows, cfg.steps, |i, o| {
            if i % 250 == 0 {
                eprintln!(
                    "  [training] step {i} {:.0}s l_t={:.4} l_f={:.3}",
                    start.elapsed().as_secs_f64(),
                    o.report.l_t,
                    o.report.l_f
                );
            }
        })
        .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(history[..20] == head[..], "two runs with the same seed diverged within 20 steps");

    let n = history.len();
    let (t0, f0) = (moving_average(&history, 0..10, |r| r.l_t), moving_average(&history, 0..10, |r| r.l_f));
    let (t1, f1) = (moving_average(&history, n - 10..n, |r| r.l_t), moving_average(&history, n - 10..n, |r| r.l_f));

    // Reconstruction error through quantization on unseen windows.
    let codec = trainer.into_codec();
    let fresh = batch(&codec_windows(&SynthSpec::default(), 32, 1600, 400.0, 9_999));
    let recon = codec.reconstruct(fresh.view()).map_err(|e| e.to_string())?;
    let err: f64 = fresh.iter().zip(recon.iter()).map(|(a, b)| f64::from(a - b).powi(2)).sum();
    let energy: f64 = fresh.iter().map(|a| f64::from(*a).powi(2)).sum();
    let rel_l2 = (err / energy).sqrt();

    let detail = format!(
        "L_t {t0:.4} -> {t1:.4} ({:.1}%), L_f {f0:.2} -> {f1:.2} ({:.1}%), rel-L2 {rel_l2:.3}, deterministic, {secs:.0}s",
        100.0 * t1 / t0,
        100.0 * f1 / f0
    );
    ensure!(t1 <= 0.5 * t0, "L_t not halved: {detail}");
    ensure!(f1 <= 0.7 * f0, "L_f not below 70%: {detail}");
    ensure!(secs < 1800.0, "over 30 minutes: {detail}");
    Ok(detail)
}

// Residual vector quantization.

fn rvq_config(stages: usize, v: usize, r: usize) -> RvqConfig {
    RvqConfig {
        num_stages: stages,
        codebook_size: v,
        dim: r,
        ..Default::default()
    }
}

fn normal_matrix(shape: (usize, usize), seed: u64) -> Array2<f32> {
    let mut rng = seeded(seed);
    Array2::from_shape_fn(shape, |_| StandardNormal.sample(&mut rng))
}

fn brute_force(book: &Array2<f32>, v: ArrayView1<f32>) -> usize {
    let mut best = (0, f64::INFINITY);
    for k in 0..book.nrows() {
        let d: f64 = (0..v.len()).map(|r| (f64::from(v[r]) - f64::from(book[[k, r]])).powi(2)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

fn train_rvq(state: &mut RvqState, steps: usize, batch: usize, seed: u64) -> Result<(), String> {
    let mut rng = seeded(seed);
    let first = normal_matrix((state.dim(), batch), seed + 1);
    state.initialize_from(first.view(), &mut rng).map_err(|e| e.to_string())?;
    for step in 0..steps {
        let z = normal_matrix((state.dim(), batch), seed + 2 + step as u64);
        let q = state.quantize(z.view()).map_err(|e| e.to_string())?;
        state.update_ema(&q, &mut rng).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn rvq_suite() -> Outcome {
    let mut compared = 0;
    for (v, stages) in [(2, 3), (8, 2), (16, 2), (64, 1), (64, 3)] {
        for seed in 0..4u64 {
            let books: Vec<Array2<f32>> = (0..stages).map(|s| normal_matrix((v, 4), seed * 10 + s as u64)).collect();
            let state = RvqState::from_codebooks(rvq_config(stages, v, 4), books.clone()).map_err(|e| e.to_string())?;
            let z = normal_matrix((4, 64), seed + 500);
            let q = state.quantize(z.view()).map_err(|e| e.to_string())?;
            for t in 0..64 {
                let mut residual = z.column(t).to_owned();
                for (s, book) in books.iter().enumerate() {
                    let k = brute_force(book, residual.view());
                    ensure!(q.codes[[s, t]] as usize == k, "V={v} stage {s} column {t}: {} vs brute force {k}", q.codes[[s, t]]);
                    residual = &residual - &book.row(k);
                    compared += 1;
                }
            }
        }
    }

    let mut state = RvqState::new(rvq_config(4, 32, 4), &mut seeded(2)).map_err(|e| e.to_string())?;
    train_rvq(&mut state, 200, 128, 30)?;
    let z = normal_matrix((4, 500), 31);
    let q = state.quantize(z.view()).map_err(|e| e.to_string())?;
    let mut inputs = q.residuals.clone();
    inputs.push(&z - &q.z_q);
    let energy: Vec<f64> = inputs.iter().map(|m| m.iter().map(|&v| f64::from(v).powi(2)).sum()).collect();
    ensure!(energy.windows(2).all(|w| w[1] <= w[0]), "residual energy grew across stages: {energy:?}");

    for seed in 0..200u64 {
        let state = RvqState::from_codebooks(rvq_config(1, 16, 3), vec![normal_matrix((16, 3), seed)])
            .map_err(|e| e.to_string())?;
        let z = normal_matrix((3, 20), seed + 1000) * 2.0;
        let q = state.quantize(z.view()).map_err(|e| e.to_string())?;
        let back = state.dequantize(q.codes.view()).map_err(|e| e.to_string())?;
        let again = state.quantize(back.view()).map_err(|e| e.to_string())?;
        ensure!(again.codes == q.codes && back == q.z_q, "seed {seed}: codes are not idempotent");
    }

    let mut state = RvqState::new(rvq_config(1, 64, 8), &mut seeded(3)).map_err(|e| e.to_string())?;
    train_rvq(&mut state, 1000, 256, 10)?;
    let z = normal_matrix((8, 4096), 99);
    let q = state.quantize(z.view()).map_err(|e| e.to_string())?;
    let h = entropy(&code_histogram(q.codes.row(0), 64));
    let floor = 0.5 * 64f64.ln();
    ensure!(h > floor, "usage entropy {h:.3} <= {floor:.3}");
    let rounded: Vec<String> = energy.iter().map(|e| format!("{e:.0}")).collect();
    Ok(format!(
        "{compared} brute-force comparisons exact; stage energies {}; 200 idempotence cases; entropy {h:.3} > {floor:.3}",
        rounded.join(" >= ")
    ))
}

// Token format.

fn token_format() -> Outcome {
    let reg = VocabRegistry::default();
    let mut rng = seeded(2024);
    for case in 0..10_000 {
        let channels = rng.random_range(1..=8);
        let steps = rng.random_range(0..=64);
        let codes = Array2::from_shape_fn((steps, channels), |_| rng.random_range(0..reg.neural_size));
        let seq = NeuralTokenSequence::new(default_channel_names(channels), codes).map_err(|e| e.to_string())?;
        let text = serialize_neural(&seq, &reg).map_err(|e| e.to_string())?;
        // An empty stream carries no channel count, so the names are supplied.
        let back = parse_neural_channels(&text, &reg, &seq.channel_names).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(back == seq, "case {case}: round trip changed the sequence");
        if steps > 0 {
            ensure!(parse_neural(&text, &reg).map_err(|e| e.to_string())? == seq, "case {case}: self-describing parse");
        }
        let speech: Vec<u32> = (0..rng.random_range(0..32)).map(|_| rng.random_range(0..reg.speech_size)).collect();
        let s = serialize_speech(&speech, &reg).map_err(|e| e.to_string())?;
        ensure!(parse_speech(&s, &reg).map_err(|e| e.to_string())? == speech, "case {case}: speech round trip");
    }

    let system = "system: You are a helpful assistant named NeuGPT. You can understand and produce neural signals, \
                  and you can interact with speech and text modalities.";
    let speech = serialize_speech(&[334, 77, 332, 334], &reg).map_err(|e| e.to_string())?;
    let instruction = "Can you speak the text using an exaggerated accent?";
    let spoken = compose_prompt(
        PairTag::TextToSpeech,
        instruction,
        PromptStyle::Pretrain,
        "as the snake squeezed him tighter and tighter,",
        &speech,
    );
    let want = format!(
        "{system}\nuser: Can you speak the text using an exaggerated accent? This is input: as the snake squeezed him \
         tighter and tighter,\nassistant: <sosp><334><77><332><334><eosp>"
    );
    ensure!(spoken.render() == want, "speech listing differs:\n{}", spoken.render());

    let codes = [5792u32, 7851, 7851, 7851, 7851, 8128, 7386, 5857, 7343, 7598, 7851, 3241, 3663];
    let seq = NeuralTokenSequence::new(
        default_channel_names(codes.len()),
        Array2::from_shape_vec((1, codes.len()), codes.to_vec()).unwrap(),
    )
    .map_err(|e| e.to_string())?;
    let payload = serialize_neural(&seq, &reg).map_err(|e| e.to_string())?;
    let neural = compose_prompt(
        PairTag::EgToText,
        "Convert the following eg input to text:",
        PromptStyle::FineTune,
        &payload,
        "incomplete page before him. His pen flickered",
    );
    let want = format!(
        "{system}\nuser: Convert the following eg input to text:\nThis is the input:<soeg><nts><EG5792><EG7851>\
         <EG7851><EG7851><EG7851><EG8128><EG7386><EG5857><EG7343><EG7598><EG7851><EG3241><EG3663><eoeg>\n\
         assistant: incomplete page before him. His pen flickered"
    );
    ensure!(neural.render() == want, "neural listing differs:\n{}", neural.render());
    let pool = TemplatePool::default();
    ensure!(
        pool.templates(PairTag::TextToSpeech).iter().any(|t| t == instruction),
        "speech instruction missing from the template pool"
    );
    Ok("10000 neural and speech round trips exact; both listings reproduced token for token".into())
}

// Preprocessing.

fn one_channel(fs: f64, x: Vec<f64>) -> NeuralSignal {
    let n = x.len();
    let samples = Array2::from_shape_vec((1, n), x.into_iter().map(|v| v as f32).collect()).unwrap();
    NeuralSignal::new(SignalHeader::new(fs, vec!["ch".into()], n), samples).unwrap()
}

fn sine_rms_ratio(freq: f64, fs: f64, n: usize) -> Result<f64, String> {
    let x: Vec<f64> = (0..n).map(|i| (std::f64::consts::TAU * freq * i as f64 / fs).sin()).collect();
    let y = bandpass(&one_channel(fs, x), 0.1, 85.0).map_err(|e| e.to_string())?;
    let rms = (y.samples().iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / n as f64).sqrt();
    Ok(rms / std::f64::consts::FRAC_1_SQRT_2)
}

fn preprocessing() -> Outcome {
    ensure!(window_count(60.0, 4.0, 1.0) == 57, "window_count(60, 4, 1) != 57");
    let sixty = one_channel(1000.0, vec![0.0; 60_000]);
    let w = extract_windows(&sixty, &WindowConfig::default(), 3).map_err(|e| e.to_string())?;
    ensure!(w.len() == 57, "{} windows from 60 s", w.len());
    ensure!(w.iter().all(|s| s.signal.ncols() == 4000), "window length is not 4 s");

    for (n, want) in [(1000, 400), (60_000, 24_000), (999, 400), (1001, 400), (1003, 401), (12_345, 4938)] {
        let r = resample(&one_channel(1000.0, vec![1.0; n]), 400.0).map_err(|e| e.to_string())?;
        ensure!(r.num_samples() == want, "resample {n} -> {} samples, expected {want}", r.num_samples());
    }

    let f = SosFilter::butter_bandpass(FILTER_ORDER, 0.1, 85.0, 1000.0).map_err(|e| e.to_string())?;
    let (g10, glow, ghigh) = (
        f.zero_phase_gain_db(10.0, 1000.0),
        f.zero_phase_gain_db(0.01, 1000.0),
        f.zero_phase_gain_db(170.0, 1000.0),
    );
    ensure!(g10 >= -1.0, "10 Hz gain {g10:.2} dB");
    ensure!(glow <= -20.0, "gain below the low edge {glow:.2} dB");
    ensure!(ghigh <= -20.0, "gain at twice the high edge {ghigh:.2} dB");
    let pass = sine_rms_ratio(10.0, 1000.0, 20_000)?;
    let stop = sine_rms_ratio(200.0, 1000.0, 20_000)?;
    ensure!((pass - 1.0).abs() < 0.1, "10 Hz sine RMS ratio {pass:.3}");
    ensure!(stop < 0.1, "200 Hz sine RMS ratio {stop:.4}");

    let spec = SplitSpec::default();
    let mut windows = Vec::new();
    let mut words = Vec::new();
    for story in spec.train_stories.iter().chain(&spec.val_stories).chain(&spec.test_stories) {
        let rec = synth_recording(&SynthSpec::default(), story, 2, 20.0, 1000.0, 5).map_err(|e| e.to_string())?;
        windows.extend(extract_windows(&rec, &WindowConfig::default(), 5).map_err(|e| e.to_string())?);
        words.extend(synth_words(story, 20.0, 1000, 5));
    }
    attach_transcripts(&mut windows, &words, 4.0);
    let split = split_dataset(windows, &spec).map_err(|e| e.to_string())?;
    ensure!(split.audit.test_sentences > 0, "fixture has no test transcripts");
    ensure!(split.audit.overlapping_sentences == 0, "{} overlapping sentences", split.audit.overlapping_sentences);
    Ok(format!(
        "57 windows; resample lengths exact; gains {g10:.3} / {glow:.1} / {ghigh:.1} dB; sine ratios {pass:.3} / {stop:.4}; \
         0 of {} test sentences overlap",
        split.audit.test_sentences
    ))
}

// Metrics.

fn dp_oracle<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
        }
    }
    d[a.len()][b.len()]
}

fn bleu_oracle(pred: &str, refs: &[&str]) -> f64 {
    let p = normalize_words(pred);
    let rs: Vec<Vec<String>> = refs.iter().map(|r| normalize_words(r)).collect();
    if p.is_empty() {
        return 0.0;
    }
    let mut matched = 0usize;
    let mut used: HashMap<&String, usize> = HashMap::new();
    for w in &p {
        let u = used.entry(w).or_insert(0);
        let allowed = rs.iter().map(|r| r.iter().filter(|x| *x == w).count()).max().unwrap();
        if *u < allowed {
            matched += 1;
            *u += 1;
        }
    }
    let mut best = rs[0].len();
    for r in &rs {
        let (d, bd) = (r.len().abs_diff(p.len()), best.abs_diff(p.len()));
        if d < bd || (d == bd && r.len() < best) {
            best = r.len();
        }
    }
    let c = p.len() as f64;
    let bp = if c < best as f64 { (1.0 - best as f64 / c).exp() } else { 1.0 };
    100.0 * bp * matched as f64 / c
}

fn metrics() -> Outcome {
    let e = |r: Result<f64, neurotok::metrics::MetricsError>| r.map_err(|e| e.to_string());
    let same = vec![
        EvalPair::single("The cat sat on the mat.", "The cat sat on the mat."),
        EvalPair::single("incomplete page before him", "incomplete page before him"),
    ];
    let r = rouge1(&same).map_err(|e| e.to_string())?;
    ensure!(e(bleu1(&same))? == 100.0 && r.f == 100.0 && e(cer(&same))? == 0.0, "identical text is not perfect");

    let one = |p: &str, r: &str| vec![EvalPair::single(p, r)];
    let bleu = e(bleu1(&one("the cat ate", "the cat sat on the mat")))?;
    ensure!((bleu - 100.0 * (2.0 / 3.0) * (-1.0f64).exp()).abs() < 1e-9, "BLEU-1 example {bleu}");
    let rouge = rouge1(&one("the cat ate", "the cat sat on the mat")).map_err(|e| e.to_string())?;
    ensure!((rouge.f - 400.0 / 9.0).abs() < 1e-9, "ROUGE-1 example {}", rouge.f);
    let wer_ex = e(wer(&one("the cat sat", "the cat sat on the mat")))?;
    ensure!(wer_ex == 50.0, "WER example {wer_ex}");

    let mut rng = seeded(77);
    let alphabet: Vec<char> = "abcde ".chars().collect();
    // A leading letter keeps every string non-empty after normalization.
    let draw = |rng: &mut neurotok::rng::Rng| -> String {
        let head = alphabet[rng.random_range(0..alphabet.len() - 1)];
        std::iter::once(head)
            .chain((0..rng.random_range(0..30)).map(|_| alphabet[rng.random_range(0..alphabet.len())]))
            .collect()
    };
    let mut worst = 0.0f64;
    for _ in 0..300 {
        let (p, r1, r2) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let (pc, rc): (Vec<char>, Vec<char>) = (p.chars().collect(), r1.chars().collect());
        ensure!(edit_distance(&pc, &rc) == dp_oracle(&pc, &rc), "edit distance of {p:?} / {r1:?}");
        if !rc.is_empty() {
            let got = e(cer(&one(&p, &r1)))?;
            worst = worst.max((got - 100.0 * dp_oracle(&pc, &rc) as f64 / rc.len() as f64).abs());
        }
        let pair = EvalPair::new(p.clone(), vec![r1.clone(), r2.clone()]);
        let got = e(bleu1(&[pair]))?;
        worst = worst.max((got - bleu_oracle(&p, &[&r1, &r2])).abs());
    }
    ensure!(worst <= 1e-9, "oracle disagreement {worst:.2e}");

    let heavy = e(cer(&one("aaaaaaaaaa", "ab")))?;
    ensure!(heavy == 450.0, "insertion-heavy CER {heavy}");
    Ok(format!("identical text exact; hand examples exact; 300 random cases within {worst:.1e}; CER {heavy}%"))
}

// End to end.

fn run_cli(bin: &str, args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = Command::new(bin).args(args).current_dir(cwd).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`neurotok {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn end_to_end() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_neurotok");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let start = Instant::now();
    run_cli(bin, &["synth-data", "--out-dir", "data", "--channels", "2", "--duration-s", "120", "--seed", "1"], d)?;
    let cfg = "data/config.json";
    run_cli(bin, &["preprocess", "--config", cfg], d)?;
    run_cli(bin, &["train-codec", "--config", cfg, "--steps", "500"], d)?;
    let csv = std::fs::read_to_string(d.join("data/out/losses.csv")).map_err(|e| e.to_string())?;
    ensure!(csv.lines().count() == 501, "loss CSV has {} lines", csv.lines().count());
    let window = "data/out/windows/test/000000";
    run_cli(bin, &["tokenize", "--config", cfg, "--input", window, "--output", "tokens.json"], d)?;
    run_cli(bin, &["detokenize", "--config", cfg, "--input", "tokens.json", "--output", "restored"], d)?;
    let (a, b) = (
        neurotok::signal::read_signal(&d.join(window)).map_err(|e| e.to_string())?,
        neurotok::signal::read_signal(&d.join("restored")).map_err(|e| e.to_string())?,
    );
    ensure!(a.samples().dim() == b.samples().dim() && a.header() == b.header(), "detokenized shape differs");
    run_cli(bin, &["build-dataset", "--config", cfg], d)?;
    let out = run_cli(
        bin,
        &["evaluate", "--dataset", "data/out/dataset/test.jsonl", "--echo", "--out-dir", "eval"],
        d,
    )?;
    let secs = start.elapsed().as_secs_f64();
    let report: serde_json::Value = serde_json::from_str(&out).map_err(|e| e.to_string())?;
    let bleu = report["summary"]["bleu1_pct"].as_f64().unwrap_or(f64::NAN);
    let pairs = report["summary"]["pairs"].as_u64().unwrap_or(0);
    ensure!(pairs > 0, "no text references were evaluated");
    ensure!(bleu == 100.0, "echoed BLEU-1 is {bleu}");
    ensure!(secs < 900.0, "took {secs:.0}s");
    Ok(format!("all commands exit 0; {pairs} echoed pairs score BLEU-1 {bleu}; {secs:.0}s"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradient_suite),
        ("loss identities", loss_identities),
        ("codec training run", codec_training),
        ("RVQ suite", rvq_suite),
        ("token format", token_format),
        ("preprocessing", preprocessing),
        ("metrics", metrics),
        ("end-to-end smoke", end_to_end),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
        std::io::stdout().flush().ok();
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
