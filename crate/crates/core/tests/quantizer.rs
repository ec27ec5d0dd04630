use ndarray::{array, Array2, ArrayView1};
use neurotok::quantizer::{commitment_loss, entropy, code_histogram, Quantized, QuantizerError, RvqConfig, RvqState};
use neurotok::rng::seeded;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn config(stages: usize, v: usize, r: usize) -> RvqConfig {
    RvqConfig {
        num_stages: stages,
        codebook_size: v,
        dim: r,
        ..Default::default()
    }
}

fn normal(shape: (usize, usize), seed: u64) -> Array2<f32> {
    let mut rng = seeded(seed);
    Array2::from_shape_fn(shape, |_| StandardNormal.sample(&mut rng))
}

fn brute_force(book: &Array2<f32>, v: ArrayView1<f32>) -> usize {
    let mut best = (0, f64::INFINITY);
    for k in 0..book.nrows() {
        let d: f64 = (0..v.len())
            .map(|r| (f64::from(v[r]) - f64::from(book[[k, r]])).powi(2))
            .sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

#[test]
fn exact_codeword_quantizes_to_itself() {
    let book = normal((16, 4), 1);
    let state = RvqState::from_codebooks(config(1, 16, 4), vec![book.clone()]).unwrap();
    let z = book.row(11).to_owned().insert_axis(ndarray::Axis(1));
    let q = state.quantize(z.view()).unwrap();
    assert_eq!(q.codes[[0, 0]], 11);
    assert_eq!(q.z_q, z);
    assert_eq!(commitment_loss(&q.residuals, &q.selected).unwrap(), 0.0);
}

#[test]
fn two_stage_construction_is_recovered_exactly() {
    // Coarse codewords 10 apart, fine codewords of norm <= 1.
    let coarse = Array2::from_shape_fn((8, 2), |(k, r)| if r == 0 { 10.0 * k as f32 } else { -10.0 * k as f32 });
    let fine = Array2::from_shape_fn((8, 2), |(k, r)| 0.125 * (k as f32 - 4.0) * if r == 0 { 1.0 } else { 0.5 });
    let state = RvqState::from_codebooks(config(2, 8, 2), vec![coarse.clone(), fine.clone()]).unwrap();
    for (a, b) in [(0, 3), (5, 7), (7, 0), (2, 4)] {
        let z = (&coarse.row(a) + &fine.row(b)).insert_axis(ndarray::Axis(1));
        let q = state.quantize(z.view()).unwrap();
        assert_eq!((q.codes[[0, 0]], q.codes[[1, 0]]), (a as u32, b as u32));
        assert_eq!(q.z_q, z);
    }
}

#[test]
fn matches_brute_force_per_stage() {
    for seed in 0..5 {
        let books = vec![normal((16, 4), seed), normal((16, 4), seed + 100)];
        let state = RvqState::from_codebooks(config(2, 16, 4), books.clone()).unwrap();
        let z = normal((4, 50), seed + 200);
        let q = state.quantize(z.view()).unwrap();
        for t in 0..50 {
            let a = brute_force(&books[0], z.column(t));
            let residual = &z.column(t) - &books[0].row(a);
            let b = brute_force(&books[1], residual.view());
            assert_eq!(q.codes[[0, t]] as usize, a);
            assert_eq!(q.codes[[1, t]] as usize, b);
        }
    }
}

#[test]
fn dequantize_examples_and_errors() {
    let book = normal((8, 3), 4);
    let state = RvqState::from_codebooks(config(1, 8, 3), vec![book.clone()]).unwrap();
    let z = state.dequantize(array![[5u32]].view()).unwrap();
    assert_eq!(z.column(0), book.row(5));
    assert_eq!(
        state.dequantize(array![[1u32, 8]].view()),
        Err(QuantizerError::CodeOutOfRange {
            stage: 0,
            column: 1,
            code: 8,
            size: 8
        })
    );
    assert!(matches!(
        state.dequantize(array![[1u32], [2]].view()),
        Err(QuantizerError::StageMismatch { expected: 1, found: 2 })
    ));
    let full = RvqState::from_codebooks(config(1, 8192, 2), vec![normal((8192, 2), 5)]).unwrap();
    assert!(matches!(
        full.dequantize(array![[8192u32]].view()),
        Err(QuantizerError::CodeOutOfRange { code: 8192, size: 8192, .. })
    ));
}

#[test]
fn dimension_mismatch_and_non_finite_inputs() {
    let state = RvqState::from_codebooks(config(1, 4, 3), vec![normal((4, 3), 0)]).unwrap();
    assert_eq!(
        state.quantize(Array2::zeros((2, 5)).view()),
        Err(QuantizerError::DimensionMismatch { expected: 3, found: 2 })
    );
    let mut z = Array2::zeros((3, 2));
    z[[1, 1]] = f32::NAN;
    assert_eq!(state.quantize(z.view()), Err(QuantizerError::NonFinite { row: 1, column: 1 }));
}

#[test]
fn commitment_loss_examples() {
    let z = vec![array![[1.0f32], [0.0]]];
    let q = vec![array![[0.0f32], [0.0]]];
    assert_eq!(commitment_loss(&z, &q).unwrap(), 0.5);

    let zs = vec![normal((4, 7), 1), normal((4, 7), 2)];
    let qs = vec![normal((4, 7), 3), normal((4, 7), 4)];
    let mut expect = 0.0;
    for (a, b) in zs.iter().zip(&qs) {
        let mut s = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            s += (f64::from(*x) - f64::from(*y)).powi(2);
        }
        expect += s / 28.0;
    }
    assert!((commitment_loss(&zs, &qs).unwrap() - expect).abs() < 1e-6);
    assert!(commitment_loss(&zs, &qs[..1]).is_err());
}

fn fixed_assignment(code: u32, v: &[f32], n: usize) -> Quantized {
    let col = Array2::from_shape_fn((v.len(), n), |(r, _)| v[r]);
    Quantized {
        codes: Array2::from_elem((1, n), code),
        z_q: col.clone(),
        residuals: vec![col.clone()],
        selected: vec![col],
    }
}

#[test]
fn ema_converges_to_repeated_input() {
    let cfg = RvqConfig {
        dead_code_window: 1_000_000,
        ..config(1, 4, 2)
    };
    let mut state = RvqState::from_codebooks(cfg, vec![normal((4, 2), 9)]).unwrap();
    let target = [0.75f32, -2.0];
    let q = fixed_assignment(0, &target, 16);
    let mut rng = seeded(0);
    for _ in 0..1500 {
        state.update_ema(&q, &mut rng).unwrap();
    }
    for (r, &v) in target.iter().enumerate() {
        assert!((state.stages[0].entries[[0, r]] - v).abs() < 1e-3);
    }
}

#[test]
fn unused_codewords_are_reseeded_after_the_window() {
    let cfg = RvqConfig {
        dead_code_window: 5,
        ..config(1, 4, 2)
    };
    let before = normal((4, 2), 2);
    let mut state = RvqState::from_codebooks(cfg, vec![before.clone()]).unwrap();
    let q = fixed_assignment(0, &[3.0, 4.0], 8);
    let mut rng = seeded(0);
    for _ in 0..4 {
        assert_eq!(state.update_ema(&q, &mut rng).unwrap(), 0);
    }
    assert_eq!(state.stages[0].entries.row(2), before.row(2));
    assert_eq!(state.update_ema(&q, &mut rng).unwrap(), 3);
    for k in 1..4 {
        assert_eq!(state.stages[0].entries.row(k).to_vec(), vec![3.0, 4.0]);
        assert_eq!(state.stages[0].usage_counts[k], 0);
    }
    assert_eq!(state.stages[0].usage_counts[0], 40);
}

#[test]
fn zero_decay_gives_batch_means() {
    let cfg = RvqConfig {
        decay: 0.0,
        dead_code_window: 1_000_000,
        ..config(1, 8, 3)
    };
    let mut state = RvqState::from_codebooks(cfg, vec![normal((8, 3), 7)]).unwrap();
    let z = normal((3, 200), 8);
    let q = state.quantize(z.view()).unwrap();
    state.update_ema(&q, &mut seeded(0)).unwrap();
    for k in 0..8u32 {
        let cols: Vec<usize> = (0..200).filter(|&t| q.codes[[0, t]] == k).collect();
        if cols.is_empty() {
            continue;
        }
        for r in 0..3 {
            let mean = cols.iter().map(|&t| f64::from(z[[r, t]])).sum::<f64>() / cols.len() as f64;
            let got = f64::from(state.stages[0].entries[[k as usize, r]]);
            // Only the 1e-5 Laplace term separates the two.
            assert!((got - mean).abs() <= 1e-4 * (1.0 + mean.abs()), "code {k}: {got} vs {mean}");
        }
    }
}

fn train(state: &mut RvqState, steps: usize, batch: usize, seed: u64) {
    let mut rng = seeded(seed);
    let first = normal((state.dim(), batch), seed + 1);
    state.initialize_from(first.view(), &mut rng).unwrap();
    for step in 0..steps {
        let z = normal((state.dim(), batch), seed + 2 + step as u64);
        let q = state.quantize(z.view()).unwrap();
        state.update_ema(&q, &mut rng).unwrap();
    }
}

#[test]
fn no_codebook_collapse_on_gaussian_data() {
    let mut state = RvqState::new(config(1, 64, 8), &mut seeded(3)).unwrap();
    train(&mut state, 1000, 256, 10);
    let z = normal((8, 4096), 99);
    let q = state.quantize(z.view()).unwrap();
    let h = entropy(&code_histogram(q.codes.row(0), 64));
    assert!(h > 0.5 * 64f64.ln(), "entropy {h}");
}

fn column_norms(m: &Array2<f32>) -> Vec<f64> {
    m.columns()
        .into_iter()
        .map(|c| c.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt())
        .collect()
}

#[test]
fn residual_energy_never_grows_with_a_zero_codeword() {
    let cfg = RvqConfig {
        pin_zero_codeword: true,
        ..config(4, 32, 4)
    };
    let mut state = RvqState::new(cfg, &mut seeded(1)).unwrap();
    train(&mut state, 50, 128, 20);
    assert!(state.stages.iter().all(|s| s.entries.row(0).iter().all(|&v| v == 0.0)));
    let z = normal((4, 500), 21);
    let q = state.quantize(z.view()).unwrap();
    let mut stage_inputs = q.residuals.clone();
    stage_inputs.push(&z - &q.z_q);
    for pair in stage_inputs.windows(2) {
        for (a, b) in column_norms(&pair[0]).iter().zip(column_norms(&pair[1])) {
            assert!(b <= *a + 1e-6, "{b} > {a}");
        }
    }
}

#[test]
fn residual_energy_on_trained_codebooks() {
    let mut state = RvqState::new(config(4, 32, 4), &mut seeded(2)).unwrap();
    train(&mut state, 200, 128, 30);
    let z = normal((4, 500), 31);
    let q = state.quantize(z.view()).unwrap();
    let mut stage_inputs = q.residuals.clone();
    stage_inputs.push(&z - &q.z_q);
    let total = |m: &Array2<f32>| column_norms(m).iter().sum::<f64>();
    for pair in stage_inputs.windows(2) {
        assert!(total(&pair[1]) <= total(&pair[0]));
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut state = RvqState::new(config(2, 16, 4), &mut seeded(5)).unwrap();
    train(&mut state, 10, 64, 40);
    let entries = state.checkpoint_entries();
    assert!(entries.iter().any(|e| e.name == "rvq.stage1.entries"));
    let back = RvqState::from_checkpoint(state.config.clone(), &entries).unwrap();
    for (a, b) in state.stages.iter().zip(&back.stages) {
        assert_eq!(a.entries, b.entries);
    }
    let missing: Vec<_> = entries.into_iter().filter(|e| e.name != "rvq.stage0.entries").collect();
    assert!(matches!(
        RvqState::from_checkpoint(state.config.clone(), &missing),
        Err(QuantizerError::Checkpoint(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn single_stage_codes_are_idempotent(seed in 0u64..10_000, n in 1usize..40) {
        let mut rng = seeded(seed);
        let state = RvqState::from_codebooks(config(1, 16, 3), vec![normal((16, 3), seed)]).unwrap();
        let z = Array2::from_shape_fn((3, n), |_| rng.random_range(-3.0f32..3.0));
        let q = state.quantize(z.view()).unwrap();
        let back = state.dequantize(q.codes.view()).unwrap();
        prop_assert_eq!(&back, &q.z_q);
        let again = state.quantize(back.view()).unwrap();
        prop_assert_eq!(again.codes, q.codes);
    }

    /// With later stages much finer than the first stage's spacing every
    /// stage re-selects its own codeword.
    #[test]
    fn scale_separated_stages_are_idempotent(seed in 0u64..10_000, n in 1usize..40, stages in 2usize..4) {
        let mut rng = seeded(seed);
        let books: Vec<_> = (0..stages)
            .map(|s| normal((16, 3), seed * 7 + s as u64) * 0.02f32.powi(s as i32))
            .collect();
        let state = RvqState::from_codebooks(config(stages, 16, 3), books.clone()).unwrap();
        let min_gap = (0..16)
            .flat_map(|a| (0..a).map(move |b| (a, b)))
            .map(|(a, b)| (&books[0].row(a) - &books[0].row(b)).mapv(|v| v * v).sum().sqrt())
            .fold(f32::INFINITY, f32::min);
        prop_assume!(min_gap > 0.2);
        let z = Array2::from_shape_fn((3, n), |_| rng.random_range(-3.0f32..3.0));
        let q = state.quantize(z.view()).unwrap();
        let again = state.quantize(state.dequantize(q.codes.view()).unwrap().view()).unwrap();
        prop_assert_eq!(again.codes, q.codes);
    }
}
