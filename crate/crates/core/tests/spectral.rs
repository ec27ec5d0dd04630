use neurotok::rng::seeded;
use neurotok::spectral::{hann_window, multi_scale_spectra, stft, StftConfig};
use rand::Rng;
use rustfft::num_complex::Complex64;
use std::f64::consts::PI;

fn naive_stft(x: &[f64], win: usize, hop: usize) -> Vec<Vec<Complex64>> {
    let w = hann_window(win);
    let frames = (x.len() - win) / hop + 1;
    (0..win / 2 + 1)
        .map(|k| {
            (0..frames)
                .map(|f| {
                    (0..win)
                        .map(|n| {
                            let ang = -2.0 * PI * (k * n) as f64 / win as f64;
                            Complex64::from_polar(x[f * hop + n] * w[n], ang)
                        })
                        .sum()
                })
                .collect()
        })
        .collect()
}

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn constant_input_puts_window_sum_in_bin_zero() {
    let s = stft(&[1.0; 32], 32, 8).unwrap();
    let wsum: f64 = hann_window(32).iter().sum();
    assert!((s[[0, 0]].norm() - wsum).abs() < 1e-9);
    for k in 1..17 {
        // The periodic Hann window leaks into bin 1 only.
        if k > 1 {
            assert!(s[[k, 0]].norm() < 1e-9, "bin {k}: {}", s[[k, 0]].norm());
        }
    }
}

#[test]
fn bin_centred_sine_peaks_at_its_bin() {
    for k in 1..15 {
        let x: Vec<f64> = (0..32).map(|n| (2.0 * PI * k as f64 * n as f64 / 32.0).sin()).collect();
        let s = stft(&x, 32, 8).unwrap();
        let peak = (0..17)
            .max_by(|&a, &b| s[[a, 0]].norm().total_cmp(&s[[b, 0]].norm()))
            .unwrap();
        assert_eq!(peak, k);
    }
}

#[test]
fn agrees_with_direct_dft() {
    for (seed, (win, hop)) in [(64, 16), (32, 8), (128, 32), (256, 64)].into_iter().enumerate() {
        let x = noise(256, seed as u64);
        let fast = stft(&x, win, hop).unwrap();
        let slow = naive_stft(&x, win, hop);
        for (k, row) in slow.iter().enumerate() {
            for (f, v) in row.iter().enumerate() {
                assert!((fast[[k, f]] - v).norm() < 1e-6);
            }
        }
    }
}

#[test]
fn linear() {
    let (a, b) = (noise(200, 1), noise(200, 2));
    let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.5 * x - 0.5 * y).collect();
    let (sa, sb, sm) = (stft(&a, 64, 16).unwrap(), stft(&b, 64, 16).unwrap(), stft(&mix, 64, 16).unwrap());
    for ((x, y), m) in sa.iter().zip(sb.iter()).zip(sm.iter()) {
        let expect = x * 2.5 - y * 0.5;
        assert!((expect - m).norm() <= 1e-6 * (1.0 + m.norm()));
    }
}

#[test]
fn energy_is_proportional_under_cola_hop() {
    // With hop = window / 4 the squared Hann windows overlap-add to a
    // constant 3/8 * window / hop on interior samples, so by Parseval the
    // total spectral energy is `sum(w^2) / hop * sum(x^2) * win`, counting
    // both spectrum halves.
    let (win, hop) = (64, 16);
    let w = hann_window(win);
    let wsq: f64 = w.iter().map(|v| v * v).sum();
    for seed in 0..5 {
        let mut x = noise(4096, seed);
        // Taper the edges so frames cover every sample uniformly.
        for i in 0..win {
            x[i] = 0.0;
            let n = x.len();
            x[n - 1 - i] = 0.0;
        }
        let s = stft(&x, win, hop).unwrap();
        let mut energy = 0.0;
        for f in 0..s.ncols() {
            for k in 0..s.nrows() {
                let weight = if k == 0 || k == win / 2 { 1.0 } else { 2.0 };
                energy += weight * s[[k, f]].norm_sqr();
            }
        }
        let signal: f64 = x.iter().map(|v| v * v).sum();
        let predicted = win as f64 * wsq / hop as f64 * signal;
        assert!((energy / predicted - 1.0).abs() < 0.01, "{}", energy / predicted);
    }
}

#[test]
fn multi_scale_is_deterministic_and_zero_safe() {
    let x = noise(1600, 9);
    let a = multi_scale_spectra(&x, &StftConfig::default()).unwrap();
    let b = multi_scale_spectra(&x, &StftConfig::default()).unwrap();
    assert_eq!(a, b);
    let z = multi_scale_spectra(&[0.0; 1600], &StftConfig::default()).unwrap();
    assert!(z.iter().all(|s| s.magnitude.iter().all(|&m| m == 0.0)));
    assert!(multi_scale_spectra(&x[..400], &StftConfig::default()).is_err());
}
