//! Rational-ratio polyphase resampling with a Kaiser-windowed sinc kernel.

use super::PreprocessError;

/// Input taps contributing to each output sample.
pub const TAPS_PER_PHASE: usize = 64;
pub const KAISER_BETA: f64 = 8.0;

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Reduces `target / source` to `(up, down)` at millihertz resolution.
pub fn rational_ratio(source_hz: f64, target_hz: f64) -> Result<(usize, usize), PreprocessError> {
    let valid = |r: f64| r.is_finite() && r > 0.0;
    if !valid(source_hz) || !valid(target_hz) {
        return Err(PreprocessError::InvalidRate {
            source_hz,
            target_hz,
        });
    }
    let s = (source_hz * 1000.0).round() as u64;
    let t = (target_hz * 1000.0).round() as u64;
    if s == 0 || t == 0 {
        return Err(PreprocessError::InvalidRate {
            source_hz,
            target_hz,
        });
    }
    let g = gcd(s, t);
    Ok(((t / g) as usize, (s / g) as usize))
}

/// Precomputed polyphase filter bank for one rate pair.
#[derive(Clone, Debug)]
pub struct Resampler {
    up: usize,
    down: usize,
    /// `phases[r][j]` weights input `q + j - (TAPS_PER_PHASE / 2 - 1)` for an
    /// output landing at fractional input position `q + r / up`.
    phases: Vec<Vec<f64>>,
}

impl Resampler {
    pub fn new(source_hz: f64, target_hz: f64) -> Result<Self, PreprocessError> {
        let (up, down) = rational_ratio(source_hz, target_hz)?;
        let half = (TAPS_PER_PHASE / 2) as f64;
        // Cutoff at the lower of the two Nyquist rates, relative to the input's.
        let cutoff = (up as f64 / down as f64).min(1.0);
        let i0_beta = bessel_i0(KAISER_BETA);
        let phases = (0..up)
            .map(|r| {
                let frac = r as f64 / up as f64;
                let mut taps: Vec<f64> = (0..TAPS_PER_PHASE)
                    .map(|j| {
                        let tau = frac - (j as f64 - (half - 1.0));
                        let u = (tau / half).clamp(-1.0, 1.0);
                        let w = bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / i0_beta;
                        cutoff * sinc(cutoff * tau) * w
                    })
                    .collect();
                let sum: f64 = taps.iter().sum();
                taps.iter_mut().for_each(|t| *t /= sum);
                taps
            })
            .collect();
        Ok(Self { up, down, phases })
    }

    pub fn ratio(&self) -> (usize, usize) {
        (self.up, self.down)
    }

    /// Output length `round(len * up / down)`.
    pub fn output_len(&self, len: usize) -> usize {
        ((len as f64) * self.up as f64 / self.down as f64).round() as usize
    }

    /// Resamples one channel; samples outside the input are taken as zero.
    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        if self.up == self.down {
            return x.to_vec();
        }
        let n_out = self.output_len(x.len());
        let offset = TAPS_PER_PHASE / 2 - 1;
        (0..n_out)
            .map(|m| {
                let pos = m * self.down;
                let q = pos / self.up;
                let taps = &self.phases[pos % self.up];
                let start = q as isize - offset as isize;
                taps.iter()
                    .enumerate()
                    .filter_map(|(j, &h)| {
                        let k = start + j as isize;
                        (k >= 0 && (k as usize) < x.len()).then(|| h * x[k as usize])
                    })
                    .sum()
            })
            .collect()
    }
}
