//! Butterworth band-pass design in second-order sections and zero-phase
//! forward-backward filtering.

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex64;
use std::f64::consts::PI;

use super::PreprocessError;

/// One direct-form-II-transposed biquad; `a[0]` is 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + self.b[1] * z_inv + self.b[2] * z2)
            / (self.a[0] + self.a[1] * z_inv + self.a[2] * z2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
}

impl SosFilter {
    /// Digital Butterworth band-pass of prototype order `order` (the
    /// resulting transfer function has order `2 * order`), designed by
    /// pre-warped bilinear transform and normalised to unit gain at the
    /// band centre.
    pub fn butter_bandpass(
        order: usize,
        low_hz: f64,
        high_hz: f64,
        sample_rate_hz: f64,
    ) -> Result<Self, PreprocessError> {
        let nyquist = sample_rate_hz / 2.0;
        if !(order > 0 && low_hz > 0.0 && low_hz < high_hz && high_hz < nyquist) {
            return Err(PreprocessError::InvalidBand {
                low_hz,
                high_hz,
                nyquist_hz: nyquist,
            });
        }
        let fs2 = 2.0 * sample_rate_hz;
        let w1 = fs2 * (PI * low_hz / sample_rate_hz).tan();
        let w2 = fs2 * (PI * high_hz / sample_rate_hz).tan();
        let bw = w2 - w1;
        let w0 = (w1 * w2).sqrt();

        let mut poles = Vec::with_capacity(2 * order);
        for k in 0..order {
            let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            let p = Complex64::from_polar(1.0, theta);
            let half = p * (bw / 2.0);
            let root = (half * half - w0 * w0).sqrt();
            for s in [half + root, half - root] {
                poles.push((fs2 + s) / (fs2 - s));
            }
        }

        let mut sections = pair_poles(poles)
            .into_iter()
            .map(|a| Biquad { b: [1.0, 0.0, -1.0], a })
            .collect::<Vec<_>>();
        let center = 2.0 * (w0 / fs2).atan();
        let mut filter = SosFilter { sections: sections.clone() };
        let gain = filter.response_at_digital(center).norm();
        for c in &mut sections[0].b {
            *c /= gain;
        }
        filter.sections = sections;
        Ok(filter)
    }

    fn response_at_digital(&self, omega: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -omega);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    /// Complex response of a single forward pass at `freq_hz`.
    pub fn frequency_response(&self, freq_hz: f64, sample_rate_hz: f64) -> Complex64 {
        self.response_at_digital(2.0 * PI * freq_hz / sample_rate_hz)
    }

    /// Magnitude in dB of the zero-phase (forward-backward) filter.
    pub fn zero_phase_gain_db(&self, freq_hz: f64, sample_rate_hz: f64) -> f64 {
        40.0 * self.frequency_response(freq_hz, sample_rate_hz).norm().log10()
    }

    /// Filters `x` in place from `state` and returns the final state.
    fn run(&self, x: &mut [f64], mut state: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
        for (s, z) in self.sections.iter().zip(state.iter_mut()) {
            let [b0, b1, b2] = s.b;
            let [_, a1, a2] = s.a;
            for v in x.iter_mut() {
                let xin = *v;
                let y = b0 * xin + z[0];
                z[0] = b1 * xin - a1 * y + z[1];
                z[1] = b2 * xin - a2 * y;
                *v = y;
            }
        }
        state
    }

    /// Single forward pass from rest.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        self.run(&mut y, vec![[0.0; 2]; self.sections.len()]);
        y
    }

    /// Zero-phase filtering of one signal. See [`ZeroPhase`].
    pub fn filtfilt(&self, x: &[f64], padlen: usize) -> Vec<f64> {
        self.zero_phase(x.len(), padlen).apply(x)
    }

    /// Prepares zero-phase filtering of signals of length `len`.
    pub fn zero_phase(&self, len: usize, padlen: usize) -> ZeroPhase {
        ZeroPhase::new(self.clone(), len, padlen)
    }

    fn state_dim(&self) -> usize {
        2 * self.sections.len()
    }

    fn unit_state(&self, j: usize) -> Vec<[f64; 2]> {
        let mut z = vec![[0.0; 2]; self.sections.len()];
        z[j / 2][j % 2] = 1.0;
        z
    }

    fn state_from(&self, v: &[f64]) -> Vec<[f64; 2]> {
        v.chunks(2).map(|c| [c[0], c[1]]).collect()
    }

    /// Number of samples after which every zero-input response has decayed
    /// below `1e-12` of its peak, capped at `cap`.
    fn decay_len(&self, cap: usize) -> usize {
        const BLOCK: usize = 256;
        let k = self.state_dim();
        let mut states: Vec<Vec<[f64; 2]>> = (0..k).map(|j| self.unit_state(j)).collect();
        let mut peak = 0.0f64;
        let mut done = 0;
        while done < cap {
            let mut block_max = 0.0f64;
            for z in &mut states {
                let mut y = vec![0.0; BLOCK];
                *z = self.run(&mut y, std::mem::take(z));
                block_max = y.iter().fold(block_max, |m, v| m.max(v.abs()));
            }
            peak = peak.max(block_max);
            done += BLOCK;
            if block_max <= 1e-12 * peak {
                break;
            }
        }
        done.min(cap)
    }
}

/// Zero-phase forward-backward filtering with initial states chosen by
/// Gustafsson's method.
///
/// The input is odd-reflection padded by `padlen` samples. The forward and
/// backward initial states are the least-squares solution that makes
/// forward-backward filtering agree with backward-forward filtering, which
/// removes the start-up transients. Steady-state initial conditions fail
/// badly here: with a 0.1 Hz edge any mismatch between the first sample
/// and the local level rings for tens of seconds.
///
/// Everything that depends only on the filter and the length is computed
/// once, so one plan can filter many channels.
#[derive(Clone, Debug)]
pub struct ZeroPhase {
    filter: SosFilter,
    len: usize,
    pad: usize,
    /// Rows of the padded signal covered by each least-squares block.
    span: usize,
    /// Pseudo-inverse mapping the forward/backward mismatch to the two
    /// initial states, `[2k, rows]`.
    solve: DMatrix<f64>,
}

impl ZeroPhase {
    fn new(filter: SosFilter, len: usize, padlen: usize) -> Self {
        let pad = padlen.min(len.saturating_sub(1));
        let n = len + 2 * pad;
        let k = filter.state_dim();
        // The two boundary blocks must not overlap; otherwise solve the
        // full system.
        let m = match filter.decay_len(n) {
            m if 2 * m > n => n,
            m => m,
        };
        // Response of the output to each unit initial state with zero
        // input (`obs`), and the same responses reversed and filtered
        // again from rest (`s`).
        let mut obs = DMatrix::zeros(m, k);
        let mut s = DMatrix::zeros(m, k);
        for j in 0..k {
            let mut col = vec![0.0; m];
            filter.run(&mut col, filter.unit_state(j));
            for (i, v) in col.iter().enumerate() {
                obs[(i, j)] = *v;
            }
            col.reverse();
            filter.run(&mut col, vec![[0.0; 2]; filter.sections.len()]);
            for (i, v) in col.iter().enumerate() {
                s[(i, j)] = *v;
            }
        }
        let reversed = |a: &DMatrix<f64>| DMatrix::from_fn(m, k, |i, j| a[(m - 1 - i, j)]);
        let (sr, obsr) = (reversed(&s), reversed(&obs));
        let m_mat = if m == n {
            let mut full = DMatrix::zeros(n, 2 * k);
            full.view_mut((0, 0), (n, k)).copy_from(&(&sr - &obs));
            full.view_mut((0, k), (n, k)).copy_from(&(&obsr - &s));
            full
        } else {
            let mut blocks = DMatrix::zeros(2 * m, 2 * k);
            blocks.view_mut((0, 0), (m, k)).copy_from(&(&sr - &obs));
            blocks.view_mut((m, k), (m, k)).copy_from(&(&obsr - &s));
            blocks
        };
        let solve = m_mat
            .svd(true, true)
            .pseudo_inverse(1e-12)
            .expect("SVD computed with both factors");
        Self {
            filter,
            len,
            pad,
            span: m,
            solve,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Filters `x`, which must have the length the plan was built for.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.len, "signal length differs from the plan");
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = self.pad;
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        let f = &self.filter;
        let rest = || vec![[0.0; 2]; f.sections.len()];
        let fwd_bwd = |v: &[f64], zf: Vec<[f64; 2]>, zb: Vec<[f64; 2]>| {
            let mut y = v.to_vec();
            f.run(&mut y, zf);
            y.reverse();
            f.run(&mut y, zb);
            y.reverse();
            y
        };
        let y_fb = fwd_bwd(&ext, rest(), rest());
        let mut y_bf = ext.clone();
        y_bf.reverse();
        f.run(&mut y_bf, rest());
        y_bf.reverse();
        f.run(&mut y_bf, rest());

        let total = ext.len();
        let m = self.span;
        let delta: DVector<f64> = if m == total {
            DVector::from_fn(total, |i, _| y_bf[i] - y_fb[i])
        } else {
            DVector::from_fn(2 * m, |i, _| {
                let t = if i < m { i } else { total - 2 * m + i };
                y_bf[t] - y_fb[t]
            })
        };
        let ic = &self.solve * delta;
        let k = f.state_dim();
        let y = fwd_bwd(&ext, f.state_from(&ic.as_slice()[..k]), f.state_from(&ic.as_slice()[k..]));
        y[pad..pad + n].to_vec()
    }
}

/// Groups poles into denominators `[1, a1, a2]`: conjugate pairs first,
/// then remaining real poles two at a time.
fn pair_poles(poles: Vec<Complex64>) -> Vec<[f64; 3]> {
    const TOL: f64 = 1e-12;
    let mut out = Vec::new();
    let mut reals = Vec::new();
    for p in &poles {
        if p.im > TOL {
            out.push([1.0, -2.0 * p.re, p.norm_sqr()]);
        } else if p.im.abs() <= TOL {
            reals.push(p.re);
        }
    }
    for pair in reals.chunks(2) {
        match *pair {
            [r1, r2] => out.push([1.0, -(r1 + r2), r1 * r2]),
            [r] => out.push([1.0, -r, 0.0]),
            _ => unreachable!(),
        }
    }
    out
}
