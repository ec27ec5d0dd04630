//! Windowed DFT magnitude features with an analytic backward pass.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{cst, Real};
use crate::spectral::hann_window;

/// Floor added under the square root of `re^2 + im^2`.
pub const MAGNITUDE_EPS: f64 = 1e-8;

pub(crate) struct DftPlan<T: Real> {
    pub window_len: usize,
    pub hop: usize,
    window: Vec<T>,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Real> std::fmt::Debug for DftPlan<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DftPlan")
            .field("window_len", &self.window_len)
            .field("hop", &self.hop)
            .finish()
    }
}

impl<T: Real> DftPlan<T> {
    pub fn new(window_len: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            window_len,
            hop,
            window: hann_window(window_len).into_iter().map(cst).collect(),
            forward: planner.plan_fft_forward(window_len),
            inverse: planner.plan_fft_inverse(window_len),
        }
    }

    pub fn bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        (len - self.window_len) / self.hop + 1
    }
}

/// Returns magnitudes laid out `[B, bins, frames]` and the complex spectra
/// `[B, frames, bins]` kept for the backward pass.
pub(crate) fn forward<T: Real>(
    plan: &DftPlan<T>,
    x: &[T],
    batch: usize,
    len: usize,
) -> (Vec<T>, Vec<Complex<T>>) {
    let n = plan.window_len;
    let bins = plan.bins();
    let frames = plan.frames(len);
    let eps: T = cst(MAGNITUDE_EPS);
    let mut mags = vec![T::zero(); batch * bins * frames];
    let mut spectra = Vec::with_capacity(batch * frames * bins);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); plan.forward.get_inplace_scratch_len()];
    for b in 0..batch {
        let xr = &x[b * len..][..len];
        for f in 0..frames {
            let seg = &xr[f * plan.hop..][..n];
            for ((c, &s), &w) in buf.iter_mut().zip(seg).zip(&plan.window) {
                *c = Complex::new(s * w, T::zero());
            }
            plan.forward.process_with_scratch(&mut buf, &mut scratch);
            for (k, c) in buf.iter().take(bins).enumerate() {
                mags[(b * bins + k) * frames + f] = (c.norm_sqr() + eps).sqrt();
                spectra.push(*c);
            }
        }
    }
    (mags, spectra)
}

pub(crate) fn backward<T: Real>(
    plan: &DftPlan<T>,
    gout: &[T],
    mags: &[T],
    spectra: &[Complex<T>],
    batch: usize,
    len: usize,
    gx: &mut [T],
) {
    let n = plan.window_len;
    let bins = plan.bins();
    let frames = plan.frames(len);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); plan.inverse.get_inplace_scratch_len()];
    for b in 0..batch {
        for f in 0..frames {
            buf.fill(Complex::new(T::zero(), T::zero()));
            for k in 0..bins {
                let idx = (b * bins + k) * frames + f;
                let scale = gout[idx] / mags[idx];
                let c = spectra[(b * frames + f) * bins + k];
                // d|X|/dRe = Re/|X|, d|X|/dIm = Im/|X|
                buf[k] = Complex::new(c.re * scale, c.im * scale);
            }
            // d/du_n of sum_k (gr_k Re X_k + gi_k Im X_k) = Re(sum_k G_k e^{+2 pi i k n / N})
            plan.inverse.process_with_scratch(&mut buf, &mut scratch);
            let gxr = &mut gx[b * len + f * plan.hop..][..n];
            for ((g, c), &w) in gxr.iter_mut().zip(&buf).zip(&plan.window) {
                *g = *g + c.re * w;
            }
        }
    }
}
