//! Multi-scale short-time Fourier analysis.
//!
//! Frames are fully interior (no centre padding): frame `t` covers samples
//! `[t * hop, t * hop + window)`, is multiplied by a periodic Hann window
//! and transformed to a one-sided spectrum of `window / 2 + 1` bins.

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("input of length {len} is shorter than window {window}")]
    InputTooShort { len: usize, window: usize },
    #[error("invalid scale: window {window}, hop {hop} (need window > hop > 0)")]
    InvalidScale { window: usize, hop: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftScale {
    pub window_length: usize,
    pub hop_length: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub scales: Vec<StftScale>,
}

impl Default for StftConfig {
    /// Five scales: (512, 128) halved four times down to (32, 8).
    fn default() -> Self {
        Self::halving(512, 128, 5)
    }
}

impl StftConfig {
    pub fn halving(window_length: usize, hop_length: usize, count: usize) -> Self {
        Self {
            scales: (0..count)
                .map(|i| StftScale {
                    window_length: window_length >> i,
                    hop_length: hop_length >> i,
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), SpectralError> {
        for s in &self.scales {
            if !(s.window_length > s.hop_length && s.hop_length > 0) {
                return Err(SpectralError::InvalidScale {
                    window: s.window_length,
                    hop: s.hop_length,
                });
            }
        }
        Ok(())
    }

    pub fn largest_window(&self) -> usize {
        self.scales.iter().map(|s| s.window_length).max().unwrap_or(0)
    }
}

/// Periodic Hann window `0.5 - 0.5 cos(2 pi n / N)`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn num_frames(len: usize, window_length: usize, hop_length: usize) -> usize {
    (len - window_length) / hop_length + 1
}

/// One-sided STFT, shape `[window_length / 2 + 1, frames]`.
pub fn stft(
    x: &[f64],
    window_length: usize,
    hop_length: usize,
) -> Result<Array2<Complex64>, SpectralError> {
    if !(window_length > hop_length && hop_length > 0) {
        return Err(SpectralError::InvalidScale {
            window: window_length,
            hop: hop_length,
        });
    }
    if x.len() < window_length {
        return Err(SpectralError::InputTooShort {
            len: x.len(),
            window: window_length,
        });
    }
    let bins = window_length / 2 + 1;
    let frames = num_frames(x.len(), window_length, hop_length);
    let window = hann_window(window_length);
    let fft = FftPlanner::new().plan_fft_forward(window_length);
    let mut out = Array2::zeros((bins, frames));
    let mut buf = vec![Complex64::default(); window_length];
    for f in 0..frames {
        let seg = &x[f * hop_length..][..window_length];
        for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex64::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        for (k, c) in buf.iter().take(bins).enumerate() {
            out[[k, f]] = *c;
        }
    }
    Ok(out)
}

/// Spectrum of one scale with its derived magnitude and angle matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSpectrum {
    pub scale: StftScale,
    pub spectrum: Array2<Complex64>,
    pub magnitude: Array2<f64>,
    pub angle: Array2<f64>,
}

impl ScaleSpectrum {
    pub fn bins(&self) -> usize {
        self.spectrum.nrows()
    }

    pub fn frames(&self) -> usize {
        self.spectrum.ncols()
    }
}

pub type MultiScaleSpectra = Vec<ScaleSpectrum>;

/// One spectrum per configured scale, in config order.
pub fn multi_scale_spectra(x: &[f64], cfg: &StftConfig) -> Result<MultiScaleSpectra, SpectralError> {
    cfg.validate()?;
    cfg.scales
        .iter()
        .map(|&scale| {
            let spectrum = stft(x, scale.window_length, scale.hop_length)?;
            Ok(ScaleSpectrum {
                scale,
                magnitude: spectrum.mapv(|c| c.norm()),
                angle: spectrum.mapv(|c| c.arg()),
                spectrum,
            })
        })
        .collect()
}
