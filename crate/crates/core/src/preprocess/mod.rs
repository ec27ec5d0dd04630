//! Band-pass filtering, resampling, windowing and story-level splits.

mod filter;
mod resample;
mod split;
mod windows;

use std::path::PathBuf;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{NeuralSignal, SignalError};

pub use filter::{Biquad, SosFilter, ZeroPhase};
pub use resample::{rational_ratio, Resampler, KAISER_BETA, TAPS_PER_PHASE};
pub use split::{audit_overlap, split_dataset, DatasetSplit, OverlapAudit, Partition, SplitSpec};
pub use windows::{
    attach_transcripts, extract_windows, read_word_onsets, window_count, write_word_onsets,
    WindowConfig, WindowedSample, WordOnset,
};

/// Prototype order of the Butterworth band-pass.
pub const FILTER_ORDER: usize = 4;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("band {low_hz}..{high_hz} Hz must satisfy 0 < low < high < Nyquist ({nyquist_hz} Hz)")]
    InvalidBand {
        low_hz: f64,
        high_hz: f64,
        nyquist_hz: f64,
    },
    #[error("cannot resample from {source_hz} Hz to {target_hz} Hz")]
    InvalidRate { source_hz: f64, target_hz: f64 },
    #[error("invalid window settings {0:?}")]
    InvalidWindow(WindowConfig),
    #[error("signal has {samples} samples, fewer than one window of {window}")]
    SignalTooShort { samples: usize, window: usize },
    #[error("story {0:?} is not listed in the split spec")]
    UnknownStory(String),
    #[error("story {0:?} is listed in more than one split")]
    DuplicateStory(String),
    #[error("annotation line {line}: {message}")]
    Annotation { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Signal(#[from] SignalError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub low_hz: f64,
    pub high_hz: f64,
    pub target_hz: f64,
    pub window: WindowConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            low_hz: 0.1,
            high_hz: 85.0,
            target_hz: 400.0,
            window: WindowConfig::default(),
        }
    }
}

fn map_channels(
    samples: &Array2<f32>,
    f: impl Fn(&[f64]) -> Vec<f64> + Sync,
) -> Array2<f32> {
    let inputs: Vec<Vec<f64>> = samples
        .axis_iter(Axis(0))
        .map(|row| row.iter().map(|&v| v as f64).collect())
        .collect();
    let rows: Vec<Vec<f64>> = inputs.par_iter().map(|x| f(x)).collect();
    let cols = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), cols), |(c, t)| rows[c][t] as f32)
}

/// Zero-phase Butterworth band-pass applied to every channel.
pub fn bandpass(
    signal: &NeuralSignal,
    low_hz: f64,
    high_hz: f64,
) -> Result<NeuralSignal, PreprocessError> {
    let fs = signal.sample_rate_hz();
    let filter = SosFilter::butter_bandpass(FILTER_ORDER, low_hz, high_hz, fs)?;
    // Padding of three times the band-pass transfer-function order.
    let padlen = 3 * 2 * FILTER_ORDER;
    let plan = filter.zero_phase(signal.num_samples(), padlen);
    let out = map_channels(signal.samples(), |x| plan.apply(x));
    Ok(signal.with_samples(fs, out)?)
}

pub fn resample(signal: &NeuralSignal, target_hz: f64) -> Result<NeuralSignal, PreprocessError> {
    let r = Resampler::new(signal.sample_rate_hz(), target_hz)?;
    let out = map_channels(signal.samples(), |x| r.process(x));
    Ok(signal.with_samples(target_hz, out)?)
}

/// Band-pass, resample and window one recording.
pub fn preprocess_signal(
    signal: &NeuralSignal,
    cfg: &PreprocessConfig,
    seed: u64,
) -> Result<Vec<WindowedSample>, PreprocessError> {
    let filtered = bandpass(signal, cfg.low_hz, cfg.high_hz)?;
    let resampled = resample(&filtered, cfg.target_hz)?;
    extract_windows(&resampled, &cfg.window, seed)
}
