//! Seeded synthetic recordings: band-limited Gaussian noise plus a few
//! sinusoids per channel, with a word-onset track for each story.

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::preprocess::SosFilter;
use crate::preprocess::WordOnset;
use crate::rng::{fnv1a, seeded, story_seed};
use crate::signal::{NeuralSignal, SignalError, SignalHeader};

use serde::{Deserialize, Serialize};

/// Spectral make-up of a synthetic channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Pass band of the Gaussian noise component, in Hz.
    pub noise_band_hz: (f64, f64),
    /// RMS of the noise component.
    pub noise_rms: f64,
    pub sinusoids: usize,
    /// Sinusoid frequencies are drawn uniformly from this range, in Hz.
    pub sine_range_hz: (f64, f64),
    /// Sinusoid amplitudes are drawn uniformly from this range.
    pub sine_amplitude: (f64, f64),
}

impl Default for SynthSpec {
    /// Slow-wave dominated: most power below 8 Hz, as in resting MEG.
    fn default() -> Self {
        Self {
            noise_band_hz: (0.5, 8.0),
            noise_rms: 0.5,
            sinusoids: 3,
            sine_range_hz: (1.0, 8.0),
            sine_amplitude: (0.5, 1.5),
        }
    }
}

impl SynthSpec {
    /// Unit-RMS 1-40 Hz noise with sinusoids up to 30 Hz.
    pub fn broadband() -> Self {
        Self {
            noise_band_hz: (1.0, 40.0),
            noise_rms: 1.0,
            sine_range_hz: (2.0, 30.0),
            ..Self::default()
        }
    }
}

const WORDS: &[&str] = &[
    "river", "stone", "lantern", "window", "garden", "silver", "market", "thunder", "pocket", "violin",
    "harbor", "candle", "meadow", "copper", "shadow", "ribbon", "falcon", "orchard", "pebble", "canyon",
    "whisper", "blanket", "compass", "saddle", "timber", "kettle", "marble", "quarry", "tunnel", "velvet",
    "anchor", "bramble", "cellar", "dagger", "ember", "fiddle", "glacier", "hollow", "island", "jigsaw",
    "kernel", "ladder", "mirror", "needle", "oyster", "parrot", "quiver", "rocket", "spindle", "thimble",
    "umbrella", "valley", "walnut", "yonder", "zephyr", "the", "a", "old", "quiet", "bright",
    "small", "heavy", "green", "empty", "distant", "ran", "found", "carried", "opened", "watched",
    "under", "across", "behind", "near", "slowly", "again", "never", "always", "and", "then",
];

/// One channel of `len` samples at `fs`: band-passed Gaussian noise plus
/// sinusoids with random frequency, phase and amplitude, as set by `spec`.
pub fn synth_channel(spec: &SynthSpec, len: usize, fs: f64, seed: u64) -> Vec<f32> {
    let mut rng = seeded(seed);
    let (low, high) = (spec.noise_band_hz.0, spec.noise_band_hz.1.min(0.45 * fs));
    let filter = SosFilter::butter_bandpass(4, low, high, fs).expect("noise band below Nyquist");
    // Let the filter settle before keeping samples.
    let settle = (4.0 * fs / low) as usize;
    let white: Vec<f64> = (0..len + settle).map(|_| rng.sample(StandardNormal)).collect();
    let noise = &filter.filter(&white)[settle..];
    let rms = (noise.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt().max(1e-12);
    let gain = spec.noise_rms / rms;
    let sines: Vec<(f64, f64, f64)> = (0..spec.sinusoids)
        .map(|_| {
            let f = rng.random_range(spec.sine_range_hz.0..=spec.sine_range_hz.1.min(0.45 * fs));
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(spec.sine_amplitude.0..=spec.sine_amplitude.1);
            (f, phase, amp)
        })
        .collect();
    noise
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let t = i as f64 / fs;
            let s: f64 = sines
                .iter()
                .map(|(f, p, a)| a * (std::f64::consts::TAU * f * t + p).sin())
                .sum();
            (n * gain + s) as f32
        })
        .collect()
}

/// `count` independent single-channel windows of `len` samples. Window `i`
/// depends only on `(seed, i)`.
pub fn codec_windows(spec: &SynthSpec, count: usize, len: usize, fs: f64, seed: u64) -> Vec<Vec<f32>> {
    (0..count)
        .into_par_iter()
        .map(|i| synth_channel(spec, len, fs, seed ^ fnv1a(&(i as u64).to_le_bytes())))
        .collect()
}

/// A multi-channel recording of one story.
pub fn synth_recording(
    spec: &SynthSpec,
    story_id: &str,
    channels: usize,
    duration_s: f64,
    fs: f64,
    seed: u64,
) -> Result<NeuralSignal, SignalError> {
    let len = (duration_s * fs).round() as usize;
    let base = story_seed(seed, story_id);
    let rows: Vec<Vec<f32>> = (0..channels)
        .into_par_iter()
        .map(|c| synth_channel(spec, len, fs, base ^ fnv1a(format!("ch{c}").as_bytes())))
        .collect();
    let samples = Array2::from_shape_vec((channels, len), rows.concat()).expect("rows of equal length");
    let mut header = SignalHeader::new(fs, (0..channels).map(|c| format!("MEG{c:03}")).collect(), len);
    header.story_id = Some(story_id.to_string());
    NeuralSignal::new(header, samples)
}

/// Word onsets spaced 0.25–0.6 s apart over `duration_s`. Each word carries
/// 2–4 speech codes below `speech_vocab`.
pub fn synth_words(story_id: &str, duration_s: f64, speech_vocab: u32, seed: u64) -> Vec<WordOnset> {
    let mut rng = seeded(story_seed(seed, story_id) ^ fnv1a(b"words"));
    let mut t = rng.random_range(0.0..0.5);
    let mut out = Vec::new();
    while t < duration_s {
        let word = WORDS.choose(&mut rng).expect("non-empty word list");
        let n = rng.random_range(2..=4);
        out.push(WordOnset {
            word: (*word).to_string(),
            onset_s: (t * 1000.0).round() / 1000.0,
            story_id: story_id.to_string(),
            speech_codes: Some((0..n).map(|_| rng.random_range(0..speech_vocab)).collect()),
        });
        t += rng.random_range(0.25..0.6);
    }
    out
}
