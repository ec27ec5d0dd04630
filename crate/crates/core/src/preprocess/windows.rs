//! Jittered fixed-length windows and word-onset transcript alignment.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::s;
use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::PreprocessError;
use crate::rng::{seeded, story_seed};
use crate::signal::NeuralSignal;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window_s: f64,
    pub stride_s: f64,
    pub jitter_s: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window_s: 4.0,
            stride_s: 1.0,
            jitter_s: 0.5,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        let ok = self.window_s.is_finite()
            && self.window_s > 0.0
            && self.stride_s.is_finite()
            && self.stride_s > 0.0
            && self.jitter_s.is_finite()
            && self.jitter_s >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(PreprocessError::InvalidWindow(*self))
        }
    }
}

/// One fixed-length excerpt with its (optional) aligned text and speech.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSample {
    pub signal: Array2<f32>,
    pub sample_rate_hz: f64,
    pub story_id: String,
    pub start_time_s: f64,
    pub transcript: Option<String>,
    pub speech_codes: Option<Vec<u32>>,
}

/// Number of windows: `floor((duration - window) / stride) + 1`.
pub fn window_count(duration_s: f64, window_s: f64, stride_s: f64) -> usize {
    // A small tolerance keeps exact multiples from flooring down.
    ((duration_s - window_s) / stride_s + 1e-9).floor() as usize + 1
}

/// Cuts `signal` into jittered windows. Randomness is drawn from
/// `seed ^ fnv1a(story_id)` so stories can be processed independently.
pub fn extract_windows(
    signal: &NeuralSignal,
    cfg: &WindowConfig,
    seed: u64,
) -> Result<Vec<WindowedSample>, PreprocessError> {
    cfg.validate()?;
    let fs = signal.sample_rate_hz();
    let total = signal.num_samples();
    let width = (cfg.window_s * fs).round() as usize;
    if width == 0 || total < width {
        return Err(PreprocessError::SignalTooShort {
            samples: total,
            window: width,
        });
    }
    let duration = total as f64 / fs;
    let latest = duration - cfg.window_s;
    let story = signal.header().story_id.clone().unwrap_or_default();
    let mut rng = seeded(story_seed(seed, &story));
    let count = window_count(duration, cfg.window_s, cfg.stride_s);

    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let nominal = i as f64 * cfg.stride_s;
        let shift = if cfg.jitter_s > 0.0 {
            rng.random_range(-cfg.jitter_s..=cfg.jitter_s)
        } else {
            0.0
        };
        let start_s = (nominal + shift).clamp(0.0, latest.max(0.0));
        let start = ((start_s * fs).round() as usize).min(total - width);
        out.push(WindowedSample {
            signal: signal.samples().slice(s![.., start..start + width]).to_owned(),
            sample_rate_hz: fs,
            story_id: story.clone(),
            start_time_s: start as f64 / fs,
            transcript: None,
            speech_codes: None,
        });
    }
    Ok(out)
}

/// One line of the word-onset annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordOnset {
    pub word: String,
    pub onset_s: f64,
    pub story_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speech_codes: Option<Vec<u32>>,
}

pub fn read_word_onsets(path: &Path) -> Result<Vec<WordOnset>, PreprocessError> {
    let text = fs::read_to_string(path).map_err(|source| PreprocessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PreprocessError::Annotation {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_word_onsets(path: &Path, words: &[WordOnset]) -> Result<(), PreprocessError> {
    let io_err = |source| PreprocessError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for w in words {
        let line = serde_json::to_string(w).expect("word onsets always serialize");
        writeln!(f, "{line}").map_err(io_err)?;
    }
    f.flush().map_err(io_err)
}

/// Fills each window's transcript with the words of its story whose onset
/// lies in `[start, start + window_s)`, joined by single spaces, and its
/// speech codes with the concatenation of those words' codes (if every
/// word carries some). Windows without any word keep `None`.
pub fn attach_transcripts(windows: &mut [WindowedSample], words: &[WordOnset], window_s: f64) {
    for w in windows.iter_mut() {
        let end = w.start_time_s + window_s;
        let hits: Vec<&WordOnset> = words
            .iter()
            .filter(|o| o.story_id == w.story_id && o.onset_s >= w.start_time_s && o.onset_s < end)
            .collect();
        if hits.is_empty() {
            continue;
        }
        w.transcript = Some(hits.iter().map(|o| o.word.as_str()).collect::<Vec<_>>().join(" "));
        if hits.iter().all(|o| o.speech_codes.is_some()) {
            w.speech_codes = Some(
                hits.iter()
                    .flat_map(|o| o.speech_codes.iter().flatten().copied())
                    .collect(),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::SignalHeader;

    fn signal(seconds: usize, fs: f64, story: &str) -> NeuralSignal {
        let n = (seconds as f64 * fs) as usize;
        let samples = Array2::from_shape_fn((2, n), |(c, t)| (c * n + t) as f32);
        let mut header = SignalHeader::new(fs, vec!["a".into(), "b".into()], n);
        header.story_id = Some(story.into());
        NeuralSignal::new(header, samples).unwrap()
    }

    #[test]
    fn sixty_seconds_gives_57_windows() {
        assert_eq!(window_count(60.0, 4.0, 1.0), 57);
        let w = extract_windows(&signal(60, 100.0, "lw1"), &WindowConfig::default(), 3).unwrap();
        assert_eq!(w.len(), 57);
        for x in &w {
            assert_eq!(x.signal.dim(), (2, 400));
            assert!(x.start_time_s >= 0.0 && x.start_time_s <= 56.0);
            // Content is the matching slice of the source.
            let start = (x.start_time_s * 100.0).round() as usize;
            assert_eq!(x.signal[[0, 0]], start as f32);
        }
    }

    #[test]
    fn one_window_signal_starts_at_zero() {
        let w = extract_windows(&signal(4, 100.0, "s"), &WindowConfig::default(), 99).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].start_time_s, 0.0);
    }

    #[test]
    fn deterministic_and_story_dependent() {
        let cfg = WindowConfig::default();
        let a = extract_windows(&signal(20, 50.0, "x"), &cfg, 1).unwrap();
        let b = extract_windows(&signal(20, 50.0, "x"), &cfg, 1).unwrap();
        let c = extract_windows(&signal(20, 50.0, "y"), &cfg, 1).unwrap();
        let starts = |v: &[WindowedSample]| v.iter().map(|w| w.start_time_s).collect::<Vec<_>>();
        assert_eq!(a, b);
        assert_ne!(starts(&a), starts(&c));
    }

    #[test]
    fn too_short_is_an_error() {
        let err = extract_windows(&signal(3, 100.0, "s"), &WindowConfig::default(), 0).unwrap_err();
        assert!(matches!(err, PreprocessError::SignalTooShort { samples: 300, window: 400 }));
    }

    #[test]
    fn transcripts_follow_onsets() {
        let mut w = extract_windows(
            &signal(8, 10.0, "s"),
            &WindowConfig {
                jitter_s: 0.0,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let word = |t: &str, at: f64, story: &str| WordOnset {
            word: t.into(),
            onset_s: at,
            story_id: story.into(),
            speech_codes: Some(vec![at as u32]),
        };
        let words = vec![
            word("hello", 0.5, "s"),
            word("there", 3.9, "s"),
            word("friend", 4.0, "s"),
            word("elsewhere", 1.0, "other"),
        ];
        attach_transcripts(&mut w, &words, 4.0);
        assert_eq!(w[0].transcript.as_deref(), Some("hello there"));
        assert_eq!(w[0].speech_codes, Some(vec![0, 3]));
        assert_eq!(w[1].transcript.as_deref(), Some("there friend"));
        assert_eq!(w[4].transcript.as_deref(), Some("friend"));
    }

    #[test]
    fn annotation_round_trip_and_line_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("words.jsonl");
        let words = vec![WordOnset {
            word: "a".into(),
            onset_s: 1.25,
            story_id: "lw1".into(),
            speech_codes: None,
        }];
        write_word_onsets(&p, &words).unwrap();
        assert_eq!(read_word_onsets(&p).unwrap(), words);
        fs::write(&p, "{\"word\":\"a\",\"onset_s\":1,\"story_id\":\"x\"}\nnot json\n").unwrap();
        assert!(matches!(
            read_word_onsets(&p),
            Err(PreprocessError::Annotation { line: 2, .. })
        ));
    }
}
