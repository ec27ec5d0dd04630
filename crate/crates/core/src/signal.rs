//! Multi-channel neural recordings and their on-disk file pair.
//!
//! A signal named `<name>` is stored as `<name>.json` (the header) next to
//! `<name>.f32` (C·T little-endian `f32` values, channel-major).

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Femtotesla per calibrated unit.
pub const DEFAULT_CALIBRATION_UNIT_FT: f64 = 200.0;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed header: {source}")]
    HeaderParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("sample count mismatch: header expects {expected} values ({channels} channels x {samples} samples), file holds {found}")]
    SampleCountMismatch {
        expected: usize,
        found: usize,
        channels: usize,
        samples: usize,
    },
    #[error("non-finite sample at channel {channel}, index {index}")]
    NonFinite { channel: usize, index: usize },
    #[error("sample matrix is {rows}x{cols}, header expects {channels}x{samples}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        channels: usize,
        samples: usize,
    },
    #[error("calibration unit must be positive, got {0}")]
    InvalidUnit(f64),
}

fn default_unit() -> f64 {
    DEFAULT_CALIBRATION_UNIT_FT
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalHeader {
    pub sample_rate_hz: f64,
    pub channel_names: Vec<String>,
    pub num_samples: usize,
    #[serde(default = "default_unit")]
    pub calibration_unit_ft: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub story_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_id: Option<String>,
}

impl SignalHeader {
    pub fn new(sample_rate_hz: f64, channel_names: Vec<String>, num_samples: usize) -> Self {
        Self {
            sample_rate_hz,
            channel_names,
            num_samples,
            calibration_unit_ft: DEFAULT_CALIBRATION_UNIT_FT,
            story_id: None,
            subject_id: None,
        }
    }

    pub fn num_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn duration_s(&self) -> f64 {
        self.num_samples as f64 / self.sample_rate_hz
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        let mut problems = Vec::new();
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            problems.push(format!("sample_rate_hz must be > 0, got {}", self.sample_rate_hz));
        }
        if self.num_samples == 0 {
            problems.push("num_samples must be > 0".to_string());
        }
        if self.channel_names.is_empty() {
            problems.push("channel_names is empty".to_string());
        }
        if self.channel_names.iter().any(String::is_empty) {
            problems.push("channel names must be non-empty".to_string());
        }
        let unique: HashSet<&String> = self.channel_names.iter().collect();
        if unique.len() != self.channel_names.len() {
            problems.push("channel names must be unique".to_string());
        }
        if !(self.calibration_unit_ft.is_finite() && self.calibration_unit_ft > 0.0) {
            problems.push(format!(
                "calibration_unit_ft must be > 0, got {}",
                self.calibration_unit_ft
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SignalError::InvalidHeader(problems.join("; ")))
        }
    }
}

/// Calibrated multi-channel time series; `samples` is `[C, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralSignal {
    header: SignalHeader,
    samples: Array2<f32>,
}

impl NeuralSignal {
    pub fn new(header: SignalHeader, samples: Array2<f32>) -> Result<Self, SignalError> {
        header.validate()?;
        let (rows, cols) = samples.dim();
        if rows != header.num_channels() || cols != header.num_samples {
            return Err(SignalError::ShapeMismatch {
                rows,
                cols,
                channels: header.num_channels(),
                samples: header.num_samples,
            });
        }
        if let Some((idx, _)) = samples.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(SignalError::NonFinite {
                channel: idx.0,
                index: idx.1,
            });
        }
        Ok(Self { header, samples })
    }

    /// Builds a signal with generated channel names `ch0, ch1, ...`.
    pub fn from_samples(sample_rate_hz: f64, samples: Array2<f32>) -> Result<Self, SignalError> {
        let names = (0..samples.nrows()).map(|c| format!("ch{c}")).collect();
        let header = SignalHeader::new(sample_rate_hz, names, samples.ncols());
        Self::new(header, samples)
    }

    pub fn header(&self) -> &SignalHeader {
        &self.header
    }

    pub fn samples(&self) -> &Array2<f32> {
        &self.samples
    }

    pub fn into_parts(self) -> (SignalHeader, Array2<f32>) {
        (self.header, self.samples)
    }

    pub fn num_channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn num_samples(&self) -> usize {
        self.samples.ncols()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.header.sample_rate_hz
    }

    /// Copy with replaced samples (and sample count / rate updated).
    pub fn with_samples(
        &self,
        sample_rate_hz: f64,
        samples: Array2<f32>,
    ) -> Result<Self, SignalError> {
        let mut header = self.header.clone();
        header.sample_rate_hz = sample_rate_hz;
        header.num_samples = samples.ncols();
        Self::new(header, samples)
    }
}

/// Header and payload paths for a signal named by `path`.
///
/// A `.json` or `.f32` extension is replaced; any other path gets the
/// extensions appended.
pub fn signal_paths(path: &Path) -> (PathBuf, PathBuf) {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("f32") => (path.with_extension("json"), path.with_extension("f32")),
        _ => {
            let with = |ext: &str| {
                let mut s = OsString::from(path.as_os_str());
                s.push(ext);
                PathBuf::from(s)
            };
            (with(".json"), with(".f32"))
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SignalError + '_ {
    move |source| SignalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_signal(path: &Path) -> Result<NeuralSignal, SignalError> {
    let (header_path, data_path) = signal_paths(path);
    let text = fs::read_to_string(&header_path).map_err(io_err(&header_path))?;
    let header: SignalHeader =
        serde_json::from_str(&text).map_err(|source| SignalError::HeaderParse {
            path: header_path.clone(),
            source,
        })?;
    header.validate()?;
    let bytes = fs::read(&data_path).map_err(io_err(&data_path))?;
    let expected = header.num_channels() * header.num_samples;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(SignalError::SampleCountMismatch {
            expected,
            found: bytes.len() / 4,
            channels: header.num_channels(),
            samples: header.num_samples,
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let samples = Array2::from_shape_vec((header.num_channels(), header.num_samples), values)
        .expect("length checked above");
    NeuralSignal::new(header, samples)
}

pub fn write_signal(signal: &NeuralSignal, path: &Path) -> Result<(), SignalError> {
    let (header_path, data_path) = signal_paths(path);
    let header = serde_json::to_string_pretty(signal.header()).expect("header serializes");
    let mut bytes = Vec::with_capacity(signal.samples.len() * 4);
    // Row iteration of a standard-layout [C, T] matrix is channel-major.
    for v in signal.samples.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&data_path, bytes).map_err(io_err(&data_path))?;
    fs::write(&header_path, header).map_err(io_err(&header_path))?;
    Ok(())
}

/// Converts raw values in tesla to calibrated units of `unit_ft` femtotesla.
pub fn calibrate(raw_tesla: &Array2<f64>, unit_ft: f64) -> Result<Array2<f32>, SignalError> {
    if !(unit_ft.is_finite() && unit_ft > 0.0) {
        return Err(SignalError::InvalidUnit(unit_ft));
    }
    let unit_tesla = unit_ft * 1e-15;
    Ok(raw_tesla.mapv(|v| (v / unit_tesla) as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_channel(t: usize) -> NeuralSignal {
        let samples = Array2::from_shape_fn((2, t), |(c, i)| (c as f32 + 1.0) * (i as f32 * 0.01).sin());
        let mut header = SignalHeader::new(400.0, vec!["MEG 001".into(), "MEG 002".into()], t);
        header.story_id = Some("lw1".into());
        NeuralSignal::new(header, samples).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sig");
        let s = two_channel(1600);
        write_signal(&s, &path).unwrap();
        let back = read_signal(&path).unwrap();
        assert_eq!(back.num_channels(), 2);
        assert_eq!(back.num_samples(), 1600);
        assert_eq!(back.header(), s.header());
        assert!(back
            .samples()
            .iter()
            .zip(s.samples())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn overwrite_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sig.json");
        write_signal(&two_channel(100), &path).unwrap();
        write_signal(&two_channel(50), &path).unwrap();
        assert_eq!(read_signal(&path).unwrap().num_samples(), 50);
    }

    #[test]
    fn short_payload_is_count_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sig");
        write_signal(&two_channel(100), &path).unwrap();
        let (_, data) = signal_paths(&path);
        let bytes = fs::read(&data).unwrap();
        fs::write(&data, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            read_signal(&path),
            Err(SignalError::SampleCountMismatch {
                expected: 200,
                found: 198,
                ..
            })
        ));
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let s = two_channel(10);
        let err = write_signal(&s, Path::new("/nonexistent-dir/definitely/sig")).unwrap_err();
        assert!(matches!(err, SignalError::Io { .. }));
    }

    #[test]
    fn non_finite_and_bad_header_rejected() {
        let mut samples = Array2::<f32>::zeros((1, 4));
        samples[[0, 2]] = f32::NAN;
        assert!(matches!(
            NeuralSignal::from_samples(100.0, samples),
            Err(SignalError::NonFinite { channel: 0, index: 2 })
        ));
        let header = SignalHeader::new(0.0, vec!["a".into(), "a".into()], 4);
        let err = header.validate().unwrap_err().to_string();
        assert!(err.contains("sample_rate_hz") && err.contains("unique"), "{err}");
    }

    #[test]
    fn missing_header_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_signal(&dir.path().join("nothing")),
            Err(SignalError::Io { .. })
        ));
    }

    #[test]
    fn calibrate_examples() {
        let raw = array![[400e-15, 0.0, 200e-15]];
        let cal = calibrate(&raw, 200.0).unwrap();
        assert_eq!(cal, array![[2.0f32, 0.0, 1.0]]);
        assert!(matches!(calibrate(&raw, 0.0), Err(SignalError::InvalidUnit(_))));
        assert!(matches!(calibrate(&raw, -1.0), Err(SignalError::InvalidUnit(_))));
    }

    #[test]
    fn calibrate_is_linear() {
        let raw = array![[1.3e-13, -7.0e-14], [2.2e-12, 5.0e-15]];
        let a = -3.5;
        let lhs = calibrate(&raw.mapv(|v| a * v), 200.0).unwrap();
        let rhs = calibrate(&raw, 200.0).unwrap().mapv(|v| a as f32 * v);
        for (l, r) in lhs.iter().zip(rhs.iter()) {
            assert!((l - r).abs() <= 1e-6 * r.abs().max(1.0));
        }
    }
}
