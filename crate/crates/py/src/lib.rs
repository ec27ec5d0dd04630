//! Python bindings: token streams, prompts, metrics, preprocessing and a
//! codec handle for tokenizing single channels.

use std::path::PathBuf;

use ndarray::Array2;
use neurotok::codec::Codec;
use neurotok::metrics::{evaluate as evaluate_pairs, EvalPair, MetricsSummary};
use neurotok::preprocess;
use neurotok::prompts::{build_prompt, PairTag, Role};
use neurotok::signal::{NeuralSignal, SignalHeader};
use neurotok::tokens::{self, default_channel_names, NeuralTokenSequence, VocabRegistry};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows_to_matrix<T: Copy>(rows: &[Vec<T>]) -> Result<Array2<T>, String> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err("rows have different lengths".into());
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| e.to_string())
}

fn matrix_to_rows<T: Copy>(m: &Array2<T>) -> Vec<Vec<T>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn registry(speech_size: u32, neural_size: u32) -> Result<VocabRegistry, String> {
    VocabRegistry::new(151_936, speech_size, neural_size).map_err(|e| e.to_string())
}

/// Codes given as `[time step][channel]`.
fn neural_stream(codes: &[Vec<u32>], neural_size: u32) -> Result<String, String> {
    let reg = registry(tokens::DEFAULT_SPEECH_SIZE, neural_size)?;
    let matrix = rows_to_matrix(codes)?;
    let seq = NeuralTokenSequence::new(default_channel_names(matrix.ncols()), matrix).map_err(|e| e.to_string())?;
    tokens::serialize_neural(&seq, &reg).map_err(|e| e.to_string())
}

fn neural_codes(text: &str, neural_size: u32) -> Result<Vec<Vec<u32>>, String> {
    let reg = registry(tokens::DEFAULT_SPEECH_SIZE, neural_size)?;
    let seq = tokens::parse_neural(text, &reg).map_err(|e| e.to_string())?;
    Ok(matrix_to_rows(&seq.codes))
}

fn one_signal(samples: &[Vec<f32>], sample_rate_hz: f64) -> Result<NeuralSignal, String> {
    let m = rows_to_matrix(samples)?;
    let header = SignalHeader::new(sample_rate_hz, default_channel_names(m.nrows()), m.ncols());
    NeuralSignal::new(header, m).map_err(|e| e.to_string())
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

fn summary_pairs(predictions: Vec<String>, references: Vec<String>) -> Result<MetricsSummary, String> {
    if predictions.len() != references.len() {
        return Err(format!("{} predictions for {} references", predictions.len(), references.len()));
    }
    let pairs: Vec<EvalPair> = predictions.into_iter().zip(references).map(|(p, r)| EvalPair::single(p, r)).collect();
    evaluate_pairs(&pairs).map_err(|e| e.to_string())
}

/// Serializes neural codes (`codes[t][c]`) to the `<soeg>..<eoeg>` stream.
#[pyfunction]
#[pyo3(signature = (codes, neural_size = 8192))]
fn serialize_neural(codes: Vec<Vec<u32>>, neural_size: u32) -> PyResult<String> {
    neural_stream(&codes, neural_size).map_err(value_err)
}

/// Parses a neural stream back to `codes[t][c]`.
#[pyfunction]
#[pyo3(signature = (text, neural_size = 8192))]
fn parse_neural(text: &str, neural_size: u32) -> PyResult<Vec<Vec<u32>>> {
    neural_codes(text, neural_size).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (codes, speech_size = 1000))]
fn serialize_speech(codes: Vec<u32>, speech_size: u32) -> PyResult<String> {
    let reg = registry(speech_size, tokens::DEFAULT_NEURAL_SIZE).map_err(value_err)?;
    tokens::serialize_speech(&codes, &reg).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (text, speech_size = 1000))]
fn parse_speech(text: &str, speech_size: u32) -> PyResult<Vec<u32>> {
    let reg = registry(speech_size, tokens::DEFAULT_NEURAL_SIZE).map_err(value_err)?;
    tokens::parse_speech(text, &reg).map_err(value_err)
}

/// A chat record as `[(role, content), ...]` for a pair such as `"eg->text"`.
#[pyfunction]
#[pyo3(signature = (pair, source, target, seed = 0))]
fn prompt(pair: &str, source: &str, target: &str, seed: u64) -> PyResult<Vec<(String, String)>> {
    let pair: PairTag = pair.parse().map_err(value_err)?;
    let record = build_prompt(pair, source, target, seed);
    Ok(record
        .messages
        .into_iter()
        .map(|m| (role_name(m.role).to_owned(), m.content))
        .collect())
}

/// Corpus metrics (percent) for line-aligned predictions and references.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, predictions: Vec<String>, references: Vec<String>) -> PyResult<Bound<'py, PyDict>> {
    let s = summary_pairs(predictions, references).map_err(value_err)?;
    let d = PyDict::new(py);
    d.set_item("pairs", s.pairs)?;
    d.set_item("bleu1", s.bleu1_pct)?;
    d.set_item("rouge1_recall", s.rouge1_recall_pct)?;
    d.set_item("rouge1_precision", s.rouge1_precision_pct)?;
    d.set_item("rouge1_f", s.rouge1_f_pct)?;
    d.set_item("cer", s.cer_pct)?;
    d.set_item("wer", s.wer_pct)?;
    d.set_item("self_bleu", s.self_bleu_pct)?;
    Ok(d)
}

/// Zero-phase band-pass of `samples[c][t]`.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate_hz, low_hz = 0.1, high_hz = 85.0))]
fn bandpass(samples: Vec<Vec<f32>>, sample_rate_hz: f64, low_hz: f64, high_hz: f64) -> PyResult<Vec<Vec<f32>>> {
    let s = one_signal(&samples, sample_rate_hz).map_err(value_err)?;
    let out = preprocess::bandpass(&s, low_hz, high_hz).map_err(value_err)?;
    Ok(matrix_to_rows(out.samples()))
}

#[pyfunction]
#[pyo3(signature = (samples, sample_rate_hz, target_hz = 400.0))]
fn resample(samples: Vec<Vec<f32>>, sample_rate_hz: f64, target_hz: f64) -> PyResult<Vec<Vec<f32>>> {
    let s = one_signal(&samples, sample_rate_hz).map_err(value_err)?;
    let out = preprocess::resample(&s, target_hz).map_err(value_err)?;
    Ok(matrix_to_rows(out.samples()))
}

/// A trained codec loaded from a checkpoint.
#[pyclass(name = "Codec", frozen)]
struct PyCodec {
    inner: Codec,
}

#[pymethods]
impl PyCodec {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Codec::load(&path).map_err(value_err)?,
        })
    }

    /// An untrained codec with the default configuration and `seed`.
    #[staticmethod]
    #[pyo3(signature = (seed = 0))]
    fn untrained(seed: u64) -> PyResult<Self> {
        let config = neurotok::codec::CodecConfig {
            seed,
            ..Default::default()
        };
        Ok(Self {
            inner: Codec::new(config).map_err(value_err)?,
        })
    }

    #[getter]
    fn hop(&self) -> usize {
        self.inner.hop()
    }

    #[getter]
    fn codebook_size(&self) -> usize {
        self.inner.config.codebook_size
    }

    /// Codes `[stage][frame]` of one channel and the padding appended to it.
    fn tokenize(&self, x: Vec<f32>) -> PyResult<(Vec<Vec<u32>>, usize)> {
        let (codes, pad) = self.inner.tokenize(&x).map_err(value_err)?;
        Ok((matrix_to_rows(&codes), pad))
    }

    fn detokenize(&self, codes: Vec<Vec<u32>>, pad: usize) -> PyResult<Vec<f32>> {
        let m = rows_to_matrix(&codes).map_err(value_err)?;
        self.inner.detokenize(m.view(), pad).map_err(value_err)
    }
}

#[pymodule]
fn neurotok_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(serialize_neural, m)?)?;
    m.add_function(wrap_pyfunction!(parse_neural, m)?)?;
    m.add_function(wrap_pyfunction!(serialize_speech, m)?)?;
    m.add_function(wrap_pyfunction!(parse_speech, m)?)?;
    m.add_function(wrap_pyfunction!(prompt, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(bandpass, m)?)?;
    m.add_function(wrap_pyfunction!(resample, m)?)?;
    m.add_class::<PyCodec>()?;
    Ok(())
}
