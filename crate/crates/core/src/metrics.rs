//! Text-generation metrics: BLEU-1, ROUGE-1, CER, WER and Self-BLEU.
//!
//! Word-level metrics share one normalization: lowercase, every character
//! that is neither alphanumeric nor whitespace becomes a space, then split
//! on whitespace. CER works on the raw Unicode scalar values, spaces
//! included.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::seeded;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no prediction/reference pairs")]
    Empty,
    #[error("pair {index} has no references")]
    NoReferences { index: usize },
    #[error("the reference corpus has zero length")]
    EmptyReferenceCorpus,
    #[error("need at least 2 sentences, got {0}")]
    TooFewSentences(usize),
    #[error("{predictions} predictions but {references} references")]
    LengthMismatch { predictions: usize, references: usize },
    #[error("{path}, line {line}: {message}")]
    Line {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub prediction: String,
    pub references: Vec<String>,
}

impl EvalPair {
    pub fn new(prediction: impl Into<String>, references: Vec<String>) -> Self {
        Self {
            prediction: prediction.into(),
            references,
        }
    }

    pub fn single(prediction: impl Into<String>, reference: impl Into<String>) -> Self {
        Self::new(prediction, vec![reference.into()])
    }
}

fn check(pairs: &[EvalPair]) -> Result<(), MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    match pairs.iter().position(|p| p.references.is_empty()) {
        Some(index) => Err(MetricsError::NoReferences { index }),
        None => Ok(()),
    }
}

pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn counts(words: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for w in words {
        *m.entry(w.as_str()).or_insert(0) += 1;
    }
    m
}

/// Clipped unigram matches of one prediction against several references,
/// with the reference length closest to the prediction (shorter on ties).
fn bleu_counts(pred: &[String], refs: &[Vec<String>]) -> (usize, usize, usize) {
    let pc = counts(pred);
    let mut max_ref: HashMap<&str, usize> = HashMap::new();
    for r in refs {
        for (w, n) in counts(r) {
            let e = max_ref.entry(w).or_insert(0);
            *e = (*e).max(n);
        }
    }
    let matches = pc
        .iter()
        .map(|(w, &n)| n.min(max_ref.get(w).copied().unwrap_or(0)))
        .sum();
    let c = pred.len();
    let r = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    (matches, c, r)
}

fn bleu_from_totals(matches: usize, c: usize, r: usize) -> f64 {
    if c == 0 {
        // Nothing predicted: perfect only if nothing was expected either.
        return if r == 0 { 100.0 } else { 0.0 };
    }
    let precision = matches as f64 / c as f64;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    100.0 * bp * precision
}

/// Corpus BLEU-1 in percent: clipped unigram matches and candidate
/// lengths summed over pairs, brevity penalty on the summed closest
/// reference lengths.
pub fn bleu1(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    check(pairs)?;
    let (m, c, r) = pairs
        .par_iter()
        .map(|p| {
            let refs: Vec<Vec<String>> = p.references.iter().map(|r| normalize_words(r)).collect();
            bleu_counts(&normalize_words(&p.prediction), &refs)
        })
        .reduce(|| (0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    Ok(bleu_from_totals(m, c, r))
}

/// ROUGE-1 recall, precision and F, in percent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rouge {
    pub recall: f64,
    pub precision: f64,
    pub f: f64,
}

fn rouge_single(pred: &[String], reference: &[String]) -> Rouge {
    if pred.is_empty() && reference.is_empty() {
        return Rouge {
            recall: 1.0,
            precision: 1.0,
            f: 1.0,
        };
    }
    let pc = counts(pred);
    let rc = counts(reference);
    let overlap: usize = pc.iter().map(|(w, &n)| n.min(rc.get(w).copied().unwrap_or(0))).sum();
    let ratio = |den: usize| if den == 0 { 0.0 } else { overlap as f64 / den as f64 };
    let (recall, precision) = (ratio(reference.len()), ratio(pred.len()));
    let f = if recall + precision > 0.0 {
        2.0 * recall * precision / (recall + precision)
    } else {
        0.0
    };
    Rouge { recall, precision, f }
}

/// Best reference by F, then recall, then precision, so the choice does
/// not depend on reference order. Fractions, not percent.
fn rouge_pair(p: &EvalPair) -> Rouge {
    let pred = normalize_words(&p.prediction);
    p.references
        .iter()
        .map(|r| rouge_single(&pred, &normalize_words(r)))
        .max_by(|a, b| {
            (a.f, a.recall, a.precision)
                .partial_cmp(&(b.f, b.recall, b.precision))
                .expect("finite scores")
        })
        .unwrap_or_default()
}

/// ROUGE-1 averaged over pairs, in percent.
pub fn rouge1(pairs: &[EvalPair]) -> Result<Rouge, MetricsError> {
    check(pairs)?;
    let scores: Vec<Rouge> = pairs.par_iter().map(rouge_pair).collect();
    let n = scores.len() as f64;
    let mean = |f: fn(&Rouge) -> f64| 100.0 * scores.iter().map(f).sum::<f64>() / n;
    Ok(Rouge {
        recall: mean(|r| r.recall),
        precision: mean(|r| r.precision),
        f: mean(|r| r.f),
    })
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Closest reference: fewest edits, then the longest reference.
fn best_edit<T: PartialEq>(pred: &[T], refs: &[Vec<T>]) -> (usize, usize) {
    refs.iter()
        .map(|r| (edit_distance(pred, r), r.len()))
        .min_by_key(|&(d, len)| (d, std::cmp::Reverse(len)))
        .expect("references checked non-empty")
}

fn error_rate<T: PartialEq + Send + Sync>(units: Vec<(Vec<T>, Vec<Vec<T>>)>) -> Result<f64, MetricsError> {
    let (edits, len) = units
        .par_iter()
        .map(|(p, refs)| best_edit(p, refs))
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if len == 0 {
        return Err(MetricsError::EmptyReferenceCorpus);
    }
    Ok(100.0 * edits as f64 / len as f64)
}

/// Character error rate in percent: summed edits over summed reference
/// characters. Insertions can push it past 100.
pub fn cer(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    check(pairs)?;
    let chars = |s: &str| s.chars().collect::<Vec<char>>();
    error_rate(
        pairs
            .iter()
            .map(|p| (chars(&p.prediction), p.references.iter().map(|r| chars(r)).collect()))
            .collect(),
    )
}

/// Word error rate in percent over normalized words.
pub fn wer(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    check(pairs)?;
    error_rate(
        pairs
            .iter()
            .map(|p| {
                (
                    normalize_words(&p.prediction),
                    p.references.iter().map(|r| normalize_words(r)).collect(),
                )
            })
            .collect(),
    )
}

/// Mean BLEU-1 of each sentence against all the others, in percent.
pub fn self_bleu(corpus: &[String]) -> Result<f64, MetricsError> {
    if corpus.len() < 2 {
        return Err(MetricsError::TooFewSentences(corpus.len()));
    }
    let words: Vec<Vec<String>> = corpus.iter().map(|s| normalize_words(s)).collect();
    let total: f64 = (0..words.len())
        .into_par_iter()
        .map(|i| {
            let others: Vec<Vec<String>> = words
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, w)| w.clone())
                .collect();
            let (m, c, r) = bleu_counts(&words[i], &others);
            bleu_from_totals(m, c, r)
        })
        .sum();
    Ok(total / words.len() as f64)
}

/// Scores of one pair, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub bleu1: f64,
    pub rouge1_recall: f64,
    pub rouge1_precision: f64,
    pub rouge1_f: f64,
    pub cer: f64,
    pub wer: f64,
}

impl PairScores {
    pub const CSV_HEADER: &'static str = "index,bleu1,rouge1_recall,rouge1_precision,rouge1_f,cer,wer";

    /// CER and WER are `NaN` when the pair's references are empty strings.
    pub fn of(pair: &EvalPair) -> Result<Self, MetricsError> {
        let one = std::slice::from_ref(pair);
        let rouge = rouge_pair(pair);
        let rate = |r: Result<f64, MetricsError>| match r {
            Err(MetricsError::EmptyReferenceCorpus) => Ok(f64::NAN),
            other => other,
        };
        Ok(Self {
            bleu1: bleu1(one)?,
            rouge1_recall: 100.0 * rouge.recall,
            rouge1_precision: 100.0 * rouge.precision,
            rouge1_f: 100.0 * rouge.f,
            cer: rate(cer(one))?,
            wer: rate(wer(one))?,
        })
    }

    pub fn csv_row(&self, index: usize) -> String {
        format!(
            "{index},{},{},{},{},{},{}",
            self.bleu1, self.rouge1_recall, self.rouge1_precision, self.rouge1_f, self.cer, self.wer
        )
    }
}

/// Corpus-level results, all in percent.
///
/// BLEU-1 pools counts over the corpus; ROUGE-1 averages per-pair scores;
/// CER and WER pool edits and reference lengths; Self-BLEU is computed on
/// the predictions and is 0 when there are fewer than two of them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub pairs: usize,
    pub bleu1_pct: f64,
    pub rouge1_recall_pct: f64,
    pub rouge1_precision_pct: f64,
    pub rouge1_f_pct: f64,
    pub cer_pct: f64,
    pub wer_pct: f64,
    pub self_bleu_pct: f64,
    /// Means of externally computed per-pair scores, by scorer name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external: BTreeMap<String, f64>,
}

pub fn evaluate(pairs: &[EvalPair]) -> Result<MetricsSummary, MetricsError> {
    check(pairs)?;
    let rouge = rouge1(pairs)?;
    let predictions: Vec<String> = pairs.iter().map(|p| p.prediction.clone()).collect();
    let self_bleu_pct = match self_bleu(&predictions) {
        Err(MetricsError::TooFewSentences(_)) => 0.0,
        other => other?,
    };
    Ok(MetricsSummary {
        pairs: pairs.len(),
        bleu1_pct: bleu1(pairs)?,
        rouge1_recall_pct: rouge.recall,
        rouge1_precision_pct: rouge.precision,
        rouge1_f_pct: rouge.f,
        cer_pct: cer(pairs)?,
        wer_pct: wer(pairs)?,
        self_bleu_pct,
        external: BTreeMap::new(),
    })
}

/// Scores predictions drawn uniformly from the other references of the
/// pool, one per reference.
pub fn random_selecting_baseline(references: &[String], seed: u64) -> Result<MetricsSummary, MetricsError> {
    if references.len() < 2 {
        return Err(MetricsError::TooFewSentences(references.len()));
    }
    let mut rng = seeded(seed);
    let n = references.len();
    let pairs: Vec<EvalPair> = (0..n)
        .map(|i| {
            // Uniform over the n - 1 indices other than i.
            let j = rng.random_range(0..n - 1);
            let j = if j >= i { j + 1 } else { j };
            EvalPair::single(references[j].clone(), references[i].clone())
        })
        .collect();
    evaluate(&pairs)
}

fn read_text(path: &Path) -> Result<String, MetricsError> {
    fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Line-aligned prediction and reference files, one reference per pair.
pub fn read_line_pairs(predictions: &Path, references: &Path) -> Result<Vec<EvalPair>, MetricsError> {
    let preds = read_text(predictions)?;
    let refs = read_text(references)?;
    let (p, r): (Vec<&str>, Vec<&str>) = (preds.lines().collect(), refs.lines().collect());
    if p.len() != r.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: p.len(),
            references: r.len(),
        });
    }
    Ok(p.into_iter().zip(r).map(|(p, r)| EvalPair::single(p, r)).collect())
}

/// JSON lines of `{"prediction": ..., "references": [...]}`.
pub fn read_jsonl_pairs(path: &Path) -> Result<Vec<EvalPair>, MetricsError> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let pair: EvalPair = serde_json::from_str(l).map_err(|e| MetricsError::Line {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if pair.references.is_empty() {
                return Err(MetricsError::Line {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "no references".into(),
                });
            }
            Ok(pair)
        })
        .collect()
}

/// Per-pair scores from an external scorer: one number per line, or the
/// last comma-separated field of each line. A header line that does not
/// parse as a number is skipped.
pub fn read_external_scores(path: &Path) -> Result<Vec<f64>, MetricsError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let field = line.rsplit(',').next().unwrap_or("").trim();
        if field.is_empty() {
            continue;
        }
        match field.parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) if i == 0 => {}
            Err(e) => {
                return Err(MetricsError::Line {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

impl MetricsSummary {
    /// Records the mean of an external per-pair score, which must have
    /// exactly one value per evaluated pair.
    pub fn attach_external(&mut self, name: &str, scores: &[f64]) -> Result<(), MetricsError> {
        if scores.len() != self.pairs {
            return Err(MetricsError::LengthMismatch {
                predictions: self.pairs,
                references: scores.len(),
            });
        }
        let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
        self.external.insert(name.to_string(), mean);
        Ok(())
    }
}
