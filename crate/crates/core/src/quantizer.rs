//! Residual vector quantization with EMA codebooks.
//!
//! Embeddings are handled as matrices `[R, N]` whose columns are the vectors
//! to quantize; stage `i` quantizes what is left after stages `0..i`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::CheckpointEntry;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantizerError {
    #[error("embedding dimension {found} does not match codebook dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("expected {expected} code rows (one per stage), got {found}")]
    StageMismatch { expected: usize, found: usize },
    #[error("code {code} at stage {stage}, column {column} is outside 0..{size}")]
    CodeOutOfRange {
        stage: usize,
        column: usize,
        code: u32,
        size: usize,
    },
    #[error("non-finite embedding value at row {row}, column {column}")]
    NonFinite { row: usize, column: usize },
    #[error("invalid quantizer configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RvqConfig {
    pub num_stages: usize,
    pub codebook_size: usize,
    pub dim: usize,
    pub decay: f64,
    /// Laplace smoothing constant for the EMA cluster sizes.
    pub epsilon: f64,
    /// Number of EMA updates over which usage is measured for re-seeding.
    pub dead_code_window: usize,
    /// Keep codeword 0 of every stage fixed at the origin.
    pub pin_zero_codeword: bool,
}

impl Default for RvqConfig {
    fn default() -> Self {
        Self {
            num_stages: 1,
            codebook_size: 8192,
            dim: 32,
            decay: 0.99,
            epsilon: 1e-5,
            dead_code_window: 100,
            pin_zero_codeword: false,
        }
    }
}

impl RvqConfig {
    pub fn validate(&self) -> Result<(), QuantizerError> {
        let bad = |m: &str| Err(QuantizerError::InvalidConfig(m.to_string()));
        if self.num_stages == 0 || self.num_stages > 8 {
            return bad("num_stages must be in 1..=8");
        }
        if self.codebook_size < 2 {
            return bad("codebook_size must be at least 2");
        }
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if !(0.0..1.0).contains(&self.decay) {
            return bad("decay must be in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.dead_code_window == 0 {
            return bad("dead_code_window must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// Codewords, one per row: `[V, R]`.
    pub entries: Array2<f32>,
    /// Assignments since creation (or since the codeword was last re-seeded).
    pub usage_counts: Vec<u64>,
    pub ema_cluster_size: Vec<f64>,
    pub ema_embed_sum: Array2<f64>,
    window_usage: Vec<u64>,
    window_total: u64,
    window_steps: usize,
}

impl Codebook {
    pub fn new(entries: Array2<f32>) -> Self {
        let v = entries.nrows();
        Self {
            usage_counts: vec![0; v],
            ema_cluster_size: vec![1.0; v],
            ema_embed_sum: entries.mapv(f64::from),
            window_usage: vec![0; v],
            window_total: 0,
            window_steps: 0,
            entries,
        }
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    /// Index of the nearest codeword (squared Euclidean, f64 accumulation,
    /// lowest index on ties) and its squared distance.
    pub fn nearest(&self, v: ArrayView1<f32>) -> (usize, f64) {
        let v: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
        self.nearest_f64(&v)
    }

    fn nearest_f64(&self, v: &[f64]) -> (usize, f64) {
        let dim = self.dim();
        if dim == 0 {
            return (0, if self.size() == 0 { f64::INFINITY } else { 0.0 });
        }
        let entries = self.entries.as_standard_layout();
        let flat = entries.as_slice().expect("standard layout");
        let mut best = (0, f64::INFINITY);
        let mut consider = |k: usize, d: f64| {
            if d < best.1 {
                best = (k, d);
            }
        };
        // Four codewords per pass; each distance is still summed in index order.
        let mut groups = flat.chunks_exact(4 * dim);
        let mut k = 0;
        for g in &mut groups {
            let (r0, rest) = g.split_at(dim);
            let (r1, rest) = rest.split_at(dim);
            let (r2, r3) = rest.split_at(dim);
            let mut s = [0.0f64; 4];
            for j in 0..dim {
                let x = v[j];
                let t = [x - f64::from(r0[j]), x - f64::from(r1[j]), x - f64::from(r2[j]), x - f64::from(r3[j])];
                for i in 0..4 {
                    s[i] += t[i] * t[i];
                }
            }
            for (i, d) in s.into_iter().enumerate() {
                consider(k + i, d);
            }
            k += 4;
        }
        for e in groups.remainder().chunks_exact(dim) {
            let d = e.iter().zip(v).fold(0.0, |acc, (&a, &b)| {
                let t = b - f64::from(a);
                acc + t * t
            });
            consider(k, d);
            k += 1;
        }
        best
    }

    /// Empirical entropy (nats) of the cumulative usage histogram.
    pub fn usage_entropy(&self) -> f64 {
        entropy(&self.usage_counts)
    }
}

/// Entropy in nats of a histogram; 0 for an empty one.
pub fn entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Result of quantizing a set of columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    /// `[N_q, N]`.
    pub codes: Array2<u32>,
    /// Sum of selected codewords, `[R, N]`.
    pub z_q: Array2<f32>,
    /// Input of each stage, `[R, N]` each.
    pub residuals: Vec<Array2<f32>>,
    /// Codewords selected by each stage, `[R, N]` each.
    pub selected: Vec<Array2<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RvqState {
    pub config: RvqConfig,
    pub stages: Vec<Codebook>,
    initialized: bool,
}

fn check_finite(z: &ArrayView2<f32>) -> Result<(), QuantizerError> {
    for ((row, column), v) in z.indexed_iter() {
        if !v.is_finite() {
            return Err(QuantizerError::NonFinite { row, column });
        }
    }
    Ok(())
}

impl RvqState {
    /// Codebooks drawn from a standard normal; call
    /// [`RvqState::initialize_from`] to seed them from data instead.
    pub fn new(config: RvqConfig, rng: &mut impl Rng) -> Result<Self, QuantizerError> {
        config.validate()?;
        let stages = (0..config.num_stages)
            .map(|_| {
                let mut e = Array2::from_shape_fn((config.codebook_size, config.dim), |_| {
                    StandardNormal.sample(rng)
                });
                if config.pin_zero_codeword {
                    e.row_mut(0).fill(0.0);
                }
                Codebook::new(e)
            })
            .collect();
        Ok(Self {
            config,
            stages,
            initialized: false,
        })
    }

    /// Builds a state from explicit codebooks `[V, R]` (all the same shape).
    pub fn from_codebooks(config: RvqConfig, books: Vec<Array2<f32>>) -> Result<Self, QuantizerError> {
        config.validate()?;
        if books.len() != config.num_stages {
            return Err(QuantizerError::StageMismatch {
                expected: config.num_stages,
                found: books.len(),
            });
        }
        for b in &books {
            if b.ncols() != config.dim {
                return Err(QuantizerError::DimensionMismatch {
                    expected: config.dim,
                    found: b.ncols(),
                });
            }
            if b.nrows() != config.codebook_size {
                return Err(QuantizerError::InvalidConfig(format!(
                    "codebook has {} rows, config says {}",
                    b.nrows(),
                    config.codebook_size
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(QuantizerError::InvalidConfig("non-finite codeword".into()));
            }
        }
        Ok(Self {
            config,
            stages: books.into_iter().map(Codebook::new).collect(),
            initialized: true,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn codebook_size(&self) -> usize {
        self.config.codebook_size
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    fn check_dim(&self, z: &ArrayView2<f32>) -> Result<(), QuantizerError> {
        if z.nrows() != self.config.dim {
            return Err(QuantizerError::DimensionMismatch {
                expected: self.config.dim,
                found: z.nrows(),
            });
        }
        Ok(())
    }

    /// Nearest-codeword residual quantization of every column of `z: [R, N]`.
    pub fn quantize(&self, z: ArrayView2<f32>) -> Result<Quantized, QuantizerError> {
        self.check_dim(&z)?;
        check_finite(&z)?;
        let n = z.ncols();
        let mut residual = z.to_owned();
        let mut z_q = Array2::<f32>::zeros(z.raw_dim());
        let mut codes = Array2::<u32>::zeros((self.stages.len(), n));
        let mut residuals = Vec::with_capacity(self.stages.len());
        let mut selected = Vec::with_capacity(self.stages.len());
        for (s, book) in self.stages.iter().enumerate() {
            let columns: Vec<Vec<f64>> = residual.t().outer_iter().map(|c| c.iter().map(|&x| f64::from(x)).collect()).collect();
            let picks: Vec<usize> = columns.par_iter().map(|c| book.nearest_f64(c).0).collect();
            let mut chosen = Array2::<f32>::zeros(z.raw_dim());
            for (t, &k) in picks.iter().enumerate() {
                codes[[s, t]] = k as u32;
                chosen.column_mut(t).assign(&book.entries.row(k));
            }
            residuals.push(residual.clone());
            residual -= &chosen;
            z_q += &chosen;
            selected.push(chosen);
        }
        Ok(Quantized {
            codes,
            z_q,
            residuals,
            selected,
        })
    }

    /// Sum of the addressed codewords per column.
    pub fn dequantize(&self, codes: ArrayView2<u32>) -> Result<Array2<f32>, QuantizerError> {
        if codes.nrows() != self.stages.len() {
            return Err(QuantizerError::StageMismatch {
                expected: self.stages.len(),
                found: codes.nrows(),
            });
        }
        let mut out = Array2::<f32>::zeros((self.config.dim, codes.ncols()));
        for (stage, (row, book)) in codes.outer_iter().zip(&self.stages).enumerate() {
            for (column, &code) in row.iter().enumerate() {
                let entry = book.entries.row(self.check_code(stage, column, code)?);
                let mut col = out.column_mut(column);
                col += &entry;
            }
        }
        Ok(out)
    }

    fn check_code(&self, stage: usize, column: usize, code: u32) -> Result<usize, QuantizerError> {
        let size = self.config.codebook_size;
        if (code as usize) < size {
            Ok(code as usize)
        } else {
            Err(QuantizerError::CodeOutOfRange {
                stage,
                column,
                code,
                size,
            })
        }
    }

    /// k-means++ seeding of every stage from one batch, stage by stage on
    /// the residuals left by the already seeded stages. When the batch has
    /// fewer distinct vectors than codewords, the remainder are batch
    /// vectors plus small Gaussian noise.
    pub fn initialize_from(&mut self, z: ArrayView2<f32>, rng: &mut impl Rng) -> Result<(), QuantizerError> {
        self.check_dim(&z)?;
        check_finite(&z)?;
        if z.ncols() == 0 {
            return Err(QuantizerError::InvalidConfig("cannot seed codebooks from an empty batch".into()));
        }
        let mut residual = z.to_owned();
        for s in 0..self.stages.len() {
            let entries = kmeans_pp(residual.view(), self.config.codebook_size, self.config.pin_zero_codeword, rng);
            self.stages[s] = Codebook::new(entries);
            let book = &self.stages[s];
            let picks: Vec<usize> = (0..residual.ncols())
                .into_par_iter()
                .map(|t| book.nearest(residual.column(t)).0)
                .collect();
            for (t, &k) in picks.iter().enumerate() {
                let mut col = residual.column_mut(t);
                col -= &book.entries.row(k);
            }
        }
        self.initialized = true;
        Ok(())
    }

    /// EMA codebook update from the assignments of the latest
    /// [`RvqState::quantize`] call on the same state.
    ///
    /// Codewords without assignments in this batch keep their statistics.
    /// Every `dead_code_window` updates, codewords whose share of the
    /// window's assignments is below `1 / (2V)` are re-seeded from random
    /// vectors of the current stage input. Returns the number of re-seeded
    /// codewords.
    pub fn update_ema(&mut self, q: &Quantized, rng: &mut impl Rng) -> Result<usize, QuantizerError> {
        if q.codes.nrows() != self.stages.len() || q.residuals.len() != self.stages.len() {
            return Err(QuantizerError::StageMismatch {
                expected: self.stages.len(),
                found: q.codes.nrows(),
            });
        }
        let cfg = self.config.clone();
        let v = cfg.codebook_size;
        let mut reseeded = 0;
        for (s, book) in self.stages.iter_mut().enumerate() {
            let inputs = &q.residuals[s];
            let mut counts = vec![0u64; v];
            let mut sums = Array2::<f64>::zeros((v, cfg.dim));
            for (t, &code) in q.codes.row(s).iter().enumerate() {
                let k = code as usize;
                if k >= v {
                    return Err(QuantizerError::CodeOutOfRange {
                        stage: s,
                        column: t,
                        code,
                        size: v,
                    });
                }
                counts[k] += 1;
                let mut row = sums.row_mut(k);
                row.zip_mut_with(&inputs.column(t), |a, &b| *a += f64::from(b));
            }
            let keep = cfg.decay;
            for k in 0..v {
                if counts[k] == 0 {
                    continue;
                }
                book.ema_cluster_size[k] = keep * book.ema_cluster_size[k] + (1.0 - keep) * counts[k] as f64;
                let mut acc = book.ema_embed_sum.row_mut(k);
                acc.zip_mut_with(&sums.row(k), |a, &b| *a = keep * *a + (1.0 - keep) * b);
                book.usage_counts[k] += counts[k];
                book.window_usage[k] += counts[k];
            }
            let total: f64 = book.ema_cluster_size.iter().sum();
            let denom = total + v as f64 * cfg.epsilon;
            for k in 0..v {
                if counts[k] == 0 || (cfg.pin_zero_codeword && k == 0) {
                    continue;
                }
                let smoothed = (book.ema_cluster_size[k] + cfg.epsilon) / denom * total;
                let entry = book.ema_embed_sum.row(k).mapv(|x| (x / smoothed) as f32);
                book.entries.row_mut(k).assign(&entry);
            }
            book.window_total += counts.iter().sum::<u64>();
            book.window_steps += 1;
            if book.window_steps >= cfg.dead_code_window {
                reseeded += reseed_dead_codes(book, inputs.view(), cfg.pin_zero_codeword, rng);
                book.window_usage.fill(0);
                book.window_total = 0;
                book.window_steps = 0;
            }
        }
        Ok(reseeded)
    }

    /// `rvq.stage<i>.entries` plus the EMA statistics needed to resume.
    pub fn checkpoint_entries(&self) -> Vec<CheckpointEntry> {
        let (v, r) = (self.config.codebook_size, self.config.dim);
        let mut out = Vec::new();
        for (i, b) in self.stages.iter().enumerate() {
            out.push(CheckpointEntry {
                name: format!("rvq.stage{i}.entries"),
                shape: vec![v, r],
                data: b.entries.iter().copied().collect(),
            });
            out.push(CheckpointEntry {
                name: format!("rvq.stage{i}.ema_cluster_size"),
                shape: vec![v],
                data: b.ema_cluster_size.iter().map(|&x| x as f32).collect(),
            });
            out.push(CheckpointEntry {
                name: format!("rvq.stage{i}.ema_embed_sum"),
                shape: vec![v, r],
                data: b.ema_embed_sum.iter().map(|&x| x as f32).collect(),
            });
        }
        out
    }

    /// Restores codebooks from checkpoint entries; EMA statistics are
    /// optional and default to the entries themselves with unit size.
    pub fn from_checkpoint(config: RvqConfig, entries: &[CheckpointEntry]) -> Result<Self, QuantizerError> {
        config.validate()?;
        let find = |name: &str| entries.iter().find(|e| e.name == name);
        let (v, r) = (config.codebook_size, config.dim);
        let mut books = Vec::with_capacity(config.num_stages);
        for i in 0..config.num_stages {
            let name = format!("rvq.stage{i}.entries");
            let e = find(&name).ok_or_else(|| QuantizerError::Checkpoint(format!("missing tensor {name}")))?;
            if e.shape != [v, r] {
                return Err(QuantizerError::Checkpoint(format!(
                    "{name} has shape {:?}, expected [{v}, {r}]",
                    e.shape
                )));
            }
            let mut book = Codebook::new(
                Array2::from_shape_vec((v, r), e.data.clone()).expect("shape checked above"),
            );
            if let Some(s) = find(&format!("rvq.stage{i}.ema_cluster_size")).filter(|s| s.shape == [v]) {
                book.ema_cluster_size = s.data.iter().map(|&x| f64::from(x)).collect();
            }
            if let Some(s) = find(&format!("rvq.stage{i}.ema_embed_sum")).filter(|s| s.shape == [v, r]) {
                book.ema_embed_sum =
                    Array2::from_shape_vec((v, r), s.data.iter().map(|&x| f64::from(x)).collect())
                        .expect("shape checked above");
            }
            books.push(book);
        }
        Ok(Self {
            config,
            stages: books,
            initialized: true,
        })
    }
}

fn reseed_dead_codes(
    book: &mut Codebook,
    inputs: ArrayView2<f32>,
    pin_zero: bool,
    rng: &mut impl Rng,
) -> usize {
    let v = book.size();
    if book.window_total == 0 || inputs.ncols() == 0 {
        return 0;
    }
    let threshold = book.window_total as f64 / (2.0 * v as f64);
    let columns: Vec<usize> = (0..inputs.ncols()).collect();
    let mut n = 0;
    for k in 0..v {
        if (pin_zero && k == 0) || book.window_usage[k] as f64 >= threshold {
            continue;
        }
        let &t = columns.choose(rng).expect("non-empty batch");
        let fresh: Array1<f32> = inputs.column(t).to_owned();
        book.ema_embed_sum.row_mut(k).assign(&fresh.mapv(f64::from));
        book.ema_cluster_size[k] = 1.0;
        book.entries.row_mut(k).assign(&fresh);
        book.usage_counts[k] = 0;
        n += 1;
    }
    n
}

/// k-means++ seeding of `size` centres from the columns of `z`.
fn kmeans_pp(z: ArrayView2<f32>, size: usize, pin_zero: bool, rng: &mut impl Rng) -> Array2<f32> {
    let (dim, n) = z.dim();
    let points: Vec<Vec<f64>> = (0..n)
        .map(|t| z.column(t).iter().map(|&v| f64::from(v)).collect())
        .collect();
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut centres: Vec<Vec<f64>> = Vec::with_capacity(size);
    if pin_zero {
        centres.push(vec![0.0; dim]);
    } else {
        centres.push(points[rng.random_range(0..n)].clone());
    }
    let mut d: Vec<f64> = points.iter().map(|p| dist2(p, &centres[0])).collect();
    while centres.len() < size {
        let total: f64 = d.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &di) in d.iter().enumerate() {
            if target < di {
                pick = i;
                break;
            }
            target -= di;
        }
        let c = points[pick].clone();
        d.par_iter_mut()
            .zip(&points)
            .for_each(|(di, p)| *di = di.min(dist2(p, &c)));
        centres.push(c);
    }
    let rms = (points.iter().flatten().map(|v| v * v).sum::<f64>() / (n * dim) as f64)
        .sqrt()
        .max(1e-6);
    while centres.len() < size {
        let base = &points[rng.random_range(0..n)];
        let jitter: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        centres.push(base.iter().zip(&jitter).map(|(b, j)| b + 0.01 * rms * j).collect());
    }
    Array2::from_shape_fn((size, dim), |(k, r)| centres[k][r] as f32)
}

/// `sum_i mean((z_i - zq_i)^2)` over stages.
pub fn commitment_loss(residuals: &[Array2<f32>], quantized: &[Array2<f32>]) -> Result<f64, QuantizerError> {
    if residuals.len() != quantized.len() {
        return Err(QuantizerError::StageMismatch {
            expected: residuals.len(),
            found: quantized.len(),
        });
    }
    let mut total = 0.0;
    for (z, q) in residuals.iter().zip(quantized) {
        if z.dim() != q.dim() {
            return Err(QuantizerError::DimensionMismatch {
                expected: z.len(),
                found: q.len(),
            });
        }
        let sq: f64 = z
            .iter()
            .zip(q.iter())
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
            .sum();
        total += sq / z.len().max(1) as f64;
    }
    Ok(total)
}

/// Reorders `[B, R, T]` data into columns `[R, B * T]` (batch-major).
pub fn batch_to_columns(data: &[f32], batch: usize, dim: usize, len: usize) -> Array2<f32> {
    Array2::from_shape_fn((dim, batch * len), |(r, col)| {
        let (b, t) = (col / len, col % len);
        data[(b * dim + r) * len + t]
    })
}

/// Inverse of [`batch_to_columns`].
pub fn columns_to_batch(cols: ArrayView2<f32>, batch: usize, len: usize) -> Vec<f32> {
    let dim = cols.nrows();
    let mut out = vec![0.0; batch * dim * len];
    for ((r, col), &v) in cols.indexed_iter() {
        let (b, t) = (col / len, col % len);
        out[(b * dim + r) * len + t] = v;
    }
    out
}

/// Code histogram of one stage.
pub fn code_histogram(codes: ArrayView1<u32>, size: usize) -> Vec<u64> {
    let mut h = vec![0; size];
    for &c in codes {
        if let Some(slot) = h.get_mut(c as usize) {
            *slot += 1;
        }
    }
    h
}
