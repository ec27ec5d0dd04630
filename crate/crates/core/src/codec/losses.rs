//! The codec objectives, all normalised by element count so the loss
//! weights do not depend on the window length.

use serde::{Deserialize, Serialize};

use super::CodecError;
use crate::spectral::StftConfig;
use crate::tensor::{cst, Real, Tape, Tensor, TensorError, Var};

/// Added to the feature-matching denominator.
pub const FEATURE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_t: f64,
    pub lambda_f: f64,
    pub lambda_g: f64,
    pub lambda_feat: f64,
    pub lambda_w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_t: 500.0,
            lambda_f: 9.0,
            lambda_g: 1.0,
            lambda_feat: 1.0,
            lambda_w: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), CodecError> {
        let all = [self.lambda_t, self.lambda_f, self.lambda_g, self.lambda_feat, self.lambda_w];
        if all.iter().all(|l| l.is_finite() && *l >= 0.0) {
            Ok(())
        } else {
            Err(CodecError::InvalidConfig(format!("loss weights must be finite and >= 0: {self:?}")))
        }
    }

    /// Whether the generator objective involves the discriminators at all.
    pub fn adversarial(&self) -> bool {
        self.lambda_g > 0.0 || self.lambda_feat > 0.0
    }
}

/// Per-step values of every loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_t: f64,
    pub l_f: f64,
    pub l_w: f64,
    pub l_d: f64,
    pub l_g: f64,
    pub l_feat: f64,
    #[serde(rename = "l_G")]
    pub l_total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_t, self.l_f, self.l_w, self.l_d, self.l_g, self.l_feat, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub const CSV_HEADER: &'static str = "step,l_t,l_f,l_w,l_d,l_g,l_feat,l_G";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{},{}",
            self.l_t, self.l_f, self.l_w, self.l_d, self.l_g, self.l_feat, self.l_total
        )
    }
}

/// `L_G = λt Lt + λf Lf + λg Lg + λfeat Lfeat + λw Lw`.
pub fn loss_total(report: &LossReport, w: &LossWeights) -> f64 {
    w.lambda_t * report.l_t
        + w.lambda_f * report.l_f
        + w.lambda_g * report.l_g
        + w.lambda_feat * report.l_feat
        + w.lambda_w * report.l_w
}

fn inv<T: Real>(n: usize) -> T {
    cst(1.0 / n.max(1) as f64)
}

/// `mean |a - b|`.
pub(crate) fn mean_abs_diff<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var, TensorError> {
    let d = tape.sub(a, b)?;
    let n = tape.value(d).numel();
    let s = tape.l1(d);
    Ok(tape.mul_scalar(s, inv(n)))
}

/// `sum over scales of mean|S(x) - S(x̂)| + sqrt(mean (S(x) - S(x̂))^2)`
/// on STFT magnitudes; `x`, `x_hat` are `[B, 1, T]` or `[B, T]`.
pub(crate) fn stft_loss<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    x_hat: Var,
    cfg: &StftConfig,
) -> Result<Var, TensorError> {
    let mut terms = Vec::with_capacity(cfg.scales.len());
    for s in &cfg.scales {
        let a = tape.dft_features(x, s.window_length, s.hop_length)?;
        let b = tape.dft_features(x_hat, s.window_length, s.hop_length)?;
        let d = tape.sub(a, b)?;
        let n = tape.value(d).numel();
        let l1 = tape.l1(d);
        let l1 = tape.mul_scalar(l1, inv(n));
        let sq = tape.l2sq(d);
        let ms = tape.mul_scalar(sq, inv(n));
        let rms = tape.sqrt(ms)?;
        terms.push(tape.add(l1, rms)?);
    }
    tape.sum_scalars(&terms)
}

/// `max(0, offset + sign * v)` averaged over all elements.
fn hinge_mean<T: Real>(tape: &mut Tape<T>, v: Var, sign: f64) -> Var {
    let s = tape.mul_scalar(v, cst(sign));
    let h = tape.add_scalar(s, T::one());
    let h = tape.relu(h);
    tape.mean(h)
}

/// `(1/K) sum_k mean_b [max(0, 1 - D_k(x)) + max(0, 1 + D_k(x̂))]`.
pub(crate) fn discriminator_loss<T: Real>(
    tape: &mut Tape<T>,
    real: &[Var],
    fake: &[Var],
) -> Result<Var, TensorError> {
    if real.is_empty() || real.len() != fake.len() {
        return Err(TensorError::InvalidArgument {
            op: "discriminator_loss",
            detail: format!("{} real vs {} fake logits", real.len(), fake.len()),
        });
    }
    let mut terms = Vec::with_capacity(2 * real.len());
    for (&r, &f) in real.iter().zip(fake) {
        terms.push(hinge_mean(tape, r, -1.0));
        terms.push(hinge_mean(tape, f, 1.0));
    }
    let total = tape.sum_scalars(&terms)?;
    Ok(tape.mul_scalar(total, inv(real.len())))
}

/// `(1/K) sum_k mean_b max(1 - D_k(x̂), 0)`.
pub(crate) fn generator_adv_loss<T: Real>(tape: &mut Tape<T>, fake: &[Var]) -> Result<Var, TensorError> {
    if fake.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "generator_adv_loss",
            detail: "no logits".into(),
        });
    }
    let terms: Vec<Var> = fake.iter().map(|&f| hinge_mean(tape, f, -1.0)).collect();
    let total = tape.sum_scalars(&terms)?;
    Ok(tape.mul_scalar(total, inv(fake.len())))
}

/// `(1/(K L)) sum_{k,l} (||D_k^l(x) - D_k^l(x̂)||_1 / B) / (mean|D_k^l(x)| + eps)`
/// where `B` is the leading (batch) dimension of each map. The denominator
/// is treated as a constant.
pub(crate) fn feature_match_loss<T: Real>(
    tape: &mut Tape<T>,
    real: &[Vec<Var>],
    fake: &[Vec<Var>],
) -> Result<Var, TensorError> {
    let shape_err = || TensorError::ShapeMismatch {
        op: "feature_match_loss",
        detail: "feature nesting differs between real and fake".into(),
    };
    if real.is_empty() || real.len() != fake.len() {
        return Err(shape_err());
    }
    let mut terms = Vec::new();
    for (rk, fk) in real.iter().zip(fake) {
        if rk.len() != fk.len() || rk.is_empty() {
            return Err(shape_err());
        }
        for (&r, &f) in rk.iter().zip(fk) {
            let value = tape.value(r);
            let batch = if value.shape().len() >= 2 { value.shape()[0] } else { 1 };
            let n = value.numel();
            let mean_abs = value.data().iter().map(|v| v.abs()).sum::<T>() * inv::<T>(n);
            let denom = mean_abs + cst::<T>(FEATURE_EPS);
            let d = tape.sub(r, f)?;
            let l1 = tape.l1(d);
            terms.push(tape.mul_scalar(l1, T::one() / (denom * cst::<T>(batch as f64))));
        }
    }
    let count = terms.len();
    let total = tape.sum_scalars(&terms)?;
    Ok(tape.mul_scalar(total, inv(count)))
}

/// `sum_i mean((z - c_i)^2)` where `c_i` is the running sum of the first
/// `i + 1` stages' codewords, held constant (gradient flows to `z` only).
pub(crate) fn commitment_loss_tape<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    cumulative: &[Tensor<T>],
) -> Result<Var, TensorError> {
    let mut terms = Vec::with_capacity(cumulative.len());
    for c in cumulative {
        let c = tape.constant(c.clone());
        let d = tape.sub(z, c)?;
        let n = tape.value(d).numel();
        let sq = tape.l2sq(d);
        terms.push(tape.mul_scalar(sq, inv(n)));
    }
    tape.sum_scalars(&terms)
}

fn as_signal(tape: &mut Tape<f64>, x: &[f64]) -> Result<Var, CodecError> {
    Ok(tape.constant(Tensor::new(vec![1, 1, x.len()], x.to_vec())?))
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<(), CodecError> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(CodecError::Shape(format!("lengths {} and {} differ", a.len(), b.len())))
    }
}

/// `L_t`: mean absolute difference.
pub fn loss_reconstruction(x: &[f64], x_hat: &[f64]) -> Result<f64, CodecError> {
    check_same_len(x, x_hat)?;
    let mut tape = Tape::new();
    let (a, b) = (as_signal(&mut tape, x)?, as_signal(&mut tape, x_hat)?);
    let l = mean_abs_diff(&mut tape, a, b)?;
    Ok(tape.value(l).item())
}

/// `L_f` on one signal pair.
pub fn loss_stft(x: &[f64], x_hat: &[f64], cfg: &StftConfig) -> Result<f64, CodecError> {
    check_same_len(x, x_hat)?;
    cfg.validate()?;
    let mut tape = Tape::new();
    let (a, b) = (as_signal(&mut tape, x)?, as_signal(&mut tape, x_hat)?);
    let l = stft_loss(&mut tape, a, b, cfg)?;
    Ok(tape.value(l).item())
}

fn logits(tape: &mut Tape<f64>, v: &[f64]) -> Vec<Var> {
    v.iter().map(|&d| tape.constant(Tensor::scalar(d))).collect()
}

/// `L_D` from one logit per discriminator.
pub fn loss_discriminator(real: &[f64], fake: &[f64]) -> Result<f64, CodecError> {
    let mut tape = Tape::new();
    let (r, f) = (logits(&mut tape, real), logits(&mut tape, fake));
    let l = discriminator_loss(&mut tape, &r, &f)?;
    Ok(tape.value(l).item())
}

/// `L_g` from one logit per discriminator.
pub fn loss_generator_adv(fake: &[f64]) -> Result<f64, CodecError> {
    let mut tape = Tape::new();
    let f = logits(&mut tape, fake);
    let l = generator_adv_loss(&mut tape, &f)?;
    Ok(tape.value(l).item())
}

/// `L_feat` over `[K][L]` feature maps whose first axis is the batch.
pub fn loss_feature_match(real: &[Vec<Tensor<f64>>], fake: &[Vec<Tensor<f64>>]) -> Result<f64, CodecError> {
    let mut tape = Tape::new();
    let mut lift = |maps: &[Vec<Tensor<f64>>]| -> Vec<Vec<Var>> {
        maps.iter()
            .map(|k| k.iter().map(|t| tape.constant(t.clone())).collect())
            .collect()
    };
    let (r, f) = (lift(real), lift(fake));
    let l = feature_match_loss(&mut tape, &r, &f)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recombination_examples() {
        let w = LossWeights::default();
        assert_eq!(loss_total(&LossReport::default(), &w), 0.0);
        let only_t = LossReport {
            l_t: 1.0,
            ..Default::default()
        };
        assert_eq!(loss_total(&only_t, &w), 500.0);
        let mixed = LossReport {
            l_t: 0.1,
            l_f: 2.0,
            l_g: 0.5,
            l_feat: 1.0,
            l_w: 0.3,
            ..Default::default()
        };
        assert!((loss_total(&mixed, &w) - 72.5).abs() < 1e-12);
    }

    #[test]
    fn csv_header_matches_row_arity() {
        let cols = LossReport::CSV_HEADER.split(',').count();
        assert_eq!(LossReport::default().csv_row(3).split(',').count(), cols);
    }
}
