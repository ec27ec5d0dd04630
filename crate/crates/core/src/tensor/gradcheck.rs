use super::{Tape, Tensor, TensorError, Var};

/// Central-difference step.
pub const FD_EPS: f64 = 1e-4;
/// Denominator floor so coordinates with vanishing gradients compare absolutely.
const REL_FLOOR: f64 = 1e-6;
/// A central difference of `f` carries round-off of a few `|f| * eps / h`.
/// Gradients within this factor of that noise are also compared against
/// the floor rather than relatively.
const ROUNDOFF_MARGIN: f64 = 1e4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input, element)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Coordinates whose `±h` evaluations fall on a different smooth piece
    /// (an `l1` or `relu` input changed sign). Central differences are not
    /// a valid oracle there, so they are counted but not compared.
    pub kinks: usize,
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences (`eps = 1e-4`, double precision) at every coordinate of
/// every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |k| (i, k)))
        .collect();
    grad_check_at(f, inputs, &all)
}

/// As [`grad_check`], restricted to the listed `(input, element)` coordinates.
pub fn grad_check_at<F>(
    f: F,
    inputs: &[Tensor<f64>],
    coordinates: &[(usize, usize)],
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(f64, Option<u64>), TensorError> {
        let mut tape = Tape::with_kink_tracking();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.value(out).item(), tape.kink_signature()))
    };

    let mut tape = Tape::with_kink_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.kink_signature();
    let floor = REL_FLOOR.max(tape.value(out).item().abs() * f64::EPSILON / FD_EPS * ROUNDOFF_MARGIN);
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.numel()]))
        .collect();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: coordinates.len(),
        kinks: 0,
    };
    let mut probe = inputs.to_vec();
    for &(i, k) in coordinates {
        let orig = probe[i].data()[k];
        probe[i].data_mut()[k] = orig + FD_EPS;
        let (plus, sig_plus) = eval(&probe)?;
        probe[i].data_mut()[k] = orig - FD_EPS;
        let (minus, sig_minus) = eval(&probe)?;
        probe[i].data_mut()[k] = orig;
        if sig_plus != base || sig_minus != base {
            report.kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * FD_EPS);
        let a = analytic[i][k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if rel > report.max_relative_error || rel.is_nan() {
            report.max_relative_error = if rel.is_nan() { f64::INFINITY } else { rel };
            report.worst = (i, k);
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
