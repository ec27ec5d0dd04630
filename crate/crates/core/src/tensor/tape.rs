use rustfft::num_complex::Complex;

use super::conv::{self, ConvGeom};
use super::dft::{self, DftPlan};
use super::{cst, mismatch, Real, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Real> {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Elu(Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    Shift(Var),
    SumAbs(Var),
    SumSquares(Var),
    Mean(Var),
    Sqrt(Var),
    Div(Var, Var),
    MeanLastAxis {
        x: Var,
        len: usize,
    },
    AvgPool {
        x: Var,
        rows: usize,
        len_in: usize,
        factor: usize,
    },
    StraightThrough(Var),
    DftMagnitude {
        x: Var,
        plan: Box<DftPlan<T>>,
        batch: usize,
        len: usize,
        spectra: Vec<Complex<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Execution record for reverse-mode differentiation.
///
/// Nodes are appended in execution order; [`Tape::backward`] walks them in
/// exact reverse. A tape is single-threaded; independent tapes may run in
/// parallel.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    kinks: Option<u64>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            kinks: None,
        }
    }

    /// A tape that also hashes the sign pattern of every `l1` and `relu`
    /// input, the only places where recorded functions are not
    /// differentiable.
    pub fn with_kink_tracking() -> Self {
        Self {
            kinks: Some(0xcbf2_9ce4_8422_2325),
            ..Self::new()
        }
    }

    /// Sign-pattern hash accumulated so far, when tracking is enabled. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks
    }

    fn note_signs(&mut self, x: Var) {
        if let Some(mut h) = self.kinks {
            for &v in self.nodes[x.0].value.data() {
                let sign: u64 = if v > T::zero() {
                    1
                } else if v < T::zero() {
                    2
                } else {
                    3
                };
                h = (h ^ sign).wrapping_mul(0x0000_0100_0000_01b3);
            }
            self.kinks = Some(h);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims3(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize), TensorError> {
        match *self.shape(v) {
            [a, b, c] => Ok((a, b, c)),
            ref s => Err(mismatch(op, format!("expected rank-3 input, got {s:?}"))),
        }
    }

    /// `x: [B, Cin, T]`, `w: [Cout, Cin, K]`, `bias: [Cout]` -> `[B, Cout, T']`
    /// with `T' = floor((T + 2 padding - K) / stride) + 1`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv1d";
        let (batch, cin, len_in) = self.dims3(OP, x)?;
        let (cout, wcin, kernel) = self.dims3(OP, w)?;
        if wcin != cin || self.shape(bias) != [cout] {
            return Err(mismatch(
                OP,
                format!(
                    "x {:?}, w {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(bias)
                ),
            ));
        }
        let len_out = conv::conv1d_out_len(len_in, kernel, stride, padding).ok_or_else(|| {
            TensorError::InvalidArgument {
                op: OP,
                detail: format!("length {len_in} kernel {kernel} stride {stride} padding {padding}"),
            }
        })?;
        let geom = ConvGeom {
            batch,
            cin,
            cout,
            len_in,
            len_out,
            kernel,
            stride,
            padding,
        };
        let data = conv::conv1d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![batch, cout, len_out], data)?;
        let rg = self.rg(&[x, w, bias]);
        Ok(self.push(value, Op::Conv1d { x, w, b: bias, geom }, rg))
    }

    /// `x: [B, Cin, T]`, `w: [Cin, Cout, K]`, `bias: [Cout]` -> `[B, Cout, T']`
    /// with `T' = (T - 1) stride - 2 padding + K`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv_transpose1d";
        let (batch, cin, len_in) = self.dims3(OP, x)?;
        let (wcin, cout, kernel) = self.dims3(OP, w)?;
        if wcin != cin || self.shape(bias) != [cout] {
            return Err(mismatch(
                OP,
                format!(
                    "x {:?}, w {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(bias)
                ),
            ));
        }
        let len_out = conv::conv_transpose1d_out_len(len_in, kernel, stride, padding)
            .filter(|&l| l > 0)
            .ok_or_else(|| TensorError::InvalidArgument {
                op: OP,
                detail: format!("length {len_in} kernel {kernel} stride {stride} padding {padding}"),
            })?;
        let geom = ConvGeom {
            batch,
            cin,
            cout,
            len_in,
            len_out,
            kernel,
            stride,
            padding,
        };
        let data = conv::conv_transpose1d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![batch, cout, len_out], data)?;
        let rg = self.rg(&[x, w, bias]);
        Ok(self.push(value, Op::ConvTranspose1d { x, w, b: bias, geom }, rg))
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, x: Var) -> Var {
        self.map(x, Op::Elu(x), |v| if v > T::zero() { v } else { v.exp_m1() })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.note_signs(x);
        self.map(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn mul_scalar(&mut self, x: Var, a: T) -> Var {
        self.map(x, Op::Scale(x, a), |v| v * a)
    }

    pub fn add_scalar(&mut self, x: Var, a: T) -> Var {
        self.map(x, Op::Shift(x), |v| v + a)
    }

    fn zip(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(
                op_name,
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("add", a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("sub", a, b, Op::Sub(a, b), |p, q| p - q)
    }

    fn reduce(&mut self, x: Var, op: Op<T>, v: T) -> Var {
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), op, rg)
    }

    /// Sum of absolute values. The subgradient at 0 is 0.
    pub fn l1(&mut self, x: Var) -> Var {
        self.note_signs(x);
        let s = self.value(x).data().iter().map(|v| v.abs()).sum();
        self.reduce(x, Op::SumAbs(x), s)
    }

    /// Sum of squares.
    pub fn l2sq(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        self.reduce(x, Op::SumSquares(x), s)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let src = self.value(x).data();
        let s = src.iter().copied().sum::<T>() / cst(src.len() as f64);
        self.reduce(x, Op::Mean(x), s)
    }

    /// Square root of a scalar; the gradient at 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Result<Var, TensorError> {
        if self.value(x).numel() != 1 {
            return Err(mismatch("sqrt", format!("expected scalar, got {:?}", self.shape(x))));
        }
        let v = self.value(x).item().max(T::zero()).sqrt();
        Ok(self.reduce(x, Op::Sqrt(x), v))
    }

    /// Quotient of two scalars.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).numel() != 1 || self.value(b).numel() != 1 {
            return Err(mismatch(
                "div",
                format!("expected scalars, got {:?} / {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let v = self.value(a).item() / self.value(b).item();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Div(a, b), rg))
    }

    /// Mean over the last axis: `[..., T] -> [...]`.
    pub fn mean_last_axis(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let Some((&len, lead)) = shape.split_last().filter(|(&l, _)| l > 0) else {
            return Err(mismatch("mean_last_axis", format!("{shape:?}")));
        };
        let n: T = cst(len as f64);
        let data = self
            .value(x)
            .data()
            .chunks(len)
            .map(|c| c.iter().copied().sum::<T>() / n)
            .collect();
        let value = Tensor::new(lead.to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MeanLastAxis { x, len }, rg))
    }

    /// Non-overlapping average pooling over the last axis of `[B, C, T]`;
    /// trailing samples that do not fill a full window are dropped.
    pub fn avg_pool1d(&mut self, x: Var, factor: usize) -> Result<Var, TensorError> {
        let (b, c, len_in) = self.dims3("avg_pool1d", x)?;
        if factor == 0 || len_in < factor {
            return Err(TensorError::InvalidArgument {
                op: "avg_pool1d",
                detail: format!("factor {factor} on length {len_in}"),
            });
        }
        let len_out = len_in / factor;
        let inv: T = cst(1.0 / factor as f64);
        let mut data = Vec::with_capacity(b * c * len_out);
        for row in self.value(x).data().chunks(len_in) {
            for o in 0..len_out {
                data.push(row[o * factor..(o + 1) * factor].iter().copied().sum::<T>() * inv);
            }
        }
        let value = Tensor::new(vec![b, c, len_out], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::AvgPool {
                x,
                rows: b * c,
                len_in,
                factor,
            },
            rg,
        ))
    }

    /// Forward value `quantized`, gradient passed unchanged to `z`.
    pub fn straight_through(&mut self, z: Var, quantized: Tensor<T>) -> Result<Var, TensorError> {
        if quantized.shape() != self.shape(z) {
            return Err(mismatch(
                "straight_through",
                format!("{:?} vs {:?}", self.shape(z), quantized.shape()),
            ));
        }
        let rg = self.rg(&[z]);
        Ok(self.push(quantized, Op::StraightThrough(z), rg))
    }

    /// Hann-windowed one-sided STFT magnitudes of `x: [B, T]` or `[B, 1, T]`,
    /// returned as `[B, bins, frames]` with `sqrt(re^2 + im^2 + 1e-8)`.
    pub fn dft_features(
        &mut self,
        x: Var,
        window_len: usize,
        hop: usize,
    ) -> Result<Var, TensorError> {
        const OP: &str = "dft_features";
        let (batch, len) = match *self.shape(x) {
            [b, t] | [b, 1, t] => (b, t),
            ref s => return Err(mismatch(OP, format!("expected [B, T] or [B, 1, T], got {s:?}"))),
        };
        if hop == 0 || window_len < 2 {
            return Err(TensorError::InvalidArgument {
                op: OP,
                detail: format!("window {window_len} hop {hop}"),
            });
        }
        if len < window_len {
            return Err(TensorError::InputTooShort {
                op: OP,
                len,
                window: window_len,
            });
        }
        let plan = DftPlan::new(window_len, hop);
        let (mags, spectra) = dft::forward(&plan, self.value(x).data(), batch, len);
        let value = Tensor::new(vec![batch, plan.bins(), plan.frames(len)], mags)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::DftMagnitude {
                x,
                plan: Box::new(plan),
                batch,
                len,
                spectra,
            },
            rg,
        ))
    }

    /// Sum of scalars.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Result<Var, TensorError> {
        let (&first, rest) = terms.split_first().ok_or_else(|| TensorError::InvalidArgument {
            op: "sum_scalars",
            detail: "no terms".into(),
        })?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Reverse pass from a scalar `loss`; gradients of every node that
    /// requires them become available through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(mismatch(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient buffer for `v`, or `None` when `v` does not need one.
    fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn accumulate(&mut self, v: Var, f: impl Fn(usize) -> T) {
        if let Some(buf) = self.slot(v) {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = *b + f(i);
            }
        }
    }

    fn backward_node(&mut self, i: usize, g: &[T]) {
        // Node values are read through a raw split so input slots can be
        // written while the node itself is borrowed.
        let (nodes, grads) = (&self.nodes, &mut self.grads);
        let node = &nodes[i];
        let mut take = |v: Var| -> Option<Vec<T>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            Some(
                grads[v.0]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); nodes[v.0].value.numel()]),
            )
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, geom } | Op::ConvTranspose1d { x, w, b, geom } => {
                let (mut gx, mut gw, mut gb) = (take(*x), take(*w), take(*b));
                let (xv, wv) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                if matches!(node.op, Op::Conv1d { .. }) {
                    conv::conv1d_backward(
                        geom,
                        xv,
                        wv,
                        g,
                        gx.as_deref_mut(),
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                } else {
                    conv::conv_transpose1d_backward(
                        geom,
                        xv,
                        wv,
                        g,
                        gx.as_deref_mut(),
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                }
                for (v, buf) in [(x, gx), (w, gw), (b, gb)] {
                    if buf.is_some() {
                        grads[v.0] = buf;
                    }
                }
            }
            Op::DftMagnitude {
                x,
                plan,
                batch,
                len,
                spectra,
            } => {
                if let Some(mut gx) = take(*x) {
                    dft::backward(plan, g, node.value.data(), spectra, *batch, *len, &mut gx);
                    grads[x.0] = Some(gx);
                }
            }
            _ => {
                let x = match &node.op {
                    Op::Elu(x)
                    | Op::Relu(x)
                    | Op::Scale(x, _)
                    | Op::Shift(x)
                    | Op::SumAbs(x)
                    | Op::SumSquares(x)
                    | Op::Mean(x)
                    | Op::Sqrt(x)
                    | Op::StraightThrough(x)
                    | Op::MeanLastAxis { x, .. }
                    | Op::AvgPool { x, .. } => *x,
                    Op::Add(a, b) | Op::Sub(a, b) | Op::Div(a, b) => {
                        self.backward_binary(i, g, *a, *b);
                        return;
                    }
                    _ => unreachable!(),
                };
                self.backward_unary(i, g, x);
            }
        }
    }

    fn backward_unary(&mut self, i: usize, g: &[T], x: Var) {
        if !self.nodes[x.0].requires_grad {
            return;
        }
        let mut gx = self.grads[x.0]
            .take()
            .unwrap_or_else(|| vec![T::zero(); self.nodes[x.0].value.numel()]);
        let node = &self.nodes[i];
        let xv = self.nodes[x.0].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Elu(_) => {
                for ((gi, &xi), (&yi, &go)) in gx.iter_mut().zip(xv).zip(out.iter().zip(g)) {
                    let d = if xi > T::zero() { T::one() } else { yi + T::one() };
                    *gi = *gi + go * d;
                }
            }
            Op::Relu(_) => {
                for ((gi, &xi), &go) in gx.iter_mut().zip(xv).zip(g) {
                    if xi > T::zero() {
                        *gi = *gi + go;
                    }
                }
            }
            Op::Scale(_, a) => {
                for (gi, &go) in gx.iter_mut().zip(g) {
                    *gi = *gi + go * *a;
                }
            }
            Op::Shift(_) | Op::StraightThrough(_) => {
                for (gi, &go) in gx.iter_mut().zip(g) {
                    *gi = *gi + go;
                }
            }
            Op::SumAbs(_) => {
                let go = g[0];
                for (gi, &xi) in gx.iter_mut().zip(xv) {
                    let s = if xi > T::zero() {
                        T::one()
                    } else if xi < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    *gi = *gi + go * s;
                }
            }
            Op::SumSquares(_) => {
                let go = g[0];
                let two: T = cst(2.0);
                for (gi, &xi) in gx.iter_mut().zip(xv) {
                    *gi = *gi + go * two * xi;
                }
            }
            Op::Mean(_) => {
                let d = g[0] / cst(xv.len() as f64);
                for gi in gx.iter_mut() {
                    *gi = *gi + d;
                }
            }
            Op::Sqrt(_) => {
                let y = out[0];
                if y > T::zero() {
                    gx[0] = gx[0] + g[0] / (y + y);
                }
            }
            Op::MeanLastAxis { len, .. } => {
                let inv: T = cst(1.0 / *len as f64);
                for (row, &go) in gx.chunks_mut(*len).zip(g) {
                    for gi in row {
                        *gi = *gi + go * inv;
                    }
                }
            }
            Op::AvgPool {
                rows,
                len_in,
                factor,
                ..
            } => {
                let len_out = len_in / factor;
                let inv: T = cst(1.0 / *factor as f64);
                for r in 0..*rows {
                    for o in 0..len_out {
                        let d = g[r * len_out + o] * inv;
                        for gi in &mut gx[r * len_in + o * factor..][..*factor] {
                            *gi = *gi + d;
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
        self.grads[x.0] = Some(gx);
    }

    fn backward_binary(&mut self, i: usize, g: &[T], a: Var, b: Var) {
        match self.nodes[i].op {
            Op::Add(..) => {
                self.accumulate(a, |k| g[k]);
                self.accumulate(b, |k| g[k]);
            }
            Op::Sub(..) => {
                self.accumulate(a, |k| g[k]);
                self.accumulate(b, |k| -g[k]);
            }
            Op::Div(..) => {
                let (av, bv) = (self.value(a).item(), self.value(b).item());
                let go = g[0];
                self.accumulate(a, |_| go / bv);
                self.accumulate(b, |_| -go * av / (bv * bv));
            }
            _ => unreachable!(),
        }
    }
}

impl<T: Real> std::fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}
