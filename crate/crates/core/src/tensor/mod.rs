//! A small reverse-mode differentiable tensor core.
//!
//! Only the operations the codec needs are provided: 1-D (transposed)
//! convolutions, ELU/ReLU, elementwise add/sub, scalar affine maps, a few
//! reductions, average pooling, a straight-through bridge for vector
//! quantization and differentiable STFT magnitudes. Every operation is
//! recorded on a [`Tape`] and differentiated in exact reverse order.
//!
//! The engine is generic over [`Real`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

mod checkpoint;
mod conv;
mod dft;
mod gradcheck;
mod optim;
mod params;
mod tape;

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rustfft::FftNum;
use thiserror::Error;

pub use dft::MAGNITUDE_EPS;
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointEntry, CheckpointError};
pub use conv::{conv1d_out_len, conv_transpose1d_out_len};
pub use gradcheck::{grad_check, grad_check_at, GradCheckReport, FD_EPS};
pub use optim::{Adam, AdamConfig};
pub use params::{BoundParams, ParamId, ParamStore};
pub use tape::{Tape, Var};

/// Floating point element type usable by the engine.
pub trait Real:
    Float + FftNum + FromPrimitive + ToPrimitive + Default + Sum + Debug + Display + LowerExp
{
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub(crate) fn cst<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("finite constant")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: input of length {len} is shorter than window {window}")]
    InputTooShort {
        op: &'static str,
        len: usize,
        window: usize,
    },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

/// Dense row-major tensor value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(mismatch(
                "tensor",
                format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, data.iter().map(|&v| cst(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single element of a scalar (or one-element) tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(mismatch(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
