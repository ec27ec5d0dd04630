//! Single-channel neural codec: convolutional encoder, residual vector
//! quantizer, mirrored decoder and a bank of multi-scale discriminators.

mod losses;
mod model;
mod report;
mod train;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantizer::QuantizerError;
use crate::spectral::{SpectralError, StftConfig};
use crate::tensor::{CheckpointError, TensorError};

pub use losses::{
    loss_discriminator, loss_feature_match, loss_generator_adv, loss_reconstruction, loss_stft,
    loss_total, LossReport, LossWeights, FEATURE_EPS,
};
pub use model::resample_kernel;
pub use report::{reconstruct_report, ReportFiles};
pub use train::{Codec, Encoded, StepOutcome, Trainer};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("invalid codec configuration: {0}")]
    InvalidConfig(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("input length {len} is not a multiple of {factor}")]
    NotDivisible { len: usize, factor: usize },
    #[error("training data is empty")]
    EmptyDataset,
    #[error("non-finite loss at step {step}; last finite report: {last:?}")]
    NonFinite {
        step: usize,
        last: Option<LossReport>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("image: {0}")]
    Image(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    /// Average-pooling factor applied to the input of each sub-discriminator.
    pub pool_factors: Vec<usize>,
    /// Hidden channel widths; one more layer maps to a single channel.
    pub channels: Vec<usize>,
    /// One stride per layer (`channels.len() + 1` entries).
    pub strides: Vec<usize>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            pool_factors: vec![1, 2, 4],
            channels: vec![8, 16, 16],
            strides: vec![4, 4, 2, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub encoder_strides: Vec<usize>,
    pub base_channels: usize,
    pub embed_dim: usize,
    pub codebook_size: usize,
    pub n_q: usize,
    pub weights: LossWeights,
    pub stft: StftConfig,
    pub discriminator: DiscriminatorConfig,
    pub learning_rate: f64,
    pub adam_betas: [f64; 2],
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub ema_decay: f64,
    pub dead_code_window: usize,
    /// Right-pad inputs whose length is not a multiple of the hop factor
    /// instead of rejecting them.
    pub pad_inputs: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            encoder_strides: vec![4, 5, 5],
            base_channels: 4,
            embed_dim: 32,
            codebook_size: 8192,
            n_q: 1,
            weights: LossWeights::default(),
            stft: StftConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            learning_rate: 1e-4,
            adam_betas: [0.9, 0.99],
            batch_size: 32,
            steps: 2000,
            seed: 0,
            ema_decay: 0.99,
            dead_code_window: 100,
            pad_inputs: true,
        }
    }
}

impl CodecConfig {
    /// The small model used for gradient checks: R=4, V=8, windows of 200.
    pub fn micro() -> Self {
        Self {
            base_channels: 2,
            embed_dim: 4,
            codebook_size: 8,
            stft: StftConfig::halving(64, 16, 3),
            discriminator: DiscriminatorConfig {
                pool_factors: vec![1, 2, 4],
                channels: vec![4, 4, 4],
                strides: vec![2, 2, 2, 2],
            },
            batch_size: 2,
            ..Self::default()
        }
    }

    /// Samples per embedding step: the product of the encoder strides.
    pub fn hop(&self) -> usize {
        self.encoder_strides.iter().product()
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let bad = |m: String| Err(CodecError::InvalidConfig(m));
        if self.encoder_strides.is_empty() || self.encoder_strides.contains(&0) {
            return bad(format!("encoder_strides {:?} must be non-empty and positive", self.encoder_strides));
        }
        if self.base_channels == 0 || self.embed_dim == 0 {
            return bad("base_channels and embed_dim must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !self.adam_betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return bad(format!("adam_betas {:?} must lie in [0, 1)", self.adam_betas));
        }
        let d = &self.discriminator;
        if d.pool_factors.is_empty() || d.pool_factors.contains(&0) {
            return bad("discriminator needs at least one positive pool factor".into());
        }
        if d.strides.len() != d.channels.len() + 1 || d.strides.contains(&0) {
            return bad("discriminator needs one positive stride per layer (channels + 1)".into());
        }
        self.weights.validate()?;
        self.stft.validate()?;
        self.rvq_config().validate()?;
        Ok(())
    }

    pub(crate) fn rvq_config(&self) -> crate::quantizer::RvqConfig {
        crate::quantizer::RvqConfig {
            num_stages: self.n_q,
            codebook_size: self.codebook_size,
            dim: self.embed_dim,
            decay: self.ema_decay,
            dead_code_window: self.dead_code_window,
            ..Default::default()
        }
    }
}
