use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;

use super::losses::{
    commitment_loss_tape, discriminator_loss, feature_match_loss, generator_adv_loss, mean_abs_diff,
    stft_loss, LossReport,
};
use super::model::{Discriminator, Generator};
use super::{CodecConfig, CodecError};
use crate::quantizer::{batch_to_columns, columns_to_batch, Quantized, QuantizerError, RvqState};
use crate::rng::{fnv1a, seeded, Rng};
use crate::tensor::{
    cst, grad_check_at, read_checkpoint, write_checkpoint, Adam, AdamConfig, BoundParams,
    CheckpointEntry, GradCheckReport, ParamStore, Real, Tape, Tensor, Var,
};

const CHECKPOINT_FORMAT: &str = "neurotok-codec-v1";

/// Encoder output for a batch: `z` is `[batch, dim, frames]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub z: Vec<f32>,
    pub batch: usize,
    pub dim: usize,
    pub frames: usize,
    /// Zeros appended to every input row before encoding.
    pub pad: usize,
}

impl Encoded {
    /// Embeddings as columns `[dim, batch * frames]`.
    pub fn columns(&self) -> Array2<f32> {
        batch_to_columns(&self.z, self.batch, self.dim, self.frames)
    }
}

/// The trainable codec: generator and discriminator weights plus codebooks.
#[derive(Clone, Debug)]
pub struct Codec {
    pub config: CodecConfig,
    generator: Generator,
    pub generator_params: ParamStore<f32>,
    discriminator: Discriminator,
    pub discriminator_params: ParamStore<f32>,
    pub rvq: RvqState,
}

/// Differentiable pieces of one generator forward pass.
struct Forward {
    z: Var,
    x_hat: Var,
    /// Running codeword sums per stage, `[B, R, T_E]` each.
    cumulative: Vec<Tensor<f64>>,
}

struct Terms {
    l_t: Var,
    l_f: Var,
    l_w: Var,
    l_g: Option<Var>,
    l_feat: Option<Var>,
    total: Var,
}

impl Terms {
    /// Component values; `l_d` is left at 0.
    fn report<T: Real>(&self, tape: &Tape<T>) -> LossReport {
        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().to_f64().expect("real"));
        LossReport {
            l_t: value(Some(self.l_t)),
            l_f: value(Some(self.l_f)),
            l_w: value(Some(self.l_w)),
            l_d: 0.0,
            l_g: value(self.l_g),
            l_feat: value(self.l_feat),
            l_total: value(Some(self.total)),
        }
    }
}

fn cast_tensor<T: Real>(t: &Tensor<f64>) -> Tensor<T> {
    t.cast()
}

/// Per-stage running sums of selected codewords, reshaped to `[B, R, T_E]`.
fn cumulative_codewords(q: &Quantized, batch: usize, frames: usize) -> Vec<Tensor<f64>> {
    let dim = q.z_q.nrows();
    let mut running = Array2::<f32>::zeros(q.z_q.raw_dim());
    q.selected
        .iter()
        .map(|s| {
            running += s;
            let data = columns_to_batch(running.view(), batch, frames);
            Tensor::new(vec![batch, dim, frames], data.iter().map(|&v| f64::from(v)).collect())
                .expect("sized from the batch")
        })
        .collect()
}

impl Codec {
    pub fn new(config: CodecConfig) -> Result<Self, CodecError> {
        config.validate()?;
        let mut rng = seeded(config.seed);
        let mut generator_params = ParamStore::new();
        let generator = Generator::build(&config, &mut generator_params, &mut rng);
        let mut discriminator_params = ParamStore::new();
        let discriminator = Discriminator::build(&config.discriminator, &mut discriminator_params, &mut rng);
        let rvq = RvqState::new(config.rvq_config(), &mut rng)?;
        Ok(Self {
            config,
            generator,
            generator_params,
            discriminator,
            discriminator_params,
            rvq,
        })
    }

    pub fn hop(&self) -> usize {
        self.config.hop()
    }

    pub fn num_discriminators(&self) -> usize {
        self.discriminator.num_discriminators()
    }

    /// `[B, T] -> [B, 1, T + pad]` with `pad` zeros appended when padding
    /// is enabled.
    fn prepare(&self, x: ArrayView2<f32>, allow_pad: bool) -> Result<(Tensor<f32>, usize), CodecError> {
        let (batch, len) = x.dim();
        let hop = self.hop();
        if batch == 0 || len == 0 {
            return Err(CodecError::Shape(format!("empty input [{batch}, {len}]")));
        }
        let pad = (hop - len % hop) % hop;
        if pad > 0 && !(allow_pad && self.config.pad_inputs) {
            return Err(CodecError::NotDivisible { len, factor: hop });
        }
        let total = len + pad;
        let mut data = vec![0.0; batch * total];
        for (b, row) in x.outer_iter().enumerate() {
            for (t, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(CodecError::Shape(format!("non-finite input at [{b}, {t}]")));
                }
                data[b * total + t] = v;
            }
        }
        Ok((Tensor::new(vec![batch, 1, total], data)?, pad))
    }

    /// Runs the encoder on every row of `x: [B, T]`.
    pub fn encode(&self, x: ArrayView2<f32>) -> Result<Encoded, CodecError> {
        let (input, pad) = self.prepare(x, true)?;
        let batch = input.shape()[0];
        let mut tape = Tape::new();
        let p = self.generator_params.bind(&mut tape, false);
        let xv = tape.constant(input);
        let z = self.generator.encode(&mut tape, &p, xv)?;
        let shape = tape.shape(z).to_vec();
        Ok(Encoded {
            z: tape.value(z).data().to_vec(),
            batch,
            dim: shape[1],
            frames: shape[2],
            pad,
        })
    }

    /// Decodes `[R, B * T_E]` quantized columns into `[B, T_E * hop]`.
    pub fn decode(&self, z_q: ArrayView2<f32>, batch: usize) -> Result<Array2<f32>, CodecError> {
        if batch == 0 || !z_q.ncols().is_multiple_of(batch) || z_q.nrows() != self.config.embed_dim {
            return Err(CodecError::Shape(format!(
                "cannot decode {:?} columns as batch {batch} of dimension {}",
                z_q.dim(),
                self.config.embed_dim
            )));
        }
        let frames = z_q.ncols() / batch;
        let data = columns_to_batch(z_q, batch, frames);
        let mut tape = Tape::new();
        let p = self.generator_params.bind(&mut tape, false);
        let zv = tape.constant(Tensor::new(vec![batch, self.config.embed_dim, frames], data)?);
        let y = self.generator.decode(&mut tape, &p, zv)?;
        let len = tape.shape(y)[2];
        Ok(Array2::from_shape_vec((batch, len), tape.value(y).data().to_vec()).expect("decoder output shape"))
    }

    /// Codes `[N_q, T_E]` of one channel and the zero padding that was added.
    pub fn tokenize(&self, x: &[f32]) -> Result<(Array2<u32>, usize), CodecError> {
        let enc = self.encode(ArrayView2::from_shape((1, x.len()), x).expect("one row"))?;
        let q = self.rvq.quantize(enc.columns().view())?;
        Ok((q.codes, enc.pad))
    }

    /// Inverse of [`Codec::tokenize`]: decodes codes and drops `pad` trailing samples.
    pub fn detokenize(&self, codes: ArrayView2<u32>, pad: usize) -> Result<Vec<f32>, CodecError> {
        let z_q = self.rvq.dequantize(codes)?;
        let mut y = self.decode(z_q.view(), 1)?.into_raw_vec_and_offset().0;
        y.truncate(y.len().saturating_sub(pad));
        Ok(y)
    }

    /// Encode, quantize and decode every row; output has the input's shape.
    pub fn reconstruct(&self, x: ArrayView2<f32>) -> Result<Array2<f32>, CodecError> {
        let enc = self.encode(x)?;
        let q = self.rvq.quantize(enc.columns().view())?;
        let y = self.decode(q.z_q.view(), enc.batch)?;
        Ok(y.slice(ndarray::s![.., ..x.ncols()]).to_owned())
    }

    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        gen: &BoundParams,
        x: Var,
        quantized: impl FnOnce(&Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<f64>>), CodecError>,
    ) -> Result<Forward, CodecError> {
        let z = self.generator.encode(tape, gen, x)?;
        let (z_q, cumulative) = quantized(tape.value(z))?;
        let st = tape.straight_through(z, z_q)?;
        let x_hat = self.generator.decode(tape, gen, st)?;
        Ok(Forward { z, x_hat, cumulative })
    }

    fn losses<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        fwd: &Forward,
        disc: Option<&BoundParams>,
    ) -> Result<Terms, CodecError> {
        let w = self.config.weights;
        let l_t = mean_abs_diff(tape, fwd.x_hat, x)?;
        let l_f = stft_loss(tape, x, fwd.x_hat, &self.config.stft)?;
        let cumulative: Vec<Tensor<T>> = fwd.cumulative.iter().map(cast_tensor).collect();
        let l_w = commitment_loss_tape(tape, fwd.z, &cumulative)?;
        let mut weighted = vec![
            tape.mul_scalar(l_t, cst(w.lambda_t)),
            tape.mul_scalar(l_f, cst(w.lambda_f)),
            tape.mul_scalar(l_w, cst(w.lambda_w)),
        ];
        let (mut l_g, mut l_feat) = (None, None);
        if let Some(dp) = disc {
            let real = self.discriminator.forward(tape, dp, x)?;
            let fake = self.discriminator.forward(tape, dp, fwd.x_hat)?;
            let g = generator_adv_loss(tape, &fake.logits)?;
            let f = feature_match_loss(tape, &real.features, &fake.features)?;
            weighted.push(tape.mul_scalar(g, cst(w.lambda_g)));
            weighted.push(tape.mul_scalar(f, cst(w.lambda_feat)));
            l_g = Some(g);
            l_feat = Some(f);
        }
        let total = tape.sum_scalars(&weighted)?;
        Ok(Terms {
            l_t,
            l_f,
            l_w,
            l_g,
            l_feat,
            total,
        })
    }

    /// Generator loss components on `x: [B, T]` at the current weights and
    /// codebooks, evaluated in double precision without any update.
    pub fn generator_losses(&self, x: ArrayView2<f32>) -> Result<LossReport, CodecError> {
        let (input, _) = self.prepare(x, false)?;
        let gen64: ParamStore<f64> = self.generator_params.cast();
        let mut tape = Tape::<f64>::new();
        let gen = gen64.bind(&mut tape, false);
        let disc = self
            .config
            .weights
            .adversarial()
            .then(|| self.discriminator_params.cast::<f64>().bind(&mut tape, false));
        let xv = tape.constant(input.cast());
        let fwd = self.forward(&mut tape, &gen, xv, |z| {
            let (b, r, f) = (z.shape()[0], z.shape()[1], z.shape()[2]);
            let z32: Vec<f32> = z.data().iter().map(|&v| v as f32).collect();
            let q = self.rvq.quantize(batch_to_columns(&z32, b, r, f).view())?;
            let zq = columns_to_batch(q.z_q.view(), b, f).iter().map(|&v| f64::from(v)).collect();
            Ok((Tensor::new(z.shape().to_vec(), zq)?, cumulative_codewords(&q, b, f)))
        })?;
        let terms = self.losses(&mut tape, xv, &fwd, disc.as_ref())?;
        Ok(terms.report(&tape))
    }

    /// Gradient check of `L_G` with respect to generator parameters, in
    /// double precision, with the quantizer frozen at the base point: the
    /// quantized embedding is `z + (z_q(z0) - z0)` and the commitment
    /// targets are fixed. `coordinates` are `(parameter tensor, element)`
    /// pairs; `None` checks every generator parameter.
    pub fn generator_grad_check(
        &self,
        x: ArrayView2<f32>,
        coordinates: Option<&[(usize, usize)]>,
    ) -> Result<GradCheckReport, CodecError> {
        let (input, _) = self.prepare(x, false)?;
        let input: Tensor<f64> = input.cast();
        let gen64: ParamStore<f64> = self.generator_params.cast();
        let disc64: ParamStore<f64> = self.discriminator_params.cast();
        let adversarial = self.config.weights.adversarial();

        // Quantize once at the base parameters.
        let (batch, frames, offset, cumulative) = {
            let mut tape = Tape::new();
            let p = gen64.bind(&mut tape, false);
            let xv = tape.constant(input.clone());
            let z = self.generator.encode(&mut tape, &p, xv)?;
            let zt = tape.value(z).clone();
            let (b, r, f) = (zt.shape()[0], zt.shape()[1], zt.shape()[2]);
            let z32: Vec<f32> = zt.data().iter().map(|&v| v as f32).collect();
            let q = self.rvq.quantize(batch_to_columns(&z32, b, r, f).view())?;
            let zq = columns_to_batch(q.z_q.view(), b, f);
            let offset: Vec<f64> = zq.iter().zip(zt.data()).map(|(&a, &z)| f64::from(a) - z).collect();
            (b, f, Tensor::new(zt.shape().to_vec(), offset)?, cumulative_codewords(&q, b, f))
        };
        let _ = (batch, frames);

        let inputs: Vec<Tensor<f64>> = gen64.iter().map(|(_, t)| t.clone()).collect();
        let all: Vec<(usize, usize)>;
        let coords = match coordinates {
            Some(c) => c,
            None => {
                all = inputs
                    .iter()
                    .enumerate()
                    .flat_map(|(i, t)| (0..t.numel()).map(move |k| (i, k)))
                    .collect();
                &all
            }
        };
        let f = |tape: &mut Tape<f64>, vars: &[Var]| {
            let gen = BoundParams::from_vars(vars.to_vec());
            let disc = adversarial.then(|| disc64.bind(tape, false));
            let xv = tape.constant(input.clone());
            let fwd = self
                .forward(tape, &gen, xv, |z| {
                    let mut q = z.clone();
                    q.data_mut().iter_mut().zip(offset.data()).for_each(|(a, o)| *a += o);
                    Ok((q, cumulative.clone()))
                })
                .map_err(|e| crate::tensor::TensorError::InvalidArgument {
                    op: "generator",
                    detail: e.to_string(),
                })?;
            let terms = self
                .losses(tape, xv, &fwd, disc.as_ref())
                .map_err(|e| crate::tensor::TensorError::InvalidArgument {
                    op: "generator",
                    detail: e.to_string(),
                })?;
            Ok(terms.total)
        };
        Ok(grad_check_at(f, &inputs, coords)?)
    }

    /// Writes generator, discriminator and codebook tensors to one file.
    pub fn save(&self, path: &Path) -> Result<(), CodecError> {
        let mut entries: Vec<CheckpointEntry> = self
            .generator_params
            .iter()
            .chain(self.discriminator_params.iter())
            .map(|(name, t)| CheckpointEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        entries.extend(self.rvq.checkpoint_entries());
        let meta = serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "config": self.config,
        });
        Ok(write_checkpoint(path, &meta, &entries)?)
    }

    pub fn load(path: &Path) -> Result<Self, CodecError> {
        let (meta, entries) = read_checkpoint(path)?;
        if meta.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(CodecError::InvalidConfig(format!(
                "{} is not a codec checkpoint",
                path.display()
            )));
        }
        let config: CodecConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| CodecError::InvalidConfig(format!("checkpoint config: {e}")))?;
        let mut codec = Codec::new(config)?;
        for store in [&mut codec.generator_params, &mut codec.discriminator_params] {
            for (name, t) in store.iter_mut() {
                let e = entries
                    .iter()
                    .find(|e| e.name == name)
                    .ok_or_else(|| CodecError::InvalidConfig(format!("checkpoint lacks tensor {name}")))?;
                if e.shape != t.shape() {
                    return Err(CodecError::InvalidConfig(format!(
                        "tensor {name} has shape {:?}, model expects {:?}",
                        e.shape,
                        t.shape()
                    )));
                }
                t.data_mut().copy_from_slice(&e.data);
            }
        }
        codec.rvq = RvqState::from_checkpoint(codec.config.rvq_config(), &entries)?;
        Ok(codec)
    }
}

/// Result of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub report: LossReport,
    /// Codewords re-seeded by the dead-code rule during this step.
    pub reseeded: usize,
}

/// Alternating discriminator/generator optimisation with EMA codebooks.
pub struct Trainer {
    codec: Codec,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    rng: Rng,
    step: usize,
    last: Option<LossReport>,
}

impl Trainer {
    pub fn new(codec: Codec) -> Self {
        let c = &codec.config;
        let adam = AdamConfig {
            learning_rate: c.learning_rate,
            beta1: c.adam_betas[0],
            beta2: c.adam_betas[1],
            ..Default::default()
        };
        let rng = seeded(c.seed ^ fnv1a(b"trainer"));
        Self {
            opt_g: Adam::new(adam, &codec.generator_params),
            opt_d: Adam::new(adam, &codec.discriminator_params),
            codec,
            rng,
            step: 0,
            last: None,
        }
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn into_codec(self) -> Codec {
        self.codec
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One discriminator update (when adversarial terms are weighted)
    /// followed by one generator update and an EMA codebook update, on the
    /// single-channel windows `x: [B, T]`.
    pub fn step(&mut self, x: ArrayView2<f32>) -> Result<StepOutcome, CodecError> {
        self.update(x, true)
    }

    /// A generator update alone: discriminator weights and codebooks are
    /// left untouched. The report's `l_d` is 0.
    pub fn generator_step(&mut self, x: ArrayView2<f32>) -> Result<LossReport, CodecError> {
        Ok(self.update(x, false)?.report)
    }

    fn non_finite(&self) -> CodecError {
        CodecError::NonFinite {
            step: self.step,
            last: self.last,
        }
    }

    fn update(&mut self, x: ArrayView2<f32>, full: bool) -> Result<StepOutcome, CodecError> {
        let codec = &self.codec;
        let (input, _) = codec.prepare(x, false)?;
        if !codec.rvq.is_initialized() {
            let enc = codec.encode(x)?;
            self.codec.rvq.initialize_from(enc.columns().view(), &mut self.rng)?;
        }
        let codec = &self.codec;
        let adversarial = codec.config.weights.adversarial();

        let mut tape = Tape::<f32>::new();
        let gen = codec.generator_params.bind(&mut tape, true);
        let xv = tape.constant(input.clone());
        let mut quantized = None;
        let fwd = codec.forward(&mut tape, &gen, xv, |z| {
            let (b, r, f) = (z.shape()[0], z.shape()[1], z.shape()[2]);
            let q = codec.rvq.quantize(batch_to_columns(z.data(), b, r, f).view())?;
            let z_q = Tensor::new(z.shape().to_vec(), columns_to_batch(q.z_q.view(), b, f))?;
            let cumulative = cumulative_codewords(&q, b, f);
            quantized = Some(q);
            Ok((z_q, cumulative))
        });
        let fwd = match fwd {
            Err(CodecError::Quantizer(QuantizerError::NonFinite { .. })) => return Err(self.non_finite()),
            other => other?,
        };
        let quantized = quantized.expect("forward quantizes");

        // The discriminator sees the same reconstruction the generator is
        // about to be scored on, then the generator is scored by the
        // updated discriminator.
        let mut l_d = 0.0;
        if full && adversarial {
            let mut dt = Tape::<f32>::new();
            let dp = codec.discriminator_params.bind(&mut dt, true);
            let real_in = dt.constant(input);
            let fake_in = dt.constant(tape.value(fwd.x_hat).clone());
            let real = codec.discriminator.forward(&mut dt, &dp, real_in)?;
            let fake = codec.discriminator.forward(&mut dt, &dp, fake_in)?;
            let loss = discriminator_loss(&mut dt, &real.logits, &fake.logits)?;
            l_d = f64::from(dt.value(loss).item());
            if !l_d.is_finite() {
                return Err(self.non_finite());
            }
            dt.backward(loss)?;
            let grads = codec.discriminator_params.gradients(&dt, &dp);
            self.opt_d.update(&mut self.codec.discriminator_params, &grads);
        }

        let codec = &self.codec;
        let disc = adversarial.then(|| codec.discriminator_params.bind(&mut tape, false));
        let terms = codec.losses(&mut tape, xv, &fwd, disc.as_ref())?;
        let mut report = terms.report(&tape);
        report.l_d = l_d;
        if !report.is_finite() {
            return Err(self.non_finite());
        }
        tape.backward(terms.total)?;
        let grads = codec.generator_params.gradients(&tape, &gen);
        drop(tape);
        self.opt_g.update(&mut self.codec.generator_params, &grads);
        let reseeded = if full {
            self.codec.rvq.update_ema(&quantized, &mut self.rng)?
        } else {
            0
        };

        self.step += 1;
        self.last = Some(report);
        Ok(StepOutcome { report, reseeded })
    }

    /// Runs `steps` steps over shuffled mini-batches of `windows` (all of
    /// one length), calling `on_step(step_index, outcome)` after each.
    pub fn train(
        &mut self,
        windows: &[Vec<f32>],
        steps: usize,
        mut on_step: impl FnMut(usize, &StepOutcome),
    ) -> Result<Vec<LossReport>, CodecError> {
        let Some(first) = windows.first() else {
            return Err(CodecError::EmptyDataset);
        };
        let len = first.len();
        if let Some(bad) = windows.iter().find(|w| w.len() != len) {
            return Err(CodecError::Shape(format!("windows of length {len} and {} mixed", bad.len())));
        }
        let batch = self.codec.config.batch_size;
        let mut order: Vec<usize> = Vec::new();
        let mut history = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut data = Vec::with_capacity(batch * len);
            for _ in 0..batch {
                if order.is_empty() {
                    order = (0..windows.len()).collect();
                    order.shuffle(&mut self.rng);
                }
                let i = order.pop().expect("refilled above");
                data.extend_from_slice(&windows[i]);
            }
            let x = Array2::from_shape_vec((batch, len), data).expect("batch assembled row by row");
            let outcome = self.step(x.view())?;
            on_step(self.step - 1, &outcome);
            history.push(outcome.report);
        }
        Ok(history)
    }
}
