//! Encoder, decoder and discriminator layouts over a [`ParamStore`].
//!
//! A layout only records parameter ids and geometry; the weights live in
//! the store, so the same layout runs in `f32` for training and in `f64`
//! for gradient checks.

use rand::Rng;

use super::{CodecConfig, DiscriminatorConfig};
use crate::tensor::{BoundParams, ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var};

/// Kernel and padding for a down/up-sampling layer of the given stride,
/// chosen so that the strided conv divides the length exactly and the
/// transposed conv multiplies it exactly.
pub fn resample_kernel(stride: usize) -> (usize, usize) {
    (stride + 2 * (stride / 2), stride / 2)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    padding: usize,
    transposed: bool,
}

pub(crate) struct LayerSpec<'a> {
    pub name: &'a str,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl Conv {
    /// Uniform `±1/sqrt(fan_in)` initialisation for weights and bias.
    pub(crate) fn register(store: &mut ParamStore<f32>, spec: LayerSpec, rng: &mut impl Rng) -> Self {
        let LayerSpec {
            name,
            cin,
            cout,
            kernel,
            stride,
            padding,
            transposed,
        } = spec;
        let fan_in = if transposed { cout * kernel } else { cin * kernel };
        let bound = 1.0 / (fan_in as f32).sqrt();
        let shape = if transposed {
            vec![cin, cout, kernel]
        } else {
            vec![cout, cin, kernel]
        };
        let n: usize = shape.iter().product();
        let w: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let b: Vec<f32> = (0..cout).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            w: store.insert(format!("{name}.w"), Tensor::new(shape, w).expect("sized above")),
            b: store.insert(format!("{name}.b"), Tensor::new(vec![cout], b).expect("sized above")),
            stride,
            padding,
            transposed,
        }
    }

    pub(crate) fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &BoundParams, x: Var) -> Result<Var, TensorError> {
        let (w, b) = (p.var(self.w), p.var(self.b));
        if self.transposed {
            tape.conv_transpose1d(x, w, b, self.stride, self.padding)
        } else {
            tape.conv1d(x, w, b, self.stride, self.padding)
        }
    }
}

/// `x + conv2(elu(conv1(elu(x))))` with two kernel-3 convolutions.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ResUnit {
    c1: Conv,
    c2: Conv,
}

impl ResUnit {
    fn register(store: &mut ParamStore<f32>, name: &str, ch: usize, rng: &mut impl Rng) -> Self {
        let conv = |store: &mut ParamStore<f32>, suffix: &str, rng: &mut _| {
            Conv::register(
                store,
                LayerSpec {
                    name: &format!("{name}.{suffix}"),
                    cin: ch,
                    cout: ch,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    transposed: false,
                },
                rng,
            )
        };
        let c1 = conv(store, "conv1", rng);
        let c2 = conv(store, "conv2", rng);
        Self { c1, c2 }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &BoundParams, x: Var) -> Result<Var, TensorError> {
        let h = tape.elu(x);
        let h = self.c1.forward(tape, p, h)?;
        let h = tape.elu(h);
        let h = self.c2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

fn plain(name: &str, cin: usize, cout: usize, kernel: usize) -> LayerSpec<'_> {
    LayerSpec {
        name,
        cin,
        cout,
        kernel,
        stride: 1,
        padding: kernel / 2,
        transposed: false,
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Generator {
    enc_in: Conv,
    enc_blocks: Vec<(Conv, ResUnit)>,
    enc_out: Conv,
    dec_in: Conv,
    dec_blocks: Vec<(Conv, ResUnit)>,
    dec_out: Conv,
}

impl Generator {
    /// Registers all generator parameters in `store` (names `enc.*`, `dec.*`).
    pub(crate) fn build(cfg: &CodecConfig, store: &mut ParamStore<f32>, rng: &mut impl Rng) -> Self {
        let base = cfg.base_channels;
        let widths: Vec<usize> = (0..=cfg.encoder_strides.len()).map(|i| base << i).collect();
        let top = *widths.last().expect("at least one width");
        let enc_in = Conv::register(store, plain("enc.in", 1, base, 7), rng);
        let mut enc_blocks = Vec::new();
        for (i, &s) in cfg.encoder_strides.iter().enumerate() {
            let (kernel, padding) = resample_kernel(s);
            let down = Conv::register(
                store,
                LayerSpec {
                    name: &format!("enc.block{i}.down"),
                    cin: widths[i],
                    cout: widths[i + 1],
                    kernel,
                    stride: s,
                    padding,
                    transposed: false,
                },
                rng,
            );
            let res = ResUnit::register(store, &format!("enc.block{i}.res"), widths[i + 1], rng);
            enc_blocks.push((down, res));
        }
        let enc_out = Conv::register(store, plain("enc.out", top, cfg.embed_dim, 3), rng);

        let dec_in = Conv::register(store, plain("dec.in", cfg.embed_dim, top, 3), rng);
        let mut dec_blocks = Vec::new();
        for (j, i) in (0..cfg.encoder_strides.len()).rev().enumerate() {
            let s = cfg.encoder_strides[i];
            let (kernel, padding) = resample_kernel(s);
            let up = Conv::register(
                store,
                LayerSpec {
                    name: &format!("dec.block{j}.up"),
                    cin: widths[i + 1],
                    cout: widths[i],
                    kernel,
                    stride: s,
                    padding,
                    transposed: true,
                },
                rng,
            );
            let res = ResUnit::register(store, &format!("dec.block{j}.res"), widths[i], rng);
            dec_blocks.push((up, res));
        }
        let dec_out = Conv::register(store, plain("dec.out", base, 1, 7), rng);
        Self {
            enc_in,
            enc_blocks,
            enc_out,
            dec_in,
            dec_blocks,
            dec_out,
        }
    }

    /// `[B, 1, T] -> [B, R, T / prod(strides)]`.
    pub(crate) fn encode<T: Real>(&self, tape: &mut Tape<T>, p: &BoundParams, x: Var) -> Result<Var, TensorError> {
        let mut h = self.enc_in.forward(tape, p, x)?;
        for (down, res) in &self.enc_blocks {
            h = down.forward(tape, p, h)?;
            h = tape.elu(h);
            h = res.forward(tape, p, h)?;
        }
        let h = tape.elu(h);
        self.enc_out.forward(tape, p, h)
    }

    /// `[B, R, T_E] -> [B, 1, T_E * prod(strides)]`.
    pub(crate) fn decode<T: Real>(&self, tape: &mut Tape<T>, p: &BoundParams, z: Var) -> Result<Var, TensorError> {
        let mut h = self.dec_in.forward(tape, p, z)?;
        for (up, res) in &self.dec_blocks {
            h = tape.elu(h);
            h = up.forward(tape, p, h)?;
            h = res.forward(tape, p, h)?;
        }
        let h = tape.elu(h);
        self.dec_out.forward(tape, p, h)
    }
}

#[derive(Clone, Debug)]
struct SubDiscriminator {
    pool: usize,
    layers: Vec<Conv>,
}

/// Logits `[B, 1]` and feature maps of every sub-discriminator.
pub(crate) struct DiscOutput {
    pub logits: Vec<Var>,
    pub features: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub(crate) struct Discriminator {
    subs: Vec<SubDiscriminator>,
}

impl Discriminator {
    pub(crate) fn build(cfg: &DiscriminatorConfig, store: &mut ParamStore<f32>, rng: &mut impl Rng) -> Self {
        let mut widths = vec![1];
        widths.extend(&cfg.channels);
        widths.push(1);
        let subs = cfg
            .pool_factors
            .iter()
            .enumerate()
            .map(|(k, &pool)| {
                let layers = cfg
                    .strides
                    .iter()
                    .enumerate()
                    .map(|(l, &s)| {
                        Conv::register(
                            store,
                            LayerSpec {
                                name: &format!("disc{k}.layer{l}"),
                                cin: widths[l],
                                cout: widths[l + 1],
                                kernel: 2 * s + 1,
                                stride: s,
                                padding: s,
                                transposed: false,
                            },
                            rng,
                        )
                    })
                    .collect();
                SubDiscriminator { pool, layers }
            })
            .collect();
        Self { subs }
    }

    pub(crate) fn num_discriminators(&self) -> usize {
        self.subs.len()
    }

    /// Runs every sub-discriminator on `x: [B, 1, T]`. Feature maps are the
    /// ELU outputs of the hidden layers plus the final (pre-pooling) map.
    pub(crate) fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &BoundParams, x: Var) -> Result<DiscOutput, TensorError> {
        let mut logits = Vec::with_capacity(self.subs.len());
        let mut features = Vec::with_capacity(self.subs.len());
        for sub in &self.subs {
            let mut h = if sub.pool > 1 { tape.avg_pool1d(x, sub.pool)? } else { x };
            let mut maps = Vec::with_capacity(sub.layers.len());
            for (l, conv) in sub.layers.iter().enumerate() {
                h = conv.forward(tape, p, h)?;
                if l + 1 < sub.layers.len() {
                    h = tape.elu(h);
                }
                maps.push(h);
            }
            logits.push(tape.mean_last_axis(h)?);
            features.push(maps);
        }
        Ok(DiscOutput { logits, features })
    }
}
