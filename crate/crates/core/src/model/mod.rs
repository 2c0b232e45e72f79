//! The dual-channel forecaster: embeddings, stacked encoders on two
//! channels, temporal-to-variable alignment, fusion and the horizon head.

mod checkpoint;
mod config;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{ModelConfig, NormMode, Tokenization, Variant};

use crate::attention::{AttentionConfig, LinearAttention};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{EncoderLayer, LayerNorm, Linear, Mixer};
use crate::ops::{positional_encoding, Mode};
use crate::params::{Ctx, Initializer, ParamStore};
use crate::rng::RngState;
use crate::ssm::{BiMamba, MambaBlockConfig};
use crate::tensor::{Scalar, Tensor};

/// Two-layer token embedding `ReLU(x W1 + b1) W2 + b2`.
///
/// Mixing embeddings see one token per time step (width `V`, with the
/// positional table added first); independent embeddings see one token per
/// variable (width `L`).
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub tokenization: Tokenization,
    pub first: Linear,
    pub second: Linear,
}

impl Embedding {
    fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        tokenization: Tokenization,
        cfg: &ModelConfig,
        init: &mut Initializer,
    ) -> Self {
        let width = match tokenization {
            Tokenization::Mixing => cfg.n_vars,
            Tokenization::Independent => cfg.lookback,
        };
        Embedding {
            tokenization,
            first: Linear::init(store, &format!("{name}.first"), width, cfg.d_model, true, init),
            second: Linear::init(store, &format!("{name}.second"), cfg.d_model, cfg.d_model, true, init),
        }
    }

    /// `x` is the normalized input `[B, L, V]`.
    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let t = ctx.tape;
        let tokens = match self.tokenization {
            Tokenization::Mixing => {
                let shape = t.shape(x);
                let pe = positional_table::<T>(shape[1], shape[2])?;
                let pe = t.constant(pe);
                t.add_broadcast(x, pe)?
            }
            Tokenization::Independent => t.transpose12(x)?,
        };
        let h = self.first.forward(ctx, tokens)?;
        let h = t.relu(h)?;
        self.second.forward(ctx, h)
    }
}

/// Sinusoidal table `[len, width]`. Odd widths take the leading columns of
/// the next even-width table.
pub fn positional_table<T: Scalar>(len: usize, width: usize) -> Result<Tensor<T>> {
    let even = width + width % 2;
    let full = positional_encoding::<T>(len, even)?;
    if even == width {
        return Ok(full);
    }
    let data = full
        .data()
        .chunks_exact(even)
        .flat_map(|row| row[..width].iter().copied())
        .collect();
    Tensor::from_vec(&[len, width], data)
}

/// One encoder channel: its embedding, its stack of layers and, for
/// mixing tokens, the map from `L` time-step tokens to `V` variable slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub embedding: Embedding,
    pub layers: Vec<EncoderLayer>,
    pub align: Option<Linear>,
}

/// Per-channel outputs of every encoder layer plus the `[B, V, D]` map
/// handed to fusion.
pub struct ChannelTrace {
    pub layers: Vec<Var>,
    pub aligned: Var,
}

impl Channel {
    pub fn tokenization(&self) -> Tokenization {
        self.embedding.tokenization
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<ChannelTrace> {
        let t = ctx.tape;
        let mut h = {
            let _s = t.scope("embedding");
            self.embedding.forward(ctx, x)?
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let _s = t.scope(format!("layer{i}"));
            h = layer.forward(ctx, h)?;
            layers.push(h);
        }
        let aligned = match &self.align {
            Some(align) => {
                let _s = t.scope("align");
                align_tokens(ctx, align, h)?
            }
            None => h,
        };
        Ok(ChannelTrace { layers, aligned })
    }
}

/// `[B, L, D] -> [B, V, D]` by an affine map along the token axis.
pub fn align_tokens<T: Scalar>(ctx: &Ctx<'_, T>, align: &Linear, x: Var) -> Result<Var> {
    let t = ctx.tape;
    let xt = t.transpose12(x)?;
    let y = align.forward(ctx, xt)?;
    t.transpose12(y)
}

/// Concatenate `[temporal, variable]`, MLP `2D -> D -> D` with ReLU, LayerNorm.
#[derive(Clone, Debug, PartialEq)]
pub struct Fusion {
    pub first: Linear,
    pub second: Linear,
    pub norm: LayerNorm,
}

impl Fusion {
    fn init<T: Scalar>(store: &mut ParamStore<T>, d: usize, init: &mut Initializer) -> Self {
        Fusion {
            first: Linear::init(store, "fusion.first", 2 * d, d, true, init),
            second: Linear::init(store, "fusion.second", d, d, true, init),
            norm: LayerNorm::init(store, "fusion.norm", d),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, temporal: Var, variable: Var) -> Result<Var> {
        let t = ctx.tape;
        let x = t.concat(temporal, variable)?;
        let h = self.first.forward(ctx, x)?;
        let h = t.relu(h)?;
        let h = self.second.forward(ctx, h)?;
        self.norm.forward(ctx, h)
    }
}

/// The model structure; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct DcMamber {
    pub cfg: ModelConfig,
    /// Attention channel then Bi-Mamba channel; `None` when ablated.
    pub channels: [Option<Channel>; 2],
    pub fusion: Fusion,
    pub projector: Linear,
}

/// Intermediate values of one forward pass.
pub struct ForwardTrace {
    pub channels: [Option<ChannelTrace>; 2],
    pub fused: Var,
    /// `[B, W, V]` on the scale of the input.
    pub output: Var,
}

impl DcMamber {
    /// Builds the structure and registers freshly initialized parameters.
    pub fn new<T: Scalar>(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let model = Self::build(cfg, &mut store, &mut init)?;
        Ok((model, store))
    }

    fn build<T: Scalar>(cfg: ModelConfig, store: &mut ParamStore<T>, init: &mut Initializer) -> Result<Self> {
        let d = cfg.d_model;
        let mut channels = [None, None];
        for (slot, tok) in cfg.variant.channels().into_iter().enumerate() {
            let Some(tok) = tok else { continue };
            let name = if slot == 0 { "attention" } else { "mamba" };
            let embedding = Embedding::init(store, &format!("{name}.embedding"), tok, &cfg, init);
            let tokens = match tok {
                Tokenization::Mixing => cfg.lookback,
                Tokenization::Independent => cfg.n_vars,
            };
            let mut layers = Vec::with_capacity(cfg.e_layers);
            for i in 0..cfg.e_layers {
                let lname = format!("{name}.layer{i}");
                let mixer = if slot == 0 {
                    let acfg = AttentionConfig {
                        d_model: d,
                        heads: cfg.heads,
                        seq_len: tokens,
                        proj_len: cfg.proj_len.min(tokens),
                        share_heads: cfg.share_heads,
                    };
                    Mixer::Attention(LinearAttention::init(store, &format!("{lname}.attention"), acfg, init)?)
                } else {
                    let mcfg = MambaBlockConfig {
                        d_model: d,
                        d_state: cfg.d_state,
                        expand: cfg.expand,
                        d_conv: cfg.d_conv,
                    };
                    Mixer::BiMamba(BiMamba::init(store, &format!("{lname}.bimamba"), mcfg, cfg.tie_directions, init))
                };
                layers.push(EncoderLayer::new(store, &lname, mixer, d, cfg.d_ff, cfg.dropout, init));
            }
            let align = (tok == Tokenization::Mixing)
                .then(|| Linear::init(store, &format!("{name}.align"), cfg.lookback, cfg.n_vars, true, init));
            channels[slot] = Some(Channel {
                embedding,
                layers,
                align,
            });
        }
        let fusion = Fusion::init(store, d, init);
        let projector = Linear::init(store, "projector", d, cfg.horizon, true, init);
        Ok(DcMamber {
            cfg,
            channels,
            fusion,
            projector,
        })
    }

    /// Rebuilds the structure for `cfg` and checks `store` against it by
    /// name and shape.
    pub fn from_store<T: Scalar>(cfg: ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        if cfg.param_count() != store.numel() as u128 {
            return Err(Error::Checkpoint(format!(
                "config implies {} parameters, found {}",
                cfg.param_count(),
                store.numel()
            )));
        }
        let mut expected = ParamStore::<T>::new();
        let model = Self::build(cfg, &mut expected, &mut Initializer::new(0))?;
        if expected.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "config implies {} parameter tensors, found {}",
                expected.len(),
                store.len()
            )));
        }
        for ((en, et), (gn, gt)) in expected.iter().zip(store.iter()) {
            if en != gn {
                return Err(Error::Checkpoint(format!("expected tensor {en}, found {gn}")));
            }
            if et.shape() != gt.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {en} has shape {:?}, config implies {:?}",
                    gt.shape(),
                    et.shape()
                )));
            }
        }
        Ok(model)
    }

    fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.cfg.lookback || s[2] != self.cfg.n_vars {
            return Err(Error::shape(
                "forward",
                format!(
                    "input {s:?}, model expects [batch, {}, {}]",
                    self.cfg.lookback, self.cfg.n_vars
                ),
            ));
        }
        Ok(())
    }

    /// Records the forward pass of `x: [B, L, V]` on `ctx`'s tape.
    pub fn trace<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let t = ctx.tape;
        let (b, v, d) = (x.shape()[0], self.cfg.n_vars, self.cfg.d_model);
        let instance = match self.cfg.norm {
            NormMode::Instance => Some(instance_stats(x)),
            NormMode::Dataset => None,
        };
        let input = match &instance {
            Some(stats) => t.constant(stats.normalize(x)),
            None => t.constant(x.clone()),
        };
        let mut traces = [None, None];
        let mut blocks = Vec::with_capacity(2);
        for (slot, ch) in self.channels.iter().enumerate() {
            match ch {
                Some(ch) => {
                    let _s = t.scope(if slot == 0 { "attention" } else { "mamba" });
                    let tr = ch.forward(ctx, input)?;
                    blocks.push(tr.aligned);
                    traces[slot] = Some(tr);
                }
                None => blocks.push(t.constant(Tensor::zeros(&[b, v, d]))),
            }
        }
        let fused = {
            let _s = t.scope("fusion");
            self.fusion.forward(ctx, blocks[0], blocks[1])?
        };
        let out = {
            let _s = t.scope("projector");
            let y = self.projector.forward(ctx, fused)?;
            t.transpose12(y)?
        };
        let output = match &instance {
            Some(stats) => stats.denormalize(t, out, self.cfg.horizon)?,
            None => out,
        };
        Ok(ForwardTrace {
            channels: traces,
            fused,
            output,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Var> {
        Ok(self.trace(ctx, x)?.output)
    }

    /// Forecast `[B, W, V]` for `x: [B, L, V]` without keeping a graph.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, Mode::Eval, RngState::new(0));
        let y = self.forward(&ctx, x)?;
        Ok((*tape.value(y)).clone())
    }
}

/// Lookback mean and std per (sample, variable).
struct InstanceStats<T: Scalar> {
    mean: Vec<T>,
    std: Vec<T>,
    vars: usize,
}

const INSTANCE_EPS: f64 = 1e-5;

fn instance_stats<T: Scalar>(x: &Tensor<T>) -> InstanceStats<T> {
    let (b, l, v) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut mean = vec![T::zero(); b * v];
    let mut std = vec![T::zero(); b * v];
    for bi in 0..b {
        for j in 0..v {
            let col = (0..l).map(|t| x.data()[(bi * l + t) * v + j].as_f64());
            let m = col.clone().sum::<f64>() / l as f64;
            let var = col.map(|c| (c - m) * (c - m)).sum::<f64>() / l as f64;
            mean[bi * v + j] = T::of(m);
            std[bi * v + j] = T::of((var + INSTANCE_EPS).sqrt());
        }
    }
    InstanceStats { mean, std, vars: v }
}

impl<T: Scalar> InstanceStats<T> {
    fn normalize(&self, x: &Tensor<T>) -> Tensor<T> {
        let (l, v) = (x.shape()[1], self.vars);
        let mut out = x.clone();
        for (i, val) in out.data_mut().iter_mut().enumerate() {
            let k = (i / (l * v)) * v + i % v;
            *val = (*val - self.mean[k]) / self.std[k];
        }
        out
    }

    fn broadcast(&self, src: &[T], w: usize) -> Tensor<T> {
        let b = src.len() / self.vars;
        let mut data = Vec::with_capacity(b * w * self.vars);
        for bi in 0..b {
            for _ in 0..w {
                data.extend_from_slice(&src[bi * self.vars..][..self.vars]);
            }
        }
        Tensor::from_vec(&[b, w, self.vars], data).expect("broadcast shape")
    }

    fn denormalize(&self, tape: &Tape<T>, y: Var, w: usize) -> Result<Var> {
        let scaled = tape.mul_const(y, self.broadcast(&self.std, w))?;
        tape.add_const(scaled, &self.broadcast(&self.mean, w))
    }
}

#[cfg(test)]
mod tests;
