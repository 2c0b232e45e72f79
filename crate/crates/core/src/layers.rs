//! Small parameterized layers shared by both encoder channels.

use crate::attention::LinearAttention;
use crate::autograd::Var;
use crate::error::Result;
use crate::params::{Ctx, Initializer, ParamId, ParamStore};
use crate::ssm::BiMamba;
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Position-wise affine map over the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: &mut Initializer,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.linear(fan_in, fan_out));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Linear { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        ctx.tape.affine(x, ctx.p(self.weight), self.bias.map(|b| ctx.p(b)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        ctx.tape
            .layer_norm(x, ctx.p(self.gamma), ctx.p(self.beta), T::of(LAYER_NORM_EPS))
    }
}

/// Two kernel-1 convolutions over the token axis, i.e. a per-token MLP:
/// `D -> d_ff -> dropout -> ReLU -> D -> dropout`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpBlock {
    pub up: Linear,
    pub down: Linear,
    pub dropout: f64,
}

impl MlpBlock {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        d_ff: usize,
        dropout: f64,
        init: &mut Initializer,
    ) -> Self {
        MlpBlock {
            up: Linear::init(store, &format!("{name}.up"), d_model, d_ff, true, init),
            down: Linear::init(store, &format!("{name}.down"), d_ff, d_model, true, init),
            dropout,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.up.forward(ctx, x)?;
        let h = ctx.dropout(h, self.dropout)?;
        let h = ctx.tape.relu(h)?;
        let h = self.down.forward(ctx, h)?;
        ctx.dropout(h, self.dropout)
    }
}

/// The token mixer at the heart of an encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Mixer {
    Attention(LinearAttention),
    BiMamba(BiMamba),
}

/// `X0 = X + Dropout(mix(X))`, `X1 = LN(X0)`, `out = LN(X1 + mlp(X1))`.
///
/// With the attention mixer this is the temporal encoder layer, with
/// Bi-Mamba the variable encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub mixer: Mixer,
    pub norm1: LayerNorm,
    pub mlp: MlpBlock,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        mixer: Mixer,
        d_model: usize,
        d_ff: usize,
        dropout: f64,
        init: &mut Initializer,
    ) -> Self {
        EncoderLayer {
            mixer,
            norm1: LayerNorm::init(store, &format!("{name}.norm1"), d_model),
            mlp: MlpBlock::init(store, &format!("{name}.mlp"), d_model, d_ff, dropout, init),
            norm2: LayerNorm::init(store, &format!("{name}.norm2"), d_model),
            dropout,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let t = ctx.tape;
        let mixed = {
            let _s = t.scope("mixer");
            match &self.mixer {
                Mixer::Attention(a) => a.forward(ctx, x)?,
                Mixer::BiMamba(m) => m.forward(ctx, x)?,
            }
        };
        let mixed = ctx.dropout(mixed, self.dropout)?;
        let x0 = t.add(x, mixed)?;
        let x1 = self.norm1.forward(ctx, x0)?;
        let m = {
            let _s = t.scope("mlp");
            self.mlp.forward(ctx, x1)?
        };
        let x2 = t.add(x1, m)?;
        self.norm2.forward(ctx, x2)
    }
}
