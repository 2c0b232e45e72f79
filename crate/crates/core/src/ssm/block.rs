//! The selective-SSM (Mamba) block and its bidirectional wrapper.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::params::{Ctx, Initializer, ParamId, ParamStore};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

/// Shape hyperparameters of one Mamba block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaBlockConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub d_conv: usize,
}

impl MambaBlockConfig {
    pub fn new(d_model: usize, d_state: usize) -> Self {
        MambaBlockConfig {
            d_model,
            d_state,
            expand: 2,
            d_conv: 4,
        }
    }

    pub fn inner(&self) -> usize {
        self.expand * self.d_model
    }

    /// Width of the low-rank step-size bottleneck.
    pub fn dt_rank(&self) -> usize {
        self.d_model.div_ceil(16)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_state == 0 || self.expand == 0 || self.d_conv == 0 {
            return Err(Error::InvalidArgument(format!(
                "mamba block dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Parameter handles of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct MambaBlockParams {
    /// `[D, 2 ED]`, x branch first then the gate branch z.
    pub in_proj: ParamId,
    /// Depthwise kernels `[ED, d_conv]` and bias `[ED]`.
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    /// `A = -exp(a_log)`, `[ED, N]`.
    pub a_log: ParamId,
    pub b_proj: ParamId,
    pub c_proj: ParamId,
    pub dt_down: ParamId,
    pub dt_up: ParamId,
    pub dt_bias: ParamId,
    pub out_proj: ParamId,
}

/// Inverse of softplus, `ln(exp(y) - 1)`.
fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Step sizes drawn at init lie in this range.
pub const DT_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

impl MambaBlockParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &MambaBlockConfig,
        init: &mut Initializer,
    ) -> Self {
        let (d, ed, n, r, k) = (cfg.d_model, cfg.inner(), cfg.d_state, cfg.dt_rank(), cfg.d_conv);
        let name = |s: &str| format!("{prefix}.{s}");
        let in_proj = store.add(name("in_proj"), init.linear(d, 2 * ed));
        let conv_w = store.add(name("conv_w"), init.uniform(&[ed, k], 1.0 / (k as f64).sqrt()));
        let conv_b = store.add(name("conv_b"), Tensor::zeros(&[ed]));
        let a_log = {
            let data: Vec<f64> = (0..ed).flat_map(|_| (1..=n).map(|v| (v as f64).ln())).collect();
            store.add(name("a_log"), Tensor::from_f64(&[ed, n], &data).unwrap())
        };
        let b_proj = store.add(name("b_proj"), init.linear(ed, n));
        let c_proj = store.add(name("c_proj"), init.linear(ed, n));
        let dt_down = store.add(name("dt_down"), init.linear(ed, r));
        let dt_up = store.add(name("dt_up"), init.uniform(&[r, ed], 1.0 / (r as f64).sqrt()));
        let (lo, hi) = (DT_INIT_RANGE.0.ln(), DT_INIT_RANGE.1.ln());
        let bias: Vec<f64> = (0..ed)
            .map(|_| inv_softplus((lo + (hi - lo) * init.sample()).exp()))
            .collect();
        let dt_bias = store.add(name("dt_bias"), Tensor::from_f64(&[ed], &bias).unwrap());
        let out_proj = store.add(name("out_proj"), init.linear(ed, d));
        MambaBlockParams {
            in_proj,
            conv_w,
            conv_b,
            a_log,
            b_proj,
            c_proj,
            dt_down,
            dt_up,
            dt_bias,
            out_proj,
        }
    }

    pub fn ids(&self) -> [ParamId; 10] {
        [
            self.in_proj,
            self.conv_w,
            self.conv_b,
            self.a_log,
            self.b_proj,
            self.c_proj,
            self.dt_down,
            self.dt_up,
            self.dt_bias,
            self.out_proj,
        ]
    }

    fn check<T: Scalar>(&self, store: &ParamStore<T>, cfg: &MambaBlockConfig) -> Result<()> {
        let (d, ed, n, r, k) = (cfg.d_model, cfg.inner(), cfg.d_state, cfg.dt_rank(), cfg.d_conv);
        let expected: [(ParamId, Vec<usize>); 10] = [
            (self.in_proj, vec![d, 2 * ed]),
            (self.conv_w, vec![ed, k]),
            (self.conv_b, vec![ed]),
            (self.a_log, vec![ed, n]),
            (self.b_proj, vec![ed, n]),
            (self.c_proj, vec![ed, n]),
            (self.dt_down, vec![ed, r]),
            (self.dt_up, vec![r, ed]),
            (self.dt_bias, vec![ed]),
            (self.out_proj, vec![ed, d]),
        ];
        for (id, shape) in expected {
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::shape(
                    "mamba_block",
                    format!("{} is {:?}, config needs {shape:?}", store.name(id), store.get(id).shape()),
                ));
            }
        }
        Ok(())
    }
}

/// One selective-SSM block: `[B, S, D] -> [B, S, D]` over `S` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct MambaBlock {
    pub cfg: MambaBlockConfig,
    pub params: MambaBlockParams,
}

impl MambaBlock {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: MambaBlockConfig, init: &mut Initializer) -> Self {
        let params = MambaBlockParams::init(store, prefix, &cfg, init);
        MambaBlock { cfg, params }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let t = ctx.tape;
        let shape = t.shape(x);
        if shape.len() != 3 || shape[2] != self.cfg.d_model {
            return Err(Error::shape(
                "mamba_block",
                format!("input {shape:?}, d_model {}", self.cfg.d_model),
            ));
        }
        let p = &self.params;
        let ed = self.cfg.inner();
        // input projection into the scanned branch and the gate
        let xz = t.affine(x, ctx.p(p.in_proj), None)?;
        let xb = t.slice_last(xz, 0, ed)?;
        let z = t.slice_last(xz, ed, ed)?;
        // causal depthwise conv + SiLU
        let xc = t.depthwise_conv(xb, ctx.p(p.conv_w), ctx.p(p.conv_b))?;
        let xs = t.silu(xc)?;
        // input-dependent B, C and step size
        let b = t.affine(xs, ctx.p(p.b_proj), None)?;
        let c = t.affine(xs, ctx.p(p.c_proj), None)?;
        let dt_low = t.affine(xs, ctx.p(p.dt_down), None)?;
        let dt_pre = t.affine(dt_low, ctx.p(p.dt_up), Some(ctx.p(p.dt_bias)))?;
        let delta = t.softplus(dt_pre)?;
        let a = t.neg_exp(ctx.p(p.a_log))?;
        // discretize + scan
        let y = t.selective_scan(xs, delta, a, b, c)?;
        // gate and project back
        let gate = t.silu(z)?;
        let y = t.mul(y, gate)?;
        t.affine(y, ctx.p(p.out_proj), None)
    }

    /// Tensor-in, tensor-out evaluation on a fresh tape.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>, mode: Mode, rng: RngState) -> Result<Tensor<T>> {
        self.params.check(store, &self.cfg)?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, mode, rng);
        let xv = tape.constant(x.clone());
        let y = self.forward(&ctx, xv)?;
        Ok((*tape.value(y)).clone())
    }
}

/// Two blocks scanning the token axis in opposite directions, outputs summed.
#[derive(Clone, Debug, PartialEq)]
pub struct BiMamba {
    pub forward: MambaBlock,
    /// `None` when both directions share the forward block's parameters.
    pub backward: Option<MambaBlock>,
}

impl BiMamba {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: MambaBlockConfig, tied: bool, init: &mut Initializer) -> Self {
        let forward = MambaBlock::init(store, &format!("{prefix}.fwd"), cfg, init);
        let backward = (!tied).then(|| MambaBlock::init(store, &format!("{prefix}.bwd"), cfg, init));
        BiMamba { forward, backward }
    }

    pub fn backward_block(&self) -> &MambaBlock {
        self.backward.as_ref().unwrap_or(&self.forward)
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let t = ctx.tape;
        let fwd = {
            let _s = t.scope("forward");
            self.forward.forward(ctx, x)?
        };
        let bwd = {
            let _s = t.scope("backward");
            let rev = t.reverse_tokens(x)?;
            let y = self.backward_block().forward(ctx, rev)?;
            t.reverse_tokens(y)?
        };
        t.add(fwd, bwd)
    }

    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>, mode: Mode, rng: RngState) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, mode, rng);
        let xv = tape.constant(x.clone());
        let y = self.forward(&ctx, xv)?;
        Ok((*tape.value(y)).clone())
    }
}
