//! Reverse-mode gradients against central finite differences at `f64`.

use std::fmt;

use crate::attention::{AttentionConfig, LinearAttention};
use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::layers::{EncoderLayer, Linear, Mixer};
use crate::model::{DcMamber, ModelConfig};
use crate::ops::{Activation, Mode};
use crate::params::{Ctx, Initializer, ParamStore};
use crate::rng::RngState;
use crate::ssm::{BiMamba, MambaBlock, MambaBlockConfig};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;

/// How numeric derivatives are taken.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Differencer {
    /// One central difference with the given half-width.
    Central(f64),
    /// Richardson-extrapolated central differences at `wide` and `wide / 2`,
    /// unless they disagree with a plain central difference at `narrow` by
    /// more than the loss's rounding noise, which means a kink lies inside
    /// the wide stencil; then the narrow estimate is used. The wide stencil
    /// keeps digits for gradients many orders below the loss.
    Guarded { wide: f64, narrow: f64 },
}

/// Rounding noise of a loss evaluation, in units of `|loss| * EPSILON`.
const LOSS_NOISE_ULPS: f64 = 1e3;

impl Differencer {
    fn derivative(self, f: &mut dyn FnMut(f64) -> Result<f64>) -> Result<f64> {
        let mut central = |h: f64| -> Result<f64> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
        match self {
            Differencer::Central(h) => central(h),
            Differencer::Guarded { wide, narrow } => {
                let fine = central(narrow)?;
                let coarse = (4.0 * central(wide / 2.0)? - central(wide)?) / 3.0;
                let noise = LOSS_NOISE_ULPS * f64::EPSILON * f(0.0)?.abs().max(f64::MIN_POSITIVE) / narrow;
                Ok(if (coarse - fine).abs() <= noise { coarse } else { fine })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub case: String,
    pub group: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GroupError> {
        self.groups.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err <= self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupError> {
        self.groups.iter().filter(|g| !(g.max_rel_err <= self.tolerance))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in &self.groups {
            let mark = if g.max_rel_err <= self.tolerance { "ok" } else { "FAIL" };
            writeln!(f, "{mark:4} {}/{}: {:.3e} over {} entries", g.case, g.group, g.max_rel_err, g.checked)?;
        }
        let worst = self.worst().map_or(0.0, |g| g.max_rel_err);
        write!(
            f,
            "{} groups, worst {:.3e}, tolerance {:.1e}: {}",
            self.groups.len(),
            worst,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Relative error of each entry, with a denominator floored at a thousandth
/// of the largest numeric gradient in the group so that near-zero entries
/// are judged on the group's scale.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let denom = a.abs().max(n.abs()).max(1e-3 * scale).max(1e-12);
            let e = (a - n).abs() / denom;
            if e.is_nan() {
                f64::INFINITY
            } else {
                e
            }
        })
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of the scalar built by `loss` with central
/// differences for every entry of every parameter in `store`.
pub fn check_case(
    case: &str,
    store: &ParamStore<f64>,
    diff: Differencer,
    loss: &dyn Fn(&Ctx<'_, f64>) -> Result<Var>,
) -> Result<Vec<GroupError>> {
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, s, Mode::Eval, RngState::new(0));
        let l = loss(&ctx)?;
        Ok(tape.value(l).data()[0])
    };
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, Mode::Eval, RngState::new(0));
    let l = loss(&ctx)?;
    let grads = tape.backward(l)?;
    let mut out = Vec::new();
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.get(id).numel();
        let analytic: Vec<f64> = match grads.get(ctx.p(id)) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; n],
        };
        let mut numeric = Vec::with_capacity(n);
        for i in 0..n {
            let orig = store.get(id).data()[i];
            let d = diff.derivative(&mut |h| {
                probe.get_mut(id).data_mut()[i] = orig + h;
                eval(&probe)
            });
            probe.get_mut(id).data_mut()[i] = orig;
            numeric.push(d?);
        }
        out.push(GroupError {
            case: case.to_string(),
            group: store.name(id).to_string(),
            max_rel_err: max_relative_error(&analytic, &numeric),
            checked: n,
        });
    }
    Ok(out)
}

/// Fixed random weights for a value of `shape`.
fn target(shape: &[usize], seed: u64) -> Tensor<f64> {
    Initializer::new(seed).uniform(shape, 1.0)
}

/// `mean(out * R)` for fixed random `R`. Unlike a squared error against a
/// target, its value scales with `out`, so central differences do not lose
/// digits to cancellation when the output is small.
fn probe(ctx: &Ctx<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = ctx.tape.shape(out);
    let weighted = ctx.tape.mul_const(out, target(&shape, seed))?;
    ctx.tape.mean(weighted)
}

fn operand(store: &mut ParamStore<f64>, init: &mut Initializer, name: &str, shape: &[usize]) -> crate::params::ParamId {
    store.add(name, init.uniform(shape, 1.0))
}

type OpCase = (&'static str, ParamStore<f64>, Box<dyn Fn(&Ctx<'_, f64>) -> Result<Var>>);

/// One small case per differentiable tape operation.
fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut cases: Vec<OpCase> = Vec::new();
    let mut init = Initializer::new(seed);
    macro_rules! case {
        ($name:expr, [$(($p:ident, $shape:expr)),*], |$ctx:ident| $body:expr) => {{
            let mut store = ParamStore::new();
            $(let $p = operand(&mut store, &mut init, stringify!($p), &$shape);)*
            let f = move |$ctx: &Ctx<'_, f64>| -> Result<Var> {
                $(let $p = $ctx.p($p);)*
                let out: Var = $body?;
                probe($ctx, out, 99)
            };
            cases.push(($name, store, Box::new(f)));
        }};
    }
    case!("affine", [(x, [2, 3, 4]), (w, [4, 5]), (b, [5])], |c| c.tape.affine(x, w, Some(b)));
    case!("add", [(a, [3, 4]), (b, [3, 4])], |c| c.tape.add(a, b));
    case!("add_broadcast", [(a, [2, 3, 4]), (b, [3, 4])], |c| c.tape.add_broadcast(a, b));
    case!("sub", [(a, [3, 4]), (b, [3, 4])], |c| c.tape.sub(a, b));
    case!("mul", [(a, [3, 4]), (b, [3, 4])], |c| c.tape.mul(a, b));
    {
        let k = init.uniform::<f64>(&[3, 4], 1.0);
        case!("mul_const", [(a, [3, 4])], |c| c.tape.mul_const(a, k.clone()));
    }
    {
        let k = init.uniform::<f64>(&[3, 4], 1.0);
        case!("add_const", [(a, [3, 4])], |c| c.tape.add_const(a, &k));
    }
    case!("scale", [(a, [3, 4])], |c| c.tape.scale(a, -1.7));
    case!("relu", [(a, [4, 5])], |c| c.tape.activation(a, Activation::Relu));
    case!("silu", [(a, [4, 5])], |c| c.tape.activation(a, Activation::Silu));
    case!("softplus", [(a, [4, 5])], |c| c.tape.activation(a, Activation::Softplus));
    case!("neg_exp", [(a, [4, 5])], |c| c.tape.neg_exp(a));
    case!("softmax", [(a, [3, 6])], |c| c.tape.softmax(a));
    case!("layer_norm", [(x, [3, 6]), (g, [6]), (b, [6])], |c| c.tape.layer_norm(x, g, b, 1e-5));
    case!("permute", [(x, [2, 3, 4])], |c| c.tape.permute(x, &[2, 0, 1]));
    case!("reshape", [(x, [2, 3, 4])], |c| c.tape.reshape(x, &[6, 4]));
    case!("reverse_tokens", [(x, [2, 5, 3])], |c| c.tape.reverse_tokens(x));
    case!("concat", [(a, [2, 3, 2]), (b, [2, 3, 4])], |c| c.tape.concat(a, b));
    case!("slice_last", [(x, [2, 3, 6])], |c| c.tape.slice_last(x, 2, 3));
    case!("bmm", [(a, [2, 3, 4]), (b, [2, 4, 5])], |c| c.tape.bmm(a, b, false, false));
    case!("bmm_ta", [(a, [2, 4, 3]), (b, [2, 4, 5])], |c| c.tape.bmm(a, b, true, false));
    case!("bmm_tb", [(a, [2, 3, 4]), (b, [2, 5, 4])], |c| c.tape.bmm(a, b, false, true));
    case!("bmm_tab", [(a, [2, 4, 3]), (b, [2, 5, 4])], |c| c.tape.bmm(a, b, true, true));
    case!("seq_project", [(e, [2, 3, 5]), (x, [2, 2, 5, 4])], |c| c.tape.seq_project(e, x));
    case!("seq_project_shared", [(e, [1, 3, 5]), (x, [2, 2, 5, 4])], |c| c.tape.seq_project(e, x));
    case!("depthwise_conv", [(x, [2, 6, 3]), (w, [3, 4]), (b, [3])], |c| c.tape.depthwise_conv(x, w, b));
    case!("mean", [(x, [3, 4])], |c| c.tape.mean(x));
    {
        // negative state matrix and positive steps, as in the block
        let mut store = ParamStore::new();
        let x = operand(&mut store, &mut init, "x", &[2, 5, 3]);
        let dt = operand(&mut store, &mut init, "delta_pre", &[2, 5, 3]);
        let a = operand(&mut store, &mut init, "a_log", &[3, 4]);
        let b = operand(&mut store, &mut init, "b", &[2, 5, 4]);
        let cm = operand(&mut store, &mut init, "c", &[2, 5, 4]);
        let f = move |c: &Ctx<'_, f64>| -> Result<Var> {
            let t = c.tape;
            let delta = t.softplus(c.p(dt))?;
            let a = t.neg_exp(c.p(a))?;
            let y = t.selective_scan(c.p(x), delta, a, c.p(b), c.p(cm))?;
            probe(c, y, 98)
        };
        cases.push(("selective_scan", store, Box::new(f)));
    }
    cases
}

/// Every primitive operation, each as its own case.
pub fn check_ops(tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let mut groups = Vec::new();
    for (name, store, loss) in op_cases(seed) {
        groups.extend(check_case(name, &store, Differencer::Central(STEP), &*loss)?);
    }
    Ok(GradCheckReport { tolerance, groups })
}

/// A single affine layer under an MSE loss.
pub fn check_affine_layer(tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let lin = Linear::init(&mut store, "affine", 5, 3, true, &mut init);
    *store.get_mut(lin.bias.unwrap()) = init.uniform(&[3], 0.5);
    let x = init.uniform::<f64>(&[4, 5], 1.0);
    let y = init.uniform::<f64>(&[4, 3], 1.0);
    let loss = move |c: &Ctx<'_, f64>| {
        let out = lin.forward(c, c.tape.constant(x.clone()))?;
        c.tape.mse(out, &y)
    };
    Ok(GradCheckReport {
        tolerance,
        groups: check_case("affine_layer", &store, Differencer::Central(STEP), &loss)?,
    })
}

/// The attention encoder layer on a `(1, 4, 8)` input.
pub fn check_temporal_layer(tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let att = LinearAttention::init(&mut store, "attention", AttentionConfig::new(8, 4), &mut init)?;
    let layer = EncoderLayer::new(&mut store, "layer", Mixer::Attention(att), 8, 32, 0.0, &mut init);
    randomize_biases(&mut store, &mut init);
    let x = init.uniform::<f64>(&[1, 4, 8], 1.0);
    let loss = move |c: &Ctx<'_, f64>| {
        let out = layer.forward(c, c.tape.constant(x.clone()))?;
        probe(c, out, 97)
    };
    Ok(GradCheckReport {
        tolerance,
        groups: check_case("temporal_layer", &store, Differencer::Central(STEP), &loss)?,
    })
}

/// A selective-SSM block and its bidirectional wrapper.
pub fn check_ssm_blocks(tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let mut groups = Vec::new();
    let mut init = Initializer::new(seed);
    let cfg = MambaBlockConfig::new(4, 3);
    {
        let mut store = ParamStore::new();
        let block = MambaBlock::init(&mut store, "block", cfg, &mut init);
        randomize_biases(&mut store, &mut init);
        let x = init.uniform::<f64>(&[2, 5, 4], 1.0);
        let loss = move |c: &Ctx<'_, f64>| {
            let out = block.forward(c, c.tape.constant(x.clone()))?;
            probe(c, out, 96)
        };
        groups.extend(check_case("mamba_block", &store, Differencer::Central(STEP), &loss)?);
    }
    {
        let mut store = ParamStore::new();
        let bi = BiMamba::init(&mut store, "bimamba", cfg, false, &mut init);
        let x = init.uniform::<f64>(&[1, 4, 4], 1.0);
        let loss = move |c: &Ctx<'_, f64>| {
            let out = bi.forward(c, c.tape.constant(x.clone()))?;
            probe(c, out, 95)
        };
        groups.extend(check_case("bi_mamba", &store, Differencer::Central(STEP), &loss)?);
    }
    Ok(GradCheckReport { tolerance, groups })
}

/// Zero-initialized biases and unit LayerNorm gains sit at special points;
/// nudging them makes the check exercise the general case.
fn randomize_biases(store: &mut ParamStore<f64>, init: &mut Initializer) {
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        if name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with("conv_b") || name.ends_with("dt_bias") {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = init.uniform(&shape, 0.3);
        } else if name.ends_with("b_proj") || name.ends_with("c_proj") || name.ends_with("dt_down") {
            // at init the scan output can be as small as 1e-10 relative to
            // the loss, below what any difference step can resolve
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = init.uniform(&shape, 1.0);
        } else if name.ends_with(".gamma") {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = init.uniform::<f64>(&shape, 0.3).map(|v| v + 1.0);
        }
    }
}

/// The configuration used for the end-to-end check.
pub fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::new(8, 4, 3).with_width(8);
    cfg.e_layers = 1;
    cfg.d_state = 4;
    cfg.proj_len = 8;
    cfg.dropout = 0.0;
    cfg
}

/// Smallest distance of any ReLU input from its kink at the check point.
/// Central differences straddling a kink measure an average of two slopes.
pub const KINK_MARGIN: f64 = 1e-3;
const INPUT_DRAWS: u64 = 64;

/// The whole model under a linear probe loss. Inputs are redrawn until every
/// ReLU input clears [`KINK_MARGIN`], so the loss is smooth over the stencil.
pub fn check_model(cfg: &ModelConfig, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let mut cfg = cfg.clone();
    cfg.dropout = 0.0;
    let (model, mut store) = DcMamber::new::<f64>(cfg.clone(), seed)?;
    let mut init = Initializer::new(seed.wrapping_add(1));
    randomize_biases(&mut store, &mut init);
    let shape = [2, cfg.lookback, cfg.n_vars];
    let mut x = None;
    for draw in 0..INPUT_DRAWS {
        let candidate = Initializer::new(seed.wrapping_add(2 + draw)).uniform::<f64>(&shape, 1.0);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Eval, RngState::new(0));
        model.forward(&ctx, &candidate)?;
        if tape.relu_margin() >= KINK_MARGIN {
            x = Some(candidate);
            break;
        }
    }
    let x = x.ok_or_else(|| {
        crate::error::Error::InvalidArgument(format!("no input in {INPUT_DRAWS} draws keeps ReLU inputs {KINK_MARGIN} from zero"))
    })?;
    let loss = move |c: &Ctx<'_, f64>| {
        let out = model.forward(c, &x)?;
        probe(c, out, 93)
    };
    Ok(GradCheckReport {
        tolerance,
        groups: check_case("model", &store, Differencer::Guarded { wide: 1e-3, narrow: STEP }, &loss)?,
    })
}

/// Negative control: a backward pass scaled by `factor` on one branch.
#[doc(hidden)]
pub fn check_corrupted(tolerance: f64, factor: f64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(0);
    let a = operand(&mut store, &mut init, "clean", &[3, 4]);
    let b = operand(&mut store, &mut init, "corrupted", &[3, 4]);
    let loss = move |c: &Ctx<'_, f64>| {
        let bad = c.tape.grad_scale(c.p(b), factor)?;
        let s = c.tape.add(c.p(a), bad)?;
        probe(c, s, 94)
    };
    Ok(GradCheckReport {
        tolerance,
        groups: check_case("corrupted", &store, Differencer::Central(STEP), &loss)?,
    })
}
