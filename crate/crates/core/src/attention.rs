//! Low-rank (Linformer) self-attention over a token sequence.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::ops::Mode;
use crate::params::{run_on_tape, Ctx, Initializer, ParamId, ParamStore};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

/// Default number of projected key/value slots.
pub const DEFAULT_PROJECTED_LEN: usize = 64;

/// Heads used when the caller does not choose: 8, or 1 for narrow models.
pub fn default_heads(d_model: usize) -> usize {
    if d_model >= 8 && d_model.is_multiple_of(8) {
        8
    } else {
        1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Number of tokens the projections were built for.
    pub seq_len: usize,
    /// Projected length, `<= seq_len`.
    pub proj_len: usize,
    /// One projection pair for all heads instead of one per head.
    pub share_heads: bool,
}

impl AttentionConfig {
    pub fn new(d_model: usize, seq_len: usize) -> Self {
        AttentionConfig {
            d_model,
            heads: default_heads(d_model),
            seq_len,
            proj_len: seq_len.min(DEFAULT_PROJECTED_LEN),
            share_heads: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.seq_len == 0 || self.proj_len == 0 {
            return Err(Error::InvalidArgument(format!("attention sizes must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.proj_len > self.seq_len {
            return Err(Error::InvalidArgument(format!(
                "projected length {} exceeds sequence length {}",
                self.proj_len, self.seq_len
            )));
        }
        Ok(())
    }

    fn projection_heads(&self) -> usize {
        if self.share_heads {
            1
        } else {
            self.heads
        }
    }
}

/// Query/key/value/output maps plus the sequence compressions `E` (keys)
/// and `F` (values), each stored as `[heads or 1, k, seq_len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearAttention {
    pub cfg: AttentionConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub key_proj: ParamId,
    pub value_proj: ParamId,
}

impl LinearAttention {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: AttentionConfig,
        init: &mut Initializer,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let pshape = [cfg.projection_heads(), cfg.proj_len, cfg.seq_len];
        let bound = 1.0 / (cfg.seq_len as f64).sqrt();
        Ok(LinearAttention {
            cfg,
            query: Linear::init(store, &format!("{name}.query"), d, d, true, init),
            key: Linear::init(store, &format!("{name}.key"), d, d, true, init),
            value: Linear::init(store, &format!("{name}.value"), d, d, true, init),
            output: Linear::init(store, &format!("{name}.output"), d, d, true, init),
            key_proj: store.add(format!("{name}.key_proj"), init.uniform(&pshape, bound)),
            value_proj: store.add(format!("{name}.value_proj"), init.uniform(&pshape, bound)),
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_probs(ctx, x)?.0)
    }

    /// Output `[B, S, D]` and attention probabilities `[B * heads, S, k]`.
    pub fn forward_with_probs<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let t = ctx.tape;
        let shape = t.shape(x);
        let cfg = &self.cfg;
        if shape.len() != 3 || shape[1] != cfg.seq_len || shape[2] != cfg.d_model {
            return Err(Error::shape(
                "linear_attention",
                format!(
                    "input {shape:?}, projections built for {} tokens of width {}",
                    cfg.seq_len, cfg.d_model
                ),
            ));
        }
        let (b, s, h, dh, k) = (shape[0], cfg.seq_len, cfg.heads, cfg.head_dim(), cfg.proj_len);
        let split = |v: Var| -> Result<Var> {
            let v = t.reshape(v, &[b, s, h, dh])?;
            t.permute(v, &[0, 2, 1, 3])
        };
        let q = split(self.query.forward(ctx, x)?)?;
        let kk = split(self.key.forward(ctx, x)?)?;
        let vv = split(self.value.forward(ctx, x)?)?;
        let kp = t.seq_project(ctx.p(self.key_proj), kk)?;
        let vp = t.seq_project(ctx.p(self.value_proj), vv)?;
        let q = t.reshape(q, &[b * h, s, dh])?;
        let kp = t.reshape(kp, &[b * h, k, dh])?;
        let vp = t.reshape(vp, &[b * h, k, dh])?;
        let scores = t.bmm(q, kp, false, true)?;
        let scores = t.scale(scores, T::of(1.0 / (dh as f64).sqrt()))?;
        let probs = t.softmax(scores)?;
        let heads = t.bmm(probs, vp, false, false)?;
        let heads = t.reshape(heads, &[b, h, s, dh])?;
        let merged = t.permute(heads, &[0, 2, 1, 3])?;
        let merged = t.reshape(merged, &[b, s, cfg.d_model])?;
        Ok((self.output.forward(ctx, merged)?, probs))
    }

    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>, mode: Mode, rng: RngState) -> Result<Tensor<T>> {
        run_on_tape(store, x, mode, rng, |c, v| self.forward(c, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{affine_raw, softmax_rows};

    fn single_head(d: usize, s: usize, k: usize) -> (ParamStore<f64>, LinearAttention) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(21);
        let cfg = AttentionConfig {
            d_model: d,
            heads: 1,
            seq_len: s,
            proj_len: k,
            share_heads: false,
        };
        let att = LinearAttention::init(&mut store, "att", cfg, &mut init).unwrap();
        (store, att)
    }

    #[test]
    fn single_token_returns_projected_value() {
        let (mut store, att) = single_head(3, 1, 1);
        store.get_mut(att.key_proj).data_mut()[0] = 1.0;
        store.get_mut(att.value_proj).data_mut()[0] = 1.0;
        let x = Tensor::from_f64(&[1, 1, 3], &[0.3, -0.2, 0.9]).unwrap();
        let y = att.apply(&store, &x, Mode::Eval, RngState::new(0)).unwrap();
        let v = affine_raw(&x, store.get(att.value.weight), Some(store.get(att.value.bias.unwrap()))).unwrap();
        let expected = affine_raw(&v, store.get(att.output.weight), Some(store.get(att.output.bias.unwrap()))).unwrap();
        assert!(y.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn identical_keys_average_values() {
        let (mut store, att) = single_head(4, 5, 3);
        // zero key weights: every key row equals the bias
        store.get_mut(att.key.weight).data_mut().fill(0.0);
        // identity output map isolates the pre-projection result
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.set(&[i, i], 1.0);
        }
        *store.get_mut(att.output.weight) = eye;
        store.get_mut(att.output.bias.unwrap()).data_mut().fill(0.0);
        // rows of E summing to one keep projected keys identical
        let e = store.get_mut(att.key_proj);
        for row in e.data_mut().chunks_exact_mut(5) {
            row.fill(0.2);
        }
        let mut init = Initializer::new(2);
        let x = init.uniform::<f64>(&[1, 5, 4], 1.0);
        let tape = crate::autograd::Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Eval, RngState::new(0));
        let xv = tape.constant(x.clone());
        let (y, probs) = att.forward_with_probs(&ctx, xv).unwrap();
        for &p in tape.value(probs).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let v = affine_raw(&x, store.get(att.value.weight), Some(store.get(att.value.bias.unwrap()))).unwrap();
        let f = store.get(att.value_proj);
        let mut mean = [0.0; 4];
        for slot in 0..3 {
            for tok in 0..5 {
                for c in 0..4 {
                    mean[c] += f.get(&[0, slot, tok]) * v.get(&[0, tok, c]) / 3.0;
                }
            }
        }
        let y = tape.value(y);
        for tok in 0..5 {
            for c in 0..4 {
                assert!((y.get(&[0, tok, c]) - mean[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn probability_rows_sum_to_one() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(5);
        let att = LinearAttention::init(&mut store, "a", AttentionConfig::new(16, 20), &mut init).unwrap();
        let x = init.uniform::<f64>(&[2, 20, 16], 2.0);
        let tape = crate::autograd::Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Eval, RngState::new(0));
        let (_, probs) = att.forward_with_probs(&ctx, tape.constant(x)).unwrap();
        let p = tape.value(probs);
        assert_eq!(p.shape(), &[2 * 8, 20, 20]);
        for row in p.data().chunks_exact(20) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_length_mismatch() {
        let (store, att) = single_head(4, 6, 3);
        let err = att.apply(&store, &Tensor::zeros(&[1, 5, 4]), Mode::Eval, RngState::new(0));
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn multi_head_matches_per_head_loop() {
        let mut store = ParamStore::<f64>::new();
        let mut init = Initializer::new(9);
        let cfg = AttentionConfig {
            d_model: 6,
            heads: 2,
            seq_len: 5,
            proj_len: 3,
            share_heads: false,
        };
        let att = LinearAttention::init(&mut store, "a", cfg, &mut init).unwrap();
        let x = init.uniform::<f64>(&[1, 5, 6], 1.0);
        let y = att.apply(&store, &x, Mode::Eval, RngState::new(0)).unwrap();
        let lin = |l: &Linear, v: &Tensor<f64>| affine_raw(v, store.get(l.weight), l.bias.map(|b| store.get(b))).unwrap();
        let (q, k, v) = (lin(&att.query, &x), lin(&att.key, &x), lin(&att.value, &x));
        let mut merged = Tensor::<f64>::zeros(&[1, 5, 6]);
        for h in 0..2 {
            let e = store.get(att.key_proj);
            let f = store.get(att.value_proj);
            let mut kp = [[0.0; 3]; 3];
            let mut vp = [[0.0; 3]; 3];
            for slot in 0..3 {
                for tok in 0..5 {
                    for c in 0..3 {
                        kp[slot][c] += e.get(&[h, slot, tok]) * k.get(&[0, tok, h * 3 + c]);
                        vp[slot][c] += f.get(&[h, slot, tok]) * v.get(&[0, tok, h * 3 + c]);
                    }
                }
            }
            let mut scores = Tensor::<f64>::zeros(&[5, 3]);
            for tok in 0..5 {
                for slot in 0..3 {
                    let dot: f64 = (0..3).map(|c| q.get(&[0, tok, h * 3 + c]) * kp[slot][c]).sum();
                    scores.set(&[tok, slot], dot / 3f64.sqrt());
                }
            }
            let p = softmax_rows(&scores);
            for tok in 0..5 {
                for c in 0..3 {
                    let val: f64 = (0..3).map(|slot| p.get(&[tok, slot]) * vp[slot][c]).sum();
                    merged.set(&[0, tok, h * 3 + c], val);
                }
            }
        }
        let expected = lin(&att.output, &merged);
        assert!(y.max_abs_diff(&expected) < 1e-12);
    }
}
