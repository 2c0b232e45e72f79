use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (id, g) in params.ids().zip(grads) {
        if g.shape() != params.get(id).shape() {
            return Err(Error::shape(
                "adam_step",
                format!("gradient {:?} for {} {:?}", g.shape(), params.name(id), params.get(id).shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                op: "adam_step",
                scope: format!("gradient of {}", params.name(id)),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            let g = g.as_f64();
            let mj = BETA1 * m[j].as_f64() + (1.0 - BETA1) * g;
            let vj = BETA2 * v[j].as_f64() + (1.0 - BETA2) * g * g;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + EPS);
            *w = T::of(w.as_f64() - update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64(&[1], &[v]).unwrap());
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one(2.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::from_f64(&[1], &[1.0]).unwrap()], &mut st, 0.1).unwrap();
        let expected = 2.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.tensors()[0].data()[0] - expected).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one(2.0);
        let mut st = AdamState::new(&p);
        for _ in 0..3 {
            adam_step(&mut p, &[Tensor::zeros(&[1])], &mut st, 0.1).unwrap();
        }
        assert_eq!(p.tensors()[0].data()[0], 2.0);
    }

    #[test]
    fn nan_gradient_aborts_without_change() {
        let mut p = one(2.0);
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &[Tensor::from_f64(&[1], &[f64::NAN]).unwrap()], &mut st, 0.1).unwrap_err();
        assert!(err.to_string().contains("gradient of w"), "{err}");
        assert_eq!(p.tensors()[0].data()[0], 2.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = one(3.0);
        let mut st = AdamState::new(&p);
        for _ in 0..2000 {
            let w = p.tensors()[0].data()[0];
            adam_step(&mut p, &[Tensor::from_f64(&[1], &[2.0 * (w - 1.0)]).unwrap()], &mut st, 0.01).unwrap();
        }
        assert!((p.tensors()[0].data()[0] - 1.0).abs() < 1e-3);
    }
}
