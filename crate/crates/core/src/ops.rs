//! Pure tensor primitives. Every function here is deterministic in its
//! arguments; randomness enters only through an explicit [`RngState`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{strides, Scalar, Tensor};

/// Train/eval switch for dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Weight `[in, out]` and bias `[out]` of a learnable affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> AffineParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || weight.shape()[1] != bias.shape()[0] {
            return Err(Error::shape(
                "affine params",
                format!("weight {:?}, bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        if !weight.is_finite() || !bias.is_finite() {
            return Err(Error::InvalidArgument("affine params must be finite".into()));
        }
        Ok(AffineParams { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// `y[..., j] = sum_i x[..., i] * W[i, j] + b[j]`.
pub fn affine<T: Scalar>(x: &Tensor<T>, p: &AffineParams<T>) -> Result<Tensor<T>> {
    affine_raw(x, &p.weight, Some(&p.bias))
}

pub(crate) fn affine_raw<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if w.rank() != 2 || x.last_dim() != w.shape()[0] {
        return Err(Error::shape(
            "affine",
            format!("input {:?} against weight {:?}", x.shape(), w.shape()),
        ));
    }
    let (k, n) = (w.shape()[0], w.shape()[1]);
    if let Some(b) = b {
        if b.shape() != [n] {
            return Err(Error::shape(
                "affine",
                format!("bias {:?} for output width {n}", b.shape()),
            ));
        }
    }
    let m = x.numel() / k;
    let mut out = vec![T::zero(); m * n];
    if let Some(b) = b {
        for row in out.chunks_exact_mut(n) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        x.data(),
        k as isize,
        1,
        w.data(),
        n as isize,
        1,
        beta,
        &mut out,
        n as isize,
        1,
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::from_vec(&shape, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::Silu => v * sigmoid(v),
            Activation::Softplus => softplus(v),
        }
    }

    /// Derivative with respect to the input, evaluated at `v`.
    #[inline]
    pub fn derivative<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => {
                if v > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Silu => {
                let s = sigmoid(v);
                s * (T::one() + v * (T::one() - s))
            }
            Activation::Softplus => sigmoid(v),
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

pub fn activation<T: Scalar>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

/// Softmax over the last axis, shifted by the row maximum.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        let inv = T::one() / total;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
    out
}

/// Layer normalization over the last axis with population variance.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    Ok(layer_norm_parts(x, gamma, beta, eps)?.0)
}

/// Returns `(output, normalized input, reciprocal std per row)`.
pub(crate) fn layer_norm_parts<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let d = x.last_dim();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "input {:?} with gamma {:?}, beta {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let dn = T::of(d as f64);
    let mut xhat = x.clone();
    let mut out = x.clone();
    let mut rstd = Vec::with_capacity(x.numel() / d);
    for (xr, yr) in xhat
        .data_mut()
        .chunks_exact_mut(d)
        .zip(out.data_mut().chunks_exact_mut(d))
    {
        let mean = xr.iter().copied().sum::<T>() / dn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let r = if var + eps > T::zero() {
            T::one() / (var + eps).sqrt()
        } else {
            // constant row with eps = 0: normalized values are all zero
            T::zero()
        };
        rstd.push(r);
        for ((xv, yv), (&g, &b)) in xr
            .iter_mut()
            .zip(yr.iter_mut())
            .zip(gamma.data().iter().zip(beta.data()))
        {
            *xv = (*xv - mean) * r;
            *yv = *xv * g + b;
        }
    }
    Ok((out, xhat, rstd))
}

/// Zero padding added on each side of the length axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const NONE: Padding = Padding { left: 0, right: 0 };

    /// Left-only padding of `kernel - 1`; output length equals input length.
    pub fn causal(kernel: usize) -> Self {
        Padding {
            left: kernel.saturating_sub(1),
            right: 0,
        }
    }
}

/// Grouped 1-D cross-correlation.
///
/// `x` is `[B, C_in, L]`, `weight` is `[C_out, C_in / groups, K]`, and the
/// result is `[B, C_out, L + left + right - K + 1]`.
pub fn conv1d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    groups: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    if x.rank() != 3 || weight.rank() != 3 {
        return Err(Error::shape(
            "conv1d",
            format!("input {:?}, weight {:?}", x.shape(), weight.shape()),
        ));
    }
    let (b, c_in, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, c_per_group, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 || c_in / groups != c_per_group {
        return Err(Error::InvalidArgument(format!(
            "conv1d groups={groups} incompatible with C_in={c_in}, C_out={c_out}, weight {:?}",
            weight.shape()
        )));
    }
    let padded = len + padding.left + padding.right;
    if k == 0 || k > padded {
        return Err(Error::InvalidArgument(format!(
            "conv1d kernel {k} longer than padded input {padded}"
        )));
    }
    if let Some(bias) = bias {
        if bias.shape() != [c_out] {
            return Err(Error::shape("conv1d", format!("bias {:?}", bias.shape())));
        }
    }
    let out_len = padded - k + 1;
    let out_per_group = c_out / groups;
    let mut out = vec![T::zero(); b * c_out * out_len];
    for bi in 0..b {
        for co in 0..c_out {
            let g = co / out_per_group;
            let row = &mut out[(bi * c_out + co) * out_len..][..out_len];
            if let Some(bias) = bias {
                row.fill(bias.data()[co]);
            }
            for ci in 0..c_per_group {
                let src = &x.data()[(bi * c_in + g * c_per_group + ci) * len..][..len];
                let w = &weight.data()[(co * c_per_group + ci) * k..][..k];
                for (t, o) in row.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for (j, &wj) in w.iter().enumerate() {
                        let pos = t + j;
                        if pos >= padding.left && pos - padding.left < len {
                            acc = acc + wj * src[pos - padding.left];
                        }
                    }
                    *o = *o + acc;
                }
            }
        }
    }
    Tensor::from_vec(&[b, c_out, out_len], out)
}

/// Sinusoidal position table `[len, dim]`:
/// `PE[p, 2i] = sin(p / 10000^(2i/dim))`, `PE[p, 2i+1] = cos(..)`.
pub fn positional_encoding<T: Scalar>(len: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || !dim.is_multiple_of(2) || len == 0 {
        return Err(Error::InvalidArgument(format!(
            "positional encoding needs a positive even width, got len={len}, dim={dim}"
        )));
    }
    let mut pe = vec![T::zero(); len * dim];
    for p in 0..len {
        for i in 0..dim / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            pe[p * dim + 2 * i] = T::of(angle.sin());
            pe[p * dim + 2 * i + 1] = T::of(angle.cos());
        }
    }
    Tensor::from_vec(&[len, dim], pe)
}

/// Inverted dropout mask: each entry is `0` with probability `p`, otherwise
/// `1 / (1 - p)`.
pub fn dropout_mask<T: Scalar>(shape: &[usize], p: f64, rng: &mut RngState) -> Result<Tensor<T>> {
    check_dropout_rate(p)?;
    let scale = T::of(1.0 / (1.0 - p));
    let mut stream = rng.next_stream();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if stream.gen::<f64>() < p {
                T::zero()
            } else {
                scale
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

pub(crate) fn check_dropout_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate {p} outside [0, 1)"
        )));
    }
    Ok(())
}

pub fn dropout<T: Scalar>(
    x: &Tensor<T>,
    p: f64,
    mode: Mode,
    rng: &mut RngState,
) -> Result<Tensor<T>> {
    check_dropout_rate(p)?;
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask::<T>(x.shape(), p, rng)?;
    let mut out = x.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(mask.data()) {
        *v = *v * m;
    }
    Ok(out)
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::shape(
            "permute",
            format!("axes {axes:?} for shape {:?}", x.shape()),
        ));
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.numel());
    // innermost axis handled as a strided run
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let src = x.data();
    for _ in 0..outer {
        let base: usize = idx
            .iter()
            .zip(&src_strides)
            .map(|(&i, &s)| i * s)
            .sum();
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| src[base + j * inner_stride]));
        }
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::from_vec(&out_shape, out)
}

/// Inverse of `axes` as a permutation.
pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Reverses axis 1 of a rank-3 tensor.
pub fn reverse_tokens<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::shape("reverse", format!("expected rank 3, got {:?}", x.shape())));
    }
    let (b, s, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(x.numel());
    for bi in 0..b {
        for si in (0..s).rev() {
            out.extend_from_slice(&x.data()[(bi * s + si) * d..][..d]);
        }
    }
    Tensor::from_vec(x.shape(), out)
}
