//! Zero-order-hold discretization and the selective scan, in a sequential
//! and an associative (Blelloch up/down sweep) form.
//!
//! Layouts: per-token, per-channel quantities are `[B, T, C]`, input-dependent
//! state projections are `[B, T, N]`, the continuous state matrix is the
//! diagonal `A: [C, N]`, and discretized tensors are `[B, T, C, N]`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Below this `|delta * A|` the exact ZOH factor `(exp(dA) - 1) / A` is
/// replaced by its limit `delta`.
pub const ZOH_LIMIT: f64 = 1e-6;

/// `B_bar / B = (exp(delta * a) - 1) / a`, or `delta` near the singularity.
#[inline]
pub fn zoh_factor<T: Scalar>(delta: T, a: T) -> T {
    let z = delta * a;
    if z.abs() < T::of(ZOH_LIMIT) {
        delta
    } else {
        z.exp_m1() / a
    }
}

/// Partial derivatives of [`zoh_factor`] with respect to `(delta, a)`.
#[inline]
pub(crate) fn zoh_factor_grad<T: Scalar>(delta: T, a: T) -> (T, T) {
    let z = delta * a;
    if z.abs() < T::of(ZOH_LIMIT) {
        // derivatives of the limit branch's true function at z -> 0
        return (T::one(), delta * delta * T::of(0.5));
    }
    let d_delta = z.exp();
    // d/da = delta^2 * g'(z) with g(z) = expm1(z) / z
    let g_prime = if z.abs() < T::of(1e-2) {
        T::of(0.5) + z * (T::of(1.0 / 3.0) + z * (T::of(1.0 / 8.0) + z * (T::of(1.0 / 30.0) + z * T::of(1.0 / 144.0))))
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    };
    (d_delta, delta * delta * g_prime)
}

/// Discretized SSM inputs: `A_bar` and `B_bar * x`, both `[B, T, C, N]`.
#[derive(Clone, Debug)]
pub struct SsmDiscretization<T: Scalar = f32> {
    pub a_bar: Tensor<T>,
    pub b_bar_x: Tensor<T>,
}

struct Dims {
    batch: usize,
    len: usize,
    channels: usize,
    state: usize,
}

fn check_dims<T: Scalar>(
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Dims> {
    if delta.rank() != 3 || a.rank() != 2 || b.rank() != 3 {
        return Err(Error::shape(
            "discretize",
            format!("delta {:?}, A {:?}, B {:?}", delta.shape(), a.shape(), b.shape()),
        ));
    }
    let (batch, len, channels) = (delta.shape()[0], delta.shape()[1], delta.shape()[2]);
    let state = a.shape()[1];
    if a.shape()[0] != channels || b.shape() != [batch, len, state] {
        return Err(Error::shape(
            "discretize",
            format!("delta {:?}, A {:?}, B {:?}", delta.shape(), a.shape(), b.shape()),
        ));
    }
    Ok(Dims {
        batch,
        len,
        channels,
        state,
    })
}

/// Elementwise ZOH: `A_bar = exp(delta * A)`, `B_bar = ((exp(delta * A) - 1) / A) * B`.
///
/// `delta` is `[B, T, C]`, `a` is `[C, N]`, `b` is `[B, T, N]`; both results are
/// `[B, T, C, N]`.
pub fn discretize<T: Scalar>(
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = check_dims(delta, a, b)?;
    let shape = [d.batch, d.len, d.channels, d.state];
    let mut a_bar = Vec::with_capacity(shape.iter().product());
    let mut b_bar = Vec::with_capacity(a_bar.capacity());
    for bt in 0..d.batch * d.len {
        let brow = &b.data()[bt * d.state..][..d.state];
        for c in 0..d.channels {
            let dt = delta.data()[bt * d.channels + c];
            let arow = &a.data()[c * d.state..][..d.state];
            for (&an, &bn) in arow.iter().zip(brow) {
                a_bar.push((dt * an).exp());
                b_bar.push(zoh_factor(dt, an) * bn);
            }
        }
    }
    Ok((Tensor::from_vec(&shape, a_bar)?, Tensor::from_vec(&shape, b_bar)?))
}

impl<T: Scalar> SsmDiscretization<T> {
    /// Discretizes and pre-multiplies `B_bar` by the per-channel input `x: [B, T, C]`.
    pub fn new(delta: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, x: &Tensor<T>) -> Result<Self> {
        let (a_bar, mut b_bar) = discretize(delta, a, b)?;
        delta.same_shape(x, "discretize")?;
        let n = a.shape()[1];
        for (chunk, &xv) in b_bar.data_mut().chunks_exact_mut(n).zip(x.data()) {
            for v in chunk {
                *v = *v * xv;
            }
        }
        Ok(SsmDiscretization { a_bar, b_bar_x: b_bar })
    }

    pub fn from_parts(a_bar: Tensor<T>, b_bar_x: Tensor<T>) -> Result<Self> {
        a_bar.same_shape(&b_bar_x, "ssm discretization")?;
        if a_bar.rank() != 4 {
            return Err(Error::shape(
                "ssm discretization",
                format!("expected [B, T, C, N], got {:?}", a_bar.shape()),
            ));
        }
        Ok(SsmDiscretization { a_bar, b_bar_x })
    }

    fn dims(&self, c: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
        let s = self.a_bar.shape();
        let (b, t, ch, n) = (s[0], s[1], s[2], s[3]);
        if c.shape() != [b, t, n] {
            return Err(Error::shape(
                "selective_scan",
                format!("C {:?} against discretization {:?}", c.shape(), s),
            ));
        }
        Ok((b, t, ch, n))
    }
}

/// `h_t = A_bar_t * h_{t-1} + (B_bar x)_t`, `y_t = sum_n C_{t,n} h_{t,n}`, `h_0 = 0`.
pub fn selective_scan_sequential<T: Scalar>(
    disc: &SsmDiscretization<T>,
    c: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (batch, len, ch, n) = disc.dims(c)?;
    let mut y = vec![T::zero(); batch * len * ch];
    y.par_chunks_mut(len * ch).enumerate().for_each(|(b, yb)| {
        let mut h = vec![T::zero(); ch * n];
        for t in 0..len {
            let base = (b * len + t) * ch * n;
            let abar = &disc.a_bar.data()[base..][..ch * n];
            let bx = &disc.b_bar_x.data()[base..][..ch * n];
            let crow = &c.data()[(b * len + t) * n..][..n];
            for k in 0..ch {
                let mut acc = T::zero();
                for j in 0..n {
                    let i = k * n + j;
                    h[i] = abar[i] * h[i] + bx[i];
                    acc = acc + crow[j] * h[i];
                }
                yb[t * ch + k] = acc;
            }
        }
    });
    Tensor::from_vec(&[batch, len, ch], y)
}

/// Composition of two affine recurrence steps: apply `(a1, b1)` then `(a2, b2)`.
#[inline]
fn combine<T: Scalar>(first: (T, T), second: (T, T)) -> (T, T) {
    (second.0 * first.0, second.0 * first.1 + second.1)
}

/// In-place exclusive Blelloch scan over `(a, b)` pairs under [`combine`],
/// run on rows of `width` independent lanes so each combine touches
/// contiguous memory. The row count must be a power of two; the identity
/// element is `(1, 0)`.
pub(crate) fn blelloch_exclusive_rows<T: Scalar>(a: &mut [T], b: &mut [T], width: usize) {
    let n = a.len() / width;
    debug_assert!(n.is_power_of_two() && a.len() == n * width && b.len() == a.len());
    let lanes = |i: usize| i * width..(i + 1) * width;
    // up-sweep: node at r accumulates (left subtree) then (right subtree)
    let mut half = 1;
    while half < n {
        let step = half * 2;
        let mut i = 0;
        while i < n {
            let (l, r) = (lanes(i + half - 1), lanes(i + step - 1));
            for (li, ri) in l.zip(r) {
                let s = combine((a[li], b[li]), (a[ri], b[ri]));
                a[ri] = s.0;
                b[ri] = s.1;
            }
            i += step;
        }
        half = step;
    }
    a[lanes(n - 1)].fill(T::one());
    b[lanes(n - 1)].fill(T::zero());
    // down-sweep: left child gets parent prefix, right gets prefix then left sum
    while half > 1 {
        let step = half;
        half /= 2;
        let mut i = 0;
        while i < n {
            let (l, r) = (lanes(i + half - 1), lanes(i + step - 1));
            for (li, ri) in l.zip(r) {
                let left = (a[li], b[li]);
                let parent = (a[ri], b[ri]);
                a[li] = parent.0;
                b[li] = parent.1;
                let s = combine(parent, left);
                a[ri] = s.0;
                b[ri] = s.1;
            }
            i += step;
        }
    }
}

/// Same result as [`selective_scan_sequential`] through the associative
/// operator `(a1, b1) . (a2, b2) = (a2 a1, a2 b1 + b2)`. Independent
/// `(batch, channel, state)` sequences run in parallel.
pub fn selective_scan_parallel<T: Scalar>(
    disc: &SsmDiscretization<T>,
    c: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (batch, len, ch, n) = disc.dims(c)?;
    let padded = len.next_power_of_two();
    let mut y = vec![T::zero(); batch * len * ch];
    // y is [B, T, C]; compute per (b, channel) column then scatter.
    let columns: Vec<Vec<T>> = (0..batch * ch)
        .into_par_iter()
        .map_init(
            // Time-major buffers reused across columns: row t holds the `n`
            // states of step t, rows past `len` are the identity.
            || (vec![T::one(); padded * n], vec![T::zero(); padded * n]),
            |(pa, pb), bc| {
                let (b, k) = (bc / ch, bc % ch);
                let mut out = vec![T::zero(); len];
                for t in 0..len {
                    let base = ((b * len + t) * ch + k) * n;
                    pa[t * n..][..n].copy_from_slice(&disc.a_bar.data()[base..][..n]);
                    pb[t * n..][..n].copy_from_slice(&disc.b_bar_x.data()[base..][..n]);
                }
                pa[len * n..].fill(T::one());
                pb[len * n..].fill(T::zero());
                blelloch_exclusive_rows(pa, pb, n);
                for (t, o) in out.iter_mut().enumerate() {
                    let base = ((b * len + t) * ch + k) * n;
                    let (ar, br) = (&disc.a_bar.data()[base..][..n], &disc.b_bar_x.data()[base..][..n]);
                    let crow = &c.data()[(b * len + t) * n..][..n];
                    let mut acc = T::zero();
                    for j in 0..n {
                        acc = acc + crow[j] * (ar[j] * pb[t * n + j] + br[j]);
                    }
                    *o = acc;
                }
                out
            },
        )
        .collect();
    for (bc, col) in columns.into_iter().enumerate() {
        let (b, k) = (bc / ch, bc % ch);
        for (t, v) in col.into_iter().enumerate() {
            y[(b * len + t) * ch + k] = v;
        }
    }
    Tensor::from_vec(&[batch, len, ch], y)
}

/// Shapes of a fused scan: `x, delta: [B, T, C]`, `a: [C, N]`, `b, c: [B, T, N]`.
pub(crate) fn check_fused<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
) -> Result<()> {
    check_dims(delta, a, b)?;
    delta.same_shape(x, "selective_scan")?;
    b.same_shape(c, "selective_scan")?;
    Ok(())
}

/// Fused discretize + sequential scan without materializing `[B, T, C, N]`.
pub(crate) fn fused_scan_forward<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
) -> Tensor<T> {
    let (batch, len, ch) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = a.shape()[1];
    let mut y = vec![T::zero(); batch * len * ch];
    y.par_chunks_mut(len * ch).enumerate().for_each(|(bi, yb)| {
        let mut h = vec![T::zero(); n];
        for k in 0..ch {
            h.fill(T::zero());
            let arow = &a.data()[k * n..][..n];
            for t in 0..len {
                let bt = bi * len + t;
                let dt = delta.data()[bt * ch + k];
                let xv = x.data()[bt * ch + k];
                let brow = &b.data()[bt * n..][..n];
                let crow = &c.data()[bt * n..][..n];
                let mut acc = T::zero();
                for j in 0..n {
                    let abar = (dt * arow[j]).exp();
                    h[j] = abar * h[j] + zoh_factor(dt, arow[j]) * brow[j] * xv;
                    acc = acc + crow[j] * h[j];
                }
                yb[t * ch + k] = acc;
            }
        }
    });
    Tensor::from_vec(&[batch, len, ch], y).expect("scan output shape")
}

/// Gradients of the fused scan: `(dx, d_delta, dA, dB, dC)`.
/// States are recomputed per `(batch, channel)` instead of stored.
#[allow(clippy::type_complexity)]
pub(crate) fn fused_scan_backward<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
    let (batch, len, ch) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = a.shape()[1];

    struct Part<T> {
        dx: Vec<T>,
        ddelta: Vec<T>,
        da: Vec<T>,
        db: Vec<T>,
        dc: Vec<T>,
    }

    let parts: Vec<Part<T>> = (0..batch)
        .into_par_iter()
        .map(|bi| {
            let mut p = Part {
                dx: vec![T::zero(); len * ch],
                ddelta: vec![T::zero(); len * ch],
                da: vec![T::zero(); ch * n],
                db: vec![T::zero(); len * n],
                dc: vec![T::zero(); len * n],
            };
            let mut hs = vec![T::zero(); len * n];
            let mut carry = vec![T::zero(); n];
            for k in 0..ch {
                let arow = &a.data()[k * n..][..n];
                // forward recompute of h_t
                let mut prev_base = None;
                for t in 0..len {
                    let bt = bi * len + t;
                    let dt = delta.data()[bt * ch + k];
                    let xv = x.data()[bt * ch + k];
                    let brow = &b.data()[bt * n..][..n];
                    for j in 0..n {
                        let hp = prev_base.map_or(T::zero(), |pb: usize| hs[pb + j]);
                        hs[t * n + j] = (dt * arow[j]).exp() * hp + zoh_factor(dt, arow[j]) * brow[j] * xv;
                    }
                    prev_base = Some(t * n);
                }
                carry.fill(T::zero());
                let da = &mut p.da[k * n..][..n];
                for t in (0..len).rev() {
                    let bt = bi * len + t;
                    let dt = delta.data()[bt * ch + k];
                    let xv = x.data()[bt * ch + k];
                    let g_y = dy.data()[bt * ch + k];
                    let brow = &b.data()[bt * n..][..n];
                    let crow = &c.data()[bt * n..][..n];
                    let mut dx_acc = T::zero();
                    let mut dd_acc = T::zero();
                    for j in 0..n {
                        let h = hs[t * n + j];
                        let h_prev = if t > 0 { hs[(t - 1) * n + j] } else { T::zero() };
                        let g = g_y * crow[j] + carry[j];
                        p.dc[t * n + j] = p.dc[t * n + j] + g_y * h;
                        let an = arow[j];
                        let abar = (dt * an).exp();
                        let phi = zoh_factor(dt, an);
                        let (dphi_dd, dphi_da) = zoh_factor_grad(dt, an);
                        let d_abar = g * h_prev;
                        let bx = brow[j] * xv;
                        dd_acc = dd_acc + d_abar * abar * an + g * bx * dphi_dd;
                        da[j] = da[j] + d_abar * abar * dt + g * bx * dphi_da;
                        p.db[t * n + j] = p.db[t * n + j] + g * phi * xv;
                        dx_acc = dx_acc + g * phi * brow[j];
                        carry[j] = abar * g;
                    }
                    p.dx[t * ch + k] = dx_acc;
                    p.ddelta[t * ch + k] = dd_acc;
                }
            }
            p
        })
        .collect();

    let mut dx = Vec::with_capacity(batch * len * ch);
    let mut ddelta = Vec::with_capacity(batch * len * ch);
    let mut db = Vec::with_capacity(batch * len * n);
    let mut dc = Vec::with_capacity(batch * len * n);
    let mut da = vec![T::zero(); ch * n];
    for p in parts {
        dx.extend(p.dx);
        ddelta.extend(p.ddelta);
        db.extend(p.db);
        dc.extend(p.dc);
        for (acc, v) in da.iter_mut().zip(p.da) {
            *acc = *acc + v;
        }
    }
    (
        Tensor::from_vec(x.shape(), dx).expect("dx"),
        Tensor::from_vec(x.shape(), ddelta).expect("ddelta"),
        Tensor::from_vec(a.shape(), da).expect("da"),
        Tensor::from_vec(b.shape(), db).expect("db"),
        Tensor::from_vec(c.shape(), dc).expect("dc"),
    )
}
