//! Tape-based reverse-mode differentiation over [`Tensor`] operations.
//!
//! Every operation evaluates eagerly, stores its output on the tape and
//! remembers its inputs. [`Tape::backward`] walks the tape in reverse and
//! returns the gradient of a scalar with respect to every recorded node.
//! Nodes whose inputs are all constants are never visited.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ops::{self, Activation};
use crate::ssm::scan;
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Rc<Tensor<T>>),
    AddConst(Var),
    Scale(Var, T),
    Act(Var, Activation),
    NegExp(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, rstd: Vec<T> },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Reverse(Var),
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    SeqProject { e: Var, x: Var },
    DepthwiseConv { x: Var, w: Var, b: Var },
    Scan { x: Var, delta: Var, a: Var, b: Var, c: Var },
    Mse { pred: Var, target: Rc<Tensor<T>> },
    Mean(Var),
    GradScale(Var, T),
}

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    grad: bool,
}

/// Records a computation for later differentiation.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    scope: RefCell<Vec<String>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Pops a name pushed by [`Tape::scope`] when dropped.
pub struct ScopeGuard<'t, T: Scalar> {
    tape: &'t Tape<T>,
}

impl<T: Scalar> Drop for ScopeGuard<'_, T> {
    fn drop(&mut self) {
        self.tape.scope.borrow_mut().pop();
    }
}

/// Gradients indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Logical `[rows, cols]` view of a row-major buffer, optionally transposed.
#[derive(Clone, Copy)]
struct View {
    rows: usize,
    cols: usize,
    trans: bool,
}

impl View {
    fn strides(self) -> (isize, isize) {
        if self.trans {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c (+)= op(a) * op(b)` where `a` is logically `[m, k]` and `b` `[k, n]`.
fn gemm_into<T: Scalar>(a: &[T], av: View, b: &[T], bv: View, c: &mut [T], accumulate: bool) {
    debug_assert_eq!(av.cols, bv.rows);
    let (rsa, csa) = av.strides();
    let (rsb, csb) = bv.strides();
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        av.rows,
        av.cols,
        bv.cols,
        T::one(),
        a,
        rsa,
        csa,
        b,
        rsb,
        csb,
        beta,
        c,
        bv.cols as isize,
        1,
    );
}

fn add_into<T: Scalar>(acc: &mut [T], v: &[T]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a = *a + b;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            scope: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Smallest `|input|` over every ReLU recorded so far, or infinity if
    /// there are none. Below this distance the recorded function has a kink.
    pub fn relu_margin(&self) -> f64 {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Act(a, Activation::Relu) => Some(&nodes[a.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|v| v.as_f64().abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Names subsequent operations for non-finite diagnostics.
    pub fn scope(&self, name: impl Into<String>) -> ScopeGuard<'_, T> {
        self.scope.borrow_mut().push(name.into());
        ScopeGuard { tape: self }
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].grad
    }

    fn push(&self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: name,
                scope: self.scope.borrow().join("."),
            });
        }
        let grad = parents.iter().any(|&p| self.requires_grad(p));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            grad: true,
        });
        Var(nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            grad: false,
        });
        Var(nodes.len() - 1)
    }

    /// `x[..., in] * w[in, out] + b[out]`.
    pub fn affine(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = b.map(|b| self.value(b));
        let out = ops::affine_raw(&xv, &wv, bv.as_deref())?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push("affine", out, Op::Affine { x, w, b }, &parents)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape(&bv, "add")?;
        let mut out = (*av).clone();
        add_into(out.data_mut(), bv.data());
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// `a + b` where the shape of `b` is a suffix of the shape of `a`.
    pub fn add_broadcast(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() > av.rank() || av.shape()[av.rank() - bv.rank()..] != *bv.shape() {
            return Err(Error::shape(
                "add_broadcast",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = (*av).clone();
        for chunk in out.data_mut().chunks_exact_mut(bv.numel()) {
            add_into(chunk, bv.data());
        }
        self.push("add_broadcast", out, Op::AddBroadcast(a, b), &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape(&bv, "sub")?;
        let mut out = (*av).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(bv.data()) {
            *o = *o - v;
        }
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape(&bv, "mul")?;
        let mut out = (*av).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(bv.data()) {
            *o = *o * v;
        }
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise product with a constant of the same shape (dropout masks,
    /// de-normalization scales).
    pub fn mul_const(&self, a: Var, c: Tensor<T>) -> Result<Var> {
        let av = self.value(a);
        av.same_shape(&c, "mul_const")?;
        let mut out = (*av).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(c.data()) {
            *o = *o * v;
        }
        self.push("mul_const", out, Op::MulConst(a, Rc::new(c)), &[a])
    }

    pub fn add_const(&self, a: Var, c: &Tensor<T>) -> Result<Var> {
        let av = self.value(a);
        av.same_shape(c, "add_const")?;
        let mut out = (*av).clone();
        add_into(out.data_mut(), c.data());
        self.push("add_const", out, Op::AddConst(a), &[a])
    }

    pub fn scale(&self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    pub fn activation(&self, a: Var, kind: Activation) -> Result<Var> {
        let out = ops::activation(kind, &self.value(a));
        let name = match kind {
            Activation::Relu => "relu",
            Activation::Silu => "silu",
            Activation::Softplus => "softplus",
        };
        self.push(name, out, Op::Act(a, kind), &[a])
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    pub fn silu(&self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Silu)
    }

    pub fn softplus(&self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Softplus)
    }

    /// `-exp(a)`, the strictly negative state matrix from its log parameterization.
    pub fn neg_exp(&self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| -v.exp());
        self.push("neg_exp", out, Op::NegExp(a), &[a])
    }

    pub fn softmax(&self, a: Var) -> Result<Var> {
        let out = ops::softmax_rows(&self.value(a));
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (out, xhat, rstd) =
            ops::layer_norm_parts(&self.value(x), &self.value(gamma), &self.value(beta), eps)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = ops::permute(&self.value(x), axes)?;
        self.push(
            "permute",
            out,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        )
    }

    /// Swaps the last two axes of a rank-3 value.
    pub fn transpose12(&self, x: Var) -> Result<Var> {
        self.permute(x, &[0, 2, 1])
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.value(x)).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Reverses the token axis (axis 1) of a rank-3 value.
    pub fn reverse_tokens(&self, x: Var) -> Result<Var> {
        let out = ops::reverse_tokens(&self.value(x))?;
        self.push("reverse", out, Op::Reverse(x), &[x])
    }

    /// Concatenation along the last axis.
    pub fn concat(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let lead_a = &av.shape()[..av.rank() - 1];
        if av.rank() != bv.rank() || lead_a != &bv.shape()[..bv.rank() - 1] {
            return Err(Error::shape(
                "concat",
                format!("{:?} with {:?}", av.shape(), bv.shape()),
            ));
        }
        let (da, db) = (av.last_dim(), bv.last_dim());
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for (ra, rb) in av.data().chunks_exact(da).zip(bv.data().chunks_exact(db)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = da + db;
        self.push("concat", Tensor::from_vec(&shape, data)?, Op::Concat(a, b), &[a, b])
    }

    /// `x[..., start..start + len]`.
    pub fn slice_last(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if len == 0 || start + len > d {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) of last axis {d}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(xv.numel() / d * len);
        for row in xv.data().chunks_exact(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.push("slice", Tensor::from_vec(&shape, data)?, Op::Slice { x, start }, &[x])
    }

    /// Batched product of rank-3 values: `op(a[g]) * op(b[g])` where `op`
    /// transposes when the corresponding flag is set.
    pub fn bmm(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let g = av.shape()[0];
        let (m, k) = if ta { (av.shape()[2], av.shape()[1]) } else { (av.shape()[1], av.shape()[2]) };
        let (k2, n) = if tb { (bv.shape()[2], bv.shape()[1]) } else { (bv.shape()[1], bv.shape()[2]) };
        if k != k2 {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![T::zero(); g * m * n];
        let (sa, sb) = (m * k, k * n);
        for i in 0..g {
            gemm_into(
                &av.data()[i * sa..][..sa],
                View { rows: m, cols: k, trans: ta },
                &bv.data()[i * sb..][..sb],
                View { rows: k, cols: n, trans: tb },
                &mut out[i * m * n..][..m * n],
                false,
            );
        }
        self.push("bmm", Tensor::from_vec(&[g, m, n], out)?, Op::Bmm { a, b, ta, tb }, &[a, b])
    }

    /// Projects the sequence axis: `e: [He, k, S]`, `x: [B, H, S, d]` gives
    /// `[B, H, k, d]` with `out[b, h] = e[h mod He] * x[b, h]`. `He` is 1
    /// (shared) or `H`.
    pub fn seq_project(&self, e: Var, x: Var) -> Result<Var> {
        let (ev, xv) = (self.value(e), self.value(x));
        if ev.rank() != 3 || xv.rank() != 4 || ev.shape()[2] != xv.shape()[2] || (ev.shape()[0] != 1 && ev.shape()[0] != xv.shape()[1]) {
            return Err(Error::shape(
                "seq_project",
                format!("projection {:?} against sequence {:?}", ev.shape(), xv.shape()),
            ));
        }
        let (he, k, s) = (ev.shape()[0], ev.shape()[1], ev.shape()[2]);
        let (b, h, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[3]);
        let mut out = vec![T::zero(); b * h * k * d];
        for bh in 0..b * h {
            let hi = (bh % h) % he;
            gemm_into(
                &ev.data()[hi * k * s..][..k * s],
                View { rows: k, cols: s, trans: false },
                &xv.data()[bh * s * d..][..s * d],
                View { rows: s, cols: d, trans: false },
                &mut out[bh * k * d..][..k * d],
                false,
            );
        }
        self.push("seq_project", Tensor::from_vec(&[b, h, k, d], out)?, Op::SeqProject { e, x }, &[e, x])
    }

    /// Causal depthwise convolution along the token axis.
    /// `x: [B, S, C]`, `w: [C, K]`, `b: [C]`; output length equals input length.
    pub fn depthwise_conv(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 3 || wv.rank() != 2 || wv.shape()[0] != xv.shape()[2] || bv.shape() != [xv.shape()[2]] {
            return Err(Error::shape(
                "depthwise_conv",
                format!("x {:?}, w {:?}, b {:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let (bs, s, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let k = wv.shape()[1];
        let mut out = vec![T::zero(); bs * s * c];
        for bi in 0..bs {
            for t in 0..s {
                let o = &mut out[(bi * s + t) * c..][..c];
                o.copy_from_slice(bv.data());
                for j in 0..k {
                    // source token t - (k - 1) + j
                    let Some(src) = (t + j).checked_sub(k - 1) else { continue };
                    let xr = &xv.data()[(bi * s + src) * c..][..c];
                    for ch in 0..c {
                        o[ch] = o[ch] + wv.data()[ch * k + j] * xr[ch];
                    }
                }
            }
        }
        self.push("depthwise_conv", Tensor::from_vec(xv.shape(), out)?, Op::DepthwiseConv { x, w, b }, &[x, w, b])
    }

    /// Fused zero-order-hold discretization and selective scan.
    /// `x, delta: [B, S, C]`, `a: [C, N]` (negative), `b, c: [B, S, N]`.
    pub fn selective_scan(&self, x: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let (xv, dv, av, bv, cv) = (self.value(x), self.value(delta), self.value(a), self.value(b), self.value(c));
        scan::check_fused(&xv, &dv, &av, &bv, &cv)?;
        let out = scan::fused_scan_forward(&xv, &dv, &av, &bv, &cv);
        self.push("selective_scan", out, Op::Scan { x, delta, a, b, c }, &[x, delta, a, b, c])
    }

    /// Mean squared error against a constant target; a `[1]` scalar.
    pub fn mse(&self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        pv.same_shape(target, "mse")?;
        let n = T::of(pv.numel() as f64);
        let s = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            / n;
        self.push("mse", Tensor::scalar(s), Op::Mse { pred, target: Rc::new(target.clone()) }, &[pred])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let s = av.sum() / T::of(av.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Identity whose backward pass multiplies the gradient by `factor`.
    /// Used only to build negative controls for gradient checking.
    #[doc(hidden)]
    pub fn grad_scale(&self, a: Var, factor: T) -> Result<Var> {
        let out = (*self.value(a)).clone();
        self.push("grad_scale", out, Op::GradScale(a, factor), &[a])
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() || loss.0 >= nodes.len() {
            return Err(Error::NoGraph("tape is empty".into()));
        }
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            // intermediate gradients are released once propagated
            let Some(g) = grads[id].take() else { continue };
            let mut acc = Accum { nodes: &nodes, grads: &mut grads };
            backward_op(&node.op, &node.value, g, &mut acc, &nodes);
        }
        Ok(Gradients { grads })
    }
}

struct Accum<'a, T: Scalar> {
    nodes: &'a [Node<T>],
    grads: &'a mut Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Accum<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn add(&mut self, v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => add_into(existing.data_mut(), g.data()),
            slot @ None => *slot = Some(g),
        }
    }

    fn add_with(&mut self, v: Var, f: impl FnOnce() -> Tensor<T>) {
        if self.wants(v) {
            let g = f();
            self.add(v, g);
        }
    }
}

fn backward_op<T: Scalar>(op: &Op<T>, out: &Tensor<T>, g: Tensor<T>, acc: &mut Accum<'_, T>, nodes: &[Node<T>]) {
    let val = |v: Var| -> &Tensor<T> { &nodes[v.0].value };
    match op {
        Op::Leaf => {}
        Op::Affine { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (k, n) = (wv.shape()[0], wv.shape()[1]);
            let m = xv.numel() / k;
            acc.add_with(*x, || {
                let mut dx = vec![T::zero(); m * k];
                gemm_into(g.data(), View { rows: m, cols: n, trans: false }, wv.data(), View { rows: n, cols: k, trans: true }, &mut dx, false);
                Tensor::from_vec(xv.shape(), dx).unwrap()
            });
            acc.add_with(*w, || {
                let mut dw = vec![T::zero(); k * n];
                gemm_into(xv.data(), View { rows: k, cols: m, trans: true }, g.data(), View { rows: m, cols: n, trans: false }, &mut dw, false);
                Tensor::from_vec(&[k, n], dw).unwrap()
            });
            if let Some(b) = b {
                acc.add_with(*b, || column_sums(&g, n));
            }
        }
        Op::Add(a, b) => {
            acc.add_with(*b, || g.clone());
            acc.add(*a, g);
        }
        Op::AddBroadcast(a, b) => {
            let bshape = val(*b).shape().to_vec();
            acc.add_with(*b, || {
                let n: usize = bshape.iter().product();
                let mut s = column_sums(&g, n);
                s = s.reshape(&bshape).unwrap();
                s
            });
            acc.add(*a, g);
        }
        Op::Sub(a, b) => {
            acc.add_with(*b, || g.map(|v| -v));
            acc.add(*a, g);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc.add_with(*a, || zip_map(&g, bv, |g, y| g * y));
            acc.add_with(*b, || zip_map(&g, av, |g, x| g * x));
        }
        Op::MulConst(a, c) => acc.add_with(*a, || zip_map(&g, c, |g, c| g * c)),
        Op::AddConst(a) => acc.add(*a, g),
        Op::Scale(a, s) => {
            let s = *s;
            acc.add_with(*a, || g.map(|v| v * s));
        }
        Op::Act(a, kind) => {
            let kind = *kind;
            acc.add_with(*a, || zip_map(&g, val(*a), |g, x| g * kind.derivative(x)));
        }
        Op::NegExp(a) => acc.add_with(*a, || zip_map(&g, out, |g, y| g * y)),
        Op::Softmax(a) => acc.add_with(*a, || {
            let n = out.last_dim();
            let mut dx = g.clone();
            for (dr, sr) in dx.data_mut().chunks_exact_mut(n).zip(out.data().chunks_exact(n)) {
                let dot: T = dr.iter().zip(sr).map(|(&d, &s)| d * s).sum();
                for (d, &s) in dr.iter_mut().zip(sr) {
                    *d = s * (*d - dot);
                }
            }
            dx
        }),
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = xhat.last_dim();
            let gv = val(*gamma);
            acc.add_with(*x, || {
                let dn = T::of(d as f64);
                let mut dx = g.clone();
                for ((dr, xr), &r) in dx.data_mut().chunks_exact_mut(d).zip(xhat.data().chunks_exact(d)).zip(rstd) {
                    for (dv, &gm) in dr.iter_mut().zip(gv.data()) {
                        *dv = *dv * gm;
                    }
                    let mean_d: T = dr.iter().copied().sum::<T>() / dn;
                    let mean_dx: T = dr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    for (dv, &xh) in dr.iter_mut().zip(xr) {
                        *dv = r * (*dv - mean_d - xh * mean_dx);
                    }
                }
                dx
            });
            acc.add_with(*gamma, || {
                let prod = zip_map(&g, xhat, |g, x| g * x);
                column_sums(&prod, d)
            });
            acc.add_with(*beta, || column_sums(&g, d));
        }
        Op::Permute { x, axes } => acc.add_with(*x, || ops::permute(&g, &ops::inverse_axes(axes)).unwrap()),
        Op::Reshape(x) => {
            let shape = val(*x).shape().to_vec();
            acc.add_with(*x, || g.clone().reshape(&shape).unwrap());
        }
        Op::Reverse(x) => acc.add_with(*x, || ops::reverse_tokens(&g).unwrap()),
        Op::Concat(a, b) => {
            let (da, db) = (val(*a).last_dim(), val(*b).last_dim());
            let split = |start: usize, len: usize, like: &Tensor<T>| {
                let mut data = Vec::with_capacity(like.numel());
                for row in g.data().chunks_exact(da + db) {
                    data.extend_from_slice(&row[start..start + len]);
                }
                Tensor::from_vec(like.shape(), data).unwrap()
            };
            acc.add_with(*a, || split(0, da, val(*a)));
            acc.add_with(*b, || split(da, db, val(*b)));
        }
        Op::Slice { x, start } => {
            let xv = val(*x);
            let (d, len) = (xv.last_dim(), g.last_dim());
            acc.add_with(*x, || {
                let mut dx = Tensor::zeros(xv.shape());
                for (dr, gr) in dx.data_mut().chunks_exact_mut(d).zip(g.data().chunks_exact(len)) {
                    dr[*start..*start + len].copy_from_slice(gr);
                }
                dx
            });
        }
        Op::Bmm { a, b, ta, tb } => {
            let (av, bv) = (val(*a), val(*b));
            let (ta, tb) = (*ta, *tb);
            let grp = av.shape()[0];
            let (m, k) = if ta { (av.shape()[2], av.shape()[1]) } else { (av.shape()[1], av.shape()[2]) };
            let n = g.shape()[2];
            let (sa, sb, sc) = (m * k, k * n, m * n);
            acc.add_with(*a, || {
                let mut da = vec![T::zero(); grp * sa];
                for i in 0..grp {
                    let gi = &g.data()[i * sc..][..sc];
                    let bi = &bv.data()[i * sb..][..sb];
                    let di = &mut da[i * sa..][..sa];
                    if ta {
                        // stored [k, m] = op(b) [k, n] * g^T [n, m]
                        gemm_into(bi, View { rows: k, cols: n, trans: tb }, gi, View { rows: n, cols: m, trans: true }, di, false);
                    } else {
                        // [m, k] = g [m, n] * op(b)^T [n, k]
                        gemm_into(gi, View { rows: m, cols: n, trans: false }, bi, View { rows: n, cols: k, trans: !tb }, di, false);
                    }
                }
                Tensor::from_vec(av.shape(), da).unwrap()
            });
            acc.add_with(*b, || {
                let mut db = vec![T::zero(); grp * sb];
                for i in 0..grp {
                    let gi = &g.data()[i * sc..][..sc];
                    let ai = &av.data()[i * sa..][..sa];
                    let di = &mut db[i * sb..][..sb];
                    if tb {
                        // stored [n, k] = g^T [n, m] * op(a) [m, k]
                        gemm_into(gi, View { rows: n, cols: m, trans: true }, ai, View { rows: m, cols: k, trans: ta }, di, false);
                    } else {
                        // [k, n] = op(a)^T [k, m] * g [m, n]
                        gemm_into(ai, View { rows: k, cols: m, trans: !ta }, gi, View { rows: m, cols: n, trans: false }, di, false);
                    }
                }
                Tensor::from_vec(bv.shape(), db).unwrap()
            });
        }
        Op::SeqProject { e, x } => {
            let (ev, xv) = (val(*e), val(*x));
            let (he, k, s) = (ev.shape()[0], ev.shape()[1], ev.shape()[2]);
            let (bsz, h, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[3]);
            acc.add_with(*x, || {
                let mut dx = vec![T::zero(); xv.numel()];
                for bh in 0..bsz * h {
                    let hi = (bh % h) % he;
                    gemm_into(
                        &ev.data()[hi * k * s..][..k * s],
                        View { rows: s, cols: k, trans: true },
                        &g.data()[bh * k * d..][..k * d],
                        View { rows: k, cols: d, trans: false },
                        &mut dx[bh * s * d..][..s * d],
                        false,
                    );
                }
                Tensor::from_vec(xv.shape(), dx).unwrap()
            });
            acc.add_with(*e, || {
                let mut de = vec![T::zero(); ev.numel()];
                for bh in 0..bsz * h {
                    let hi = (bh % h) % he;
                    gemm_into(
                        &g.data()[bh * k * d..][..k * d],
                        View { rows: k, cols: d, trans: false },
                        &xv.data()[bh * s * d..][..s * d],
                        View { rows: d, cols: s, trans: true },
                        &mut de[hi * k * s..][..k * s],
                        true,
                    );
                }
                Tensor::from_vec(ev.shape(), de).unwrap()
            });
        }
        Op::DepthwiseConv { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (bs, s, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let k = wv.shape()[1];
            acc.add_with(*x, || {
                let mut dx = vec![T::zero(); xv.numel()];
                for bi in 0..bs {
                    for t in 0..s {
                        let gr = &g.data()[(bi * s + t) * c..][..c];
                        for j in 0..k {
                            let Some(src) = (t + j).checked_sub(k - 1) else { continue };
                            let dr = &mut dx[(bi * s + src) * c..][..c];
                            for ch in 0..c {
                                dr[ch] = dr[ch] + wv.data()[ch * k + j] * gr[ch];
                            }
                        }
                    }
                }
                Tensor::from_vec(xv.shape(), dx).unwrap()
            });
            acc.add_with(*w, || {
                let mut dw = vec![T::zero(); c * k];
                for bi in 0..bs {
                    for t in 0..s {
                        let gr = &g.data()[(bi * s + t) * c..][..c];
                        for j in 0..k {
                            let Some(src) = (t + j).checked_sub(k - 1) else { continue };
                            let xr = &xv.data()[(bi * s + src) * c..][..c];
                            for ch in 0..c {
                                dw[ch * k + j] = dw[ch * k + j] + gr[ch] * xr[ch];
                            }
                        }
                    }
                }
                Tensor::from_vec(&[c, k], dw).unwrap()
            });
            acc.add_with(*b, || column_sums(&g, c));
        }
        Op::Scan { x, delta, a, b, c } => {
            let (dx, dd, da, db, dc) = scan::fused_scan_backward(val(*x), val(*delta), val(*a), val(*b), val(*c), &g);
            acc.add(*x, dx);
            acc.add(*delta, dd);
            acc.add(*a, da);
            acc.add(*b, db);
            acc.add(*c, dc);
        }
        Op::Mse { pred, target } => {
            let pv = val(*pred);
            let scale = g.data()[0] * T::of(2.0 / pv.numel() as f64);
            acc.add_with(*pred, || zip_map(pv, target, |p, t| (p - t) * scale));
        }
        Op::Mean(a) => {
            let av = val(*a);
            let v = g.data()[0] / T::of(av.numel() as f64);
            acc.add_with(*a, || Tensor::full(av.shape(), v));
        }
        Op::GradScale(a, f) => {
            let f = *f;
            acc.add_with(*a, || g.map(|v| v * f));
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

/// Sums rows of width `n`.
fn column_sums<T: Scalar>(g: &Tensor<T>, n: usize) -> Tensor<T> {
    let mut s = vec![T::zero(); n];
    for row in g.data().chunks_exact(n) {
        add_into(&mut s, row);
    }
    Tensor::from_vec(&[n], s).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn sum_of_squares() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.mean(sq).unwrap();
        let s = tape.scale(s, 2.0).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let zero = tape.scale(x, 0.0).unwrap();
        let loss = tape.mean(zero).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_margin_is_closest_input_to_kink() {
        let tape = Tape::<f64>::new();
        assert_eq!(tape.relu_margin(), f64::INFINITY);
        let x = tape.param(t(&[3], &[0.5, -0.02, 3.0]));
        tape.silu(x).unwrap();
        assert_eq!(tape.relu_margin(), f64::INFINITY);
        tape.relu(x).unwrap();
        assert_eq!(tape.relu_margin(), 0.02);
    }

    #[test]
    fn backward_without_forward_fails() {
        let tape = Tape::<f64>::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::NoGraph(_))));
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn non_finite_reports_op_and_scope() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1], &[1000.0]));
        let _s = tape.scope("block");
        let err = tape.neg_exp(x).unwrap_err();
        assert_eq!(err.to_string(), "non-finite value produced by neg_exp in block");
    }

    #[test]
    fn constants_are_skipped() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let p = tape.param(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(c, p).unwrap();
        let l = tape.mean(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[0.5, 1.0]);
    }
}
