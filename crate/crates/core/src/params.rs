//! Named parameter storage and the per-forward binding onto a tape.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::ops::{self, Mode};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Parameters bound to one tape, plus the train/eval mode and dropout stream
/// for a single forward pass.
pub struct Ctx<'t, T: Scalar> {
    pub tape: &'t Tape<T>,
    vars: Vec<Var>,
    pub mode: Mode,
    rng: RefCell<RngState>,
}

impl<'t, T: Scalar> Ctx<'t, T> {
    /// Records every parameter of `store` as a trainable leaf.
    pub fn new(tape: &'t Tape<T>, store: &ParamStore<T>, mode: Mode, rng: RngState) -> Self {
        let vars = store.tensors.iter().map(|t| tape.param(t.clone())).collect();
        Ctx {
            tape,
            vars,
            mode,
            rng: RefCell::new(rng),
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn rng_state(&self) -> RngState {
        *self.rng.borrow()
    }

    /// Inverted dropout; the identity in eval mode or at rate 0.
    pub fn dropout(&self, x: Var, p: f64) -> Result<Var> {
        ops::check_dropout_rate(p)?;
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let shape = self.tape.shape(x);
        let mask = ops::dropout_mask::<T>(&shape, p, &mut self.rng.borrow_mut())?;
        self.tape.mul_const(x, mask)
    }
}

/// Draws initial parameter values from a seeded stream.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: RngState::new(seed).stream(),
        }
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(self.rng.gen_range(-bound..=bound)))
            .collect();
        Tensor::from_vec(shape, data).expect("init shape")
    }

    /// Kaiming-style uniform weight `[fan_in, fan_out]` with bound `1/sqrt(fan_in)`.
    pub fn linear<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        self.uniform(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    pub fn sample(&mut self) -> f64 {
        self.rng.gen()
    }
}

/// Evaluates `f` on a fresh tape with `x` as a constant input and returns the
/// resulting value.
pub fn run_on_tape<T: Scalar>(
    store: &ParamStore<T>,
    x: &Tensor<T>,
    mode: Mode,
    rng: RngState,
    f: impl FnOnce(&Ctx<'_, T>, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, mode, rng);
    let xv = tape.constant(x.clone());
    let y = f(&ctx, xv)?;
    Ok((*tape.value(y)).clone())
}
