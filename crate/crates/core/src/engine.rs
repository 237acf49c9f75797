//! Execution engines for model code.
//!
//! Model forwards are written once against [`Engine`] and then run on plain
//! tensors ([`Eval`]), on the autodiff tape ([`TapeEngine`]), under an op
//! counter ([`Traced`]) or on ciphertexts (`he::HeEngine`).

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use thiserror::Error;

use crate::he::HeError;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    He(#[from] HeError),
}

pub type EvalResult<T> = Result<T, EvalError>;

pub trait Engine {
    type Value: Clone;

    /// A named model weight.
    fn param(&mut self, name: &str, value: &Tensor) -> EvalResult<Self::Value>;
    fn constant(&mut self, value: Tensor) -> EvalResult<Self::Value>;
    fn shape(&self, v: &Self::Value) -> Vec<usize>;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> EvalResult<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> EvalResult<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> EvalResult<Self::Value>;
    fn div(&mut self, a: &Self::Value, b: &Self::Value) -> EvalResult<Self::Value>;
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> EvalResult<Self::Value>;
    fn scale(&mut self, a: &Self::Value, c: f64) -> EvalResult<Self::Value>;
    fn relu(&mut self, a: &Self::Value) -> EvalResult<Self::Value>;
    fn exp(&mut self, a: &Self::Value) -> EvalResult<Self::Value>;
    fn tanh(&mut self, a: &Self::Value) -> EvalResult<Self::Value>;
    fn sqrt(&mut self, a: &Self::Value) -> EvalResult<Self::Value>;
    fn sum_axis(&mut self, a: &Self::Value, axis: usize, keepdim: bool) -> EvalResult<Self::Value>;
    /// Max along an axis. Never differentiated.
    fn max_axis(&mut self, a: &Self::Value, axis: usize, keepdim: bool) -> EvalResult<Self::Value>;

    fn transpose(&mut self, a: &Self::Value) -> EvalResult<Self::Value>;
    fn slice_rows(&mut self, a: &Self::Value, start: usize, end: usize) -> EvalResult<Self::Value>;
    fn slice_cols(&mut self, a: &Self::Value, start: usize, end: usize) -> EvalResult<Self::Value>;
    fn concat_rows(&mut self, parts: &[Self::Value]) -> EvalResult<Self::Value>;
    fn concat_cols(&mut self, parts: &[Self::Value]) -> EvalResult<Self::Value>;
    fn gather_rows(&mut self, table: &Self::Value, ids: &[usize]) -> EvalResult<Self::Value>;

    /// Labels the ops that follow, for error reporting and relu accounting.
    fn mark(&mut self, _site: &str) {}

    /// Max-stabilised softmax along the last axis of a matrix.
    fn softmax_rows(&mut self, x: &Self::Value) -> EvalResult<Self::Value> {
        let m = self.max_axis(x, 1, true)?;
        let shifted = self.sub(x, &m)?;
        let e = self.exp(&shifted)?;
        let s = self.sum_axis(&e, 1, true)?;
        self.div(&e, &s)
    }

    /// Tanh-form GELU, evaluated in the same order as [`Tensor::gelu`].
    fn gelu(&mut self, x: &Self::Value) -> EvalResult<Self::Value> {
        use crate::tensor::{GELU_COEFF, SQRT_2_OVER_PI};
        let x2 = self.mul(x, x)?;
        let x3 = self.mul(&x2, x)?;
        let c = self.scale(&x3, GELU_COEFF)?;
        let inner = self.add(x, &c)?;
        let arg = self.scale(&inner, SQRT_2_OVER_PI)?;
        let t = self.tanh(&arg)?;
        let one = self.constant(Tensor::scalar(1.0))?;
        let onep = self.add(&one, &t)?;
        let half = self.scale(x, 0.5)?;
        self.mul(&half, &onep)
    }
}

/// Plain tensor evaluation.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Engine for Eval {
    type Value = Tensor;

    fn param(&mut self, _name: &str, value: &Tensor) -> EvalResult<Tensor> {
        Ok(value.clone())
    }
    fn constant(&mut self, value: Tensor) -> EvalResult<Tensor> {
        Ok(value)
    }
    fn shape(&self, v: &Tensor) -> Vec<usize> {
        v.shape().to_vec()
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> EvalResult<Tensor> {
        Ok(a.add(b)?)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> EvalResult<Tensor> {
        Ok(a.sub(b)?)
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> EvalResult<Tensor> {
        Ok(a.mul(b)?)
    }
    fn div(&mut self, a: &Tensor, b: &Tensor) -> EvalResult<Tensor> {
        Ok(a.div(b)?)
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> EvalResult<Tensor> {
        Ok(a.matmul(b)?)
    }
    fn scale(&mut self, a: &Tensor, c: f64) -> EvalResult<Tensor> {
        Ok(a.scale(c)?)
    }
    fn relu(&mut self, a: &Tensor) -> EvalResult<Tensor> {
        Ok(a.relu()?)
    }
    fn exp(&mut self, a: &Tensor) -> EvalResult<Tensor> {
        Ok(a.exp()?)
    }
    fn tanh(&mut self, a: &Tensor) -> EvalResult<Tensor> {
        Ok(a.tanh()?)
    }
    fn sqrt(&mut self, a: &Tensor) -> EvalResult<Tensor> {
        Ok(a.sqrt()?)
    }
    fn sum_axis(&mut self, a: &Tensor, axis: usize, keepdim: bool) -> EvalResult<Tensor> {
        Ok(a.sum_axis(axis, keepdim)?)
    }
    fn max_axis(&mut self, a: &Tensor, axis: usize, keepdim: bool) -> EvalResult<Tensor> {
        Ok(a.max_axis(axis, keepdim)?)
    }
    fn transpose(&mut self, a: &Tensor) -> EvalResult<Tensor> {
        Ok(a.transpose()?)
    }
    fn slice_rows(&mut self, a: &Tensor, start: usize, end: usize) -> EvalResult<Tensor> {
        Ok(a.slice_rows(start, end)?)
    }
    fn slice_cols(&mut self, a: &Tensor, start: usize, end: usize) -> EvalResult<Tensor> {
        Ok(a.slice_cols(start, end)?)
    }
    fn concat_rows(&mut self, parts: &[Tensor]) -> EvalResult<Tensor> {
        Ok(Tensor::concat_rows(parts)?)
    }
    fn concat_cols(&mut self, parts: &[Tensor]) -> EvalResult<Tensor> {
        Ok(Tensor::concat_cols(parts)?)
    }
    fn gather_rows(&mut self, table: &Tensor, ids: &[usize]) -> EvalResult<Tensor> {
        Ok(table.gather_rows(ids)?)
    }
}

/// Arithmetic primitives as seen by the op-trace audit. Layout operations
/// (slicing, transposes, concatenation, lookups) are not primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Primitive {
    Add,
    Mul,
    Relu,
    Exp,
    Tanh,
    Div,
    Sqrt,
    Max,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Relu => "relu",
            Primitive::Exp => "exp",
            Primitive::Tanh => "tanh",
            Primitive::Div => "div",
            Primitive::Sqrt => "sqrt",
            Primitive::Max => "max",
        }
    }

    /// The primitives a leveled-HE evaluation can serve (relu by delegation).
    pub fn he_compatible(self) -> bool {
        matches!(self, Primitive::Add | Primitive::Mul | Primitive::Relu)
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpTrace {
    counts: BTreeMap<Primitive, usize>,
    relu_sites: usize,
}

impl OpTrace {
    pub fn count(&self, p: Primitive) -> usize {
        self.counts.get(&p).copied().unwrap_or(0)
    }

    /// Number of relu calls, each of which is one delegation round trip.
    pub fn relu_sites(&self) -> usize {
        self.relu_sites
    }

    pub fn primitives(&self) -> impl Iterator<Item = (Primitive, usize)> + '_ {
        self.counts.iter().map(|(p, c)| (*p, *c))
    }

    /// Primitives outside {add, mul, relu} that were used.
    pub fn offending(&self) -> Vec<Primitive> {
        self.counts.iter().filter(|(p, c)| **c > 0 && !p.he_compatible()).map(|(p, _)| *p).collect()
    }

    pub fn he_compatible(&self) -> bool {
        self.offending().is_empty()
    }

    fn bump(&mut self, p: Primitive) {
        *self.counts.entry(p).or_insert(0) += 1;
    }
}

/// Counts primitive calls while delegating to an inner engine.
///
/// Matmul counts as one mul and one add, subtraction as add, scaling as mul
/// and reduction-sum as add.
#[derive(Debug, Default)]
pub struct Traced<E> {
    pub inner: E,
    pub trace: OpTrace,
}

impl<E: Engine> Traced<E> {
    pub fn new(inner: E) -> Self {
        Traced { inner, trace: OpTrace::default() }
    }
}

impl<E: Engine> Engine for Traced<E> {
    type Value = E::Value;

    fn param(&mut self, name: &str, value: &Tensor) -> EvalResult<E::Value> {
        self.inner.param(name, value)
    }
    fn constant(&mut self, value: Tensor) -> EvalResult<E::Value> {
        self.inner.constant(value)
    }
    fn shape(&self, v: &E::Value) -> Vec<usize> {
        self.inner.shape(v)
    }
    fn add(&mut self, a: &E::Value, b: &E::Value) -> EvalResult<E::Value> {
        self.trace.bump(Primitive::Add);
        self.inner.add(a, b)
    }
    fn sub(&mut self, a: &E::Value, b: &E::Value) -> EvalResult<E::Value> {
        self.trace.bump(Primitive::Add);
        self.inner.sub(a, b)
    }
    fn mul(&mut self, a: &E::Value, b: &E::Value) -> EvalResult<E::Value> {
        self.trace.bump(Primitive::Mul);
        self.inner.mul(a, b)
    }
    fn div(&mut self, a: &E::Value, b: &E::Value) -> EvalResult<E::Value> {
        self.trace.bump(Primitive::Div);
        self.inner.div(a, b)
    }
    fn matmul(&mut self, a: &E::Value, b: &E::Value) -> EvalResult<E::Value> {
        self.trace.bump(Primitive::Mul);
        self.trace.bump(Primitive::Add);
        self.inner.matmul(a, b)
    }
    fn scale(&mut self, a: &E::Value, c: f64) -> EvalResult<E::Value> {
        self.trace.bump(Primitive::Mul);
        self.inner.scale(a, c)
    }
    fn relu(&mut self, a: &E::Value) -> EvalResult<E::Value> {
        self.trace.bump(Primitive::Relu);
        self.trace.relu_sites += 1;
        self.inner.relu(a)
    }
    fn exp(&mut self, a: &E::Value) -> EvalResult<E::Value> {
        self.trace.bump(Primitive::Exp);
        self.inner.exp(a)
    }
    fn tanh(&mut self, a: &E::Value) -> EvalResult<E::Value> {
        self.trace.bump(Primitive::Tanh);
        self.inner.tanh(a)
    }
    fn sqrt(&mut self, a: &E::Value) -> EvalResult<E::Value> {
        self.trace.bump(Primitive::Sqrt);
        self.inner.sqrt(a)
    }
    fn sum_axis(&mut self, a: &E::Value, axis: usize, keepdim: bool) -> EvalResult<E::Value> {
        self.trace.bump(Primitive::Add);
        self.inner.sum_axis(a, axis, keepdim)
    }
    fn max_axis(&mut self, a: &E::Value, axis: usize, keepdim: bool) -> EvalResult<E::Value> {
        self.trace.bump(Primitive::Max);
        self.inner.max_axis(a, axis, keepdim)
    }
    fn transpose(&mut self, a: &E::Value) -> EvalResult<E::Value> {
        self.inner.transpose(a)
    }
    fn slice_rows(&mut self, a: &E::Value, start: usize, end: usize) -> EvalResult<E::Value> {
        self.inner.slice_rows(a, start, end)
    }
    fn slice_cols(&mut self, a: &E::Value, start: usize, end: usize) -> EvalResult<E::Value> {
        self.inner.slice_cols(a, start, end)
    }
    fn concat_rows(&mut self, parts: &[E::Value]) -> EvalResult<E::Value> {
        self.inner.concat_rows(parts)
    }
    fn concat_cols(&mut self, parts: &[E::Value]) -> EvalResult<E::Value> {
        self.inner.concat_cols(parts)
    }
    fn gather_rows(&mut self, table: &E::Value, ids: &[usize]) -> EvalResult<E::Value> {
        self.inner.gather_rows(table, ids)
    }
    fn mark(&mut self, site: &str) {
        self.inner.mark(site)
    }
}

/// Records the forward pass on an autodiff [`Tape`].
///
/// Each named parameter becomes one leaf, shared across uses; it requires a
/// gradient only if `trainable(name)` holds.
pub struct TapeEngine<'f> {
    pub tape: Tape,
    params: HashMap<String, Var>,
    trainable: Box<dyn Fn(&str) -> bool + 'f>,
}

impl<'f> TapeEngine<'f> {
    pub fn new(trainable: impl Fn(&str) -> bool + 'f) -> Self {
        TapeEngine { tape: Tape::new(), params: HashMap::new(), trainable: Box::new(trainable) }
    }

    /// Parameter leaves that take part in training.
    pub fn trainable_params(&self) -> Vec<(String, Var)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter(|(_, v)| self.tape.requires_grad(**v))
            .map(|(n, v)| (n.clone(), *v))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

impl Engine for TapeEngine<'_> {
    type Value = Var;

    fn param(&mut self, name: &str, value: &Tensor) -> EvalResult<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let v = self.tape.leaf(value.clone(), (self.trainable)(name));
        self.params.insert(name.to_string(), v);
        Ok(v)
    }
    fn constant(&mut self, value: Tensor) -> EvalResult<Var> {
        Ok(self.tape.leaf(value, false))
    }
    fn shape(&self, v: &Var) -> Vec<usize> {
        self.tape.value(*v).shape().to_vec()
    }
    fn add(&mut self, a: &Var, b: &Var) -> EvalResult<Var> {
        Ok(self.tape.add(*a, *b)?)
    }
    fn sub(&mut self, a: &Var, b: &Var) -> EvalResult<Var> {
        Ok(self.tape.sub(*a, *b)?)
    }
    fn mul(&mut self, a: &Var, b: &Var) -> EvalResult<Var> {
        Ok(self.tape.mul(*a, *b)?)
    }
    fn div(&mut self, a: &Var, b: &Var) -> EvalResult<Var> {
        Ok(self.tape.div(*a, *b)?)
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> EvalResult<Var> {
        Ok(self.tape.matmul(*a, *b)?)
    }
    fn scale(&mut self, a: &Var, c: f64) -> EvalResult<Var> {
        Ok(self.tape.scale(*a, c)?)
    }
    fn relu(&mut self, a: &Var) -> EvalResult<Var> {
        Ok(self.tape.relu(*a)?)
    }
    fn exp(&mut self, a: &Var) -> EvalResult<Var> {
        Ok(self.tape.exp(*a)?)
    }
    fn tanh(&mut self, a: &Var) -> EvalResult<Var> {
        Ok(self.tape.tanh(*a)?)
    }
    fn sqrt(&mut self, a: &Var) -> EvalResult<Var> {
        Ok(self.tape.sqrt(*a)?)
    }
    fn sum_axis(&mut self, a: &Var, axis: usize, keepdim: bool) -> EvalResult<Var> {
        Ok(self.tape.sum_axis(*a, axis, keepdim)?)
    }
    fn max_axis(&mut self, a: &Var, axis: usize, keepdim: bool) -> EvalResult<Var> {
        Ok(self.tape.max_axis(*a, axis, keepdim)?)
    }
    fn transpose(&mut self, a: &Var) -> EvalResult<Var> {
        Ok(self.tape.transpose(*a)?)
    }
    fn slice_rows(&mut self, a: &Var, start: usize, end: usize) -> EvalResult<Var> {
        Ok(self.tape.slice_rows(*a, start, end)?)
    }
    fn slice_cols(&mut self, a: &Var, start: usize, end: usize) -> EvalResult<Var> {
        Ok(self.tape.slice_cols(*a, start, end)?)
    }
    fn concat_rows(&mut self, parts: &[Var]) -> EvalResult<Var> {
        Ok(self.tape.concat_rows(parts)?)
    }
    fn concat_cols(&mut self, parts: &[Var]) -> EvalResult<Var> {
        Ok(self.tape.concat_cols(parts)?)
    }
    fn gather_rows(&mut self, table: &Var, ids: &[usize]) -> EvalResult<Var> {
        Ok(self.tape.gather_rows(*table, ids)?)
    }
}
