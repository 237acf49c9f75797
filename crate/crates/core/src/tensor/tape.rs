//! Wengert-list reverse-mode autodiff.
//!
//! Ops append nodes holding their forward value; [`Tape::backward`] walks the
//! list in reverse and accumulates adjoints. Nodes that do not depend on a
//! `requires_grad` leaf are skipped.

use super::{layout, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Exp(usize),
    Tanh(usize),
    Sqrt(usize),
    SumAxis { x: usize, axis: usize, keepdim: bool },
    Transpose(usize),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows { table: usize, ids: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<Option<usize>>, probs: Tensor, count: usize },
    MeanSquared(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A non-differentiable copy of `v`'s value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let g = self.nodes[x.0].needs_grad;
        self.push(value, op, g)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let g = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(value, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Mul(a.0, b.0)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).div(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Div(a.0, b.0)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::MatMul(a.0, b.0)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).scale(c)?;
        Ok(self.unary(x, v, Op::Scale(x.0, c)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).relu()?;
        Ok(self.unary(x, v, Op::Relu(x.0)))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).exp()?;
        Ok(self.unary(x, v, Op::Exp(x.0)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).tanh()?;
        Ok(self.unary(x, v, Op::Tanh(x.0)))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).sqrt()?;
        Ok(self.unary(x, v, Op::Sqrt(x.0)))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let v = self.value(x).sum_axis(axis, keepdim)?;
        Ok(self.unary(x, v, Op::SumAxis { x: x.0, axis, keepdim }))
    }

    /// Max along an axis, detached from the graph.
    pub fn max_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let v = self.value(x).max_axis(axis, keepdim)?;
        Ok(self.leaf(v, false))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        Ok(self.unary(x, v, Op::Transpose(x.0)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x).slice_rows(start, end)?;
        Ok(self.unary(x, v, Op::SliceRows { x: x.0, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x).slice_cols(start, end)?;
        Ok(self.unary(x, v, Op::SliceCols { x: x.0, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|p| self.value(*p).clone()).collect();
        let v = Tensor::concat_rows(&values)?;
        let g = parts.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push(v, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|p| self.value(*p).clone()).collect();
        let v = Tensor::concat_cols(&values)?;
        let g = parts.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), g))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = self.value(table).gather_rows(ids)?;
        Ok(self.unary(table, v, Op::GatherRows { table: table.0, ids: ids.to_vec() }))
    }

    /// Mean cross-entropy over the rows of `logits` that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, classes) = layout::expect_matrix("cross_entropy", lv.shape())?;
        if rows != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let probs = lv.softmax(1)?;
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= classes {
                    return Err(TensorError::IndexOutOfRange { index: t, len: classes });
                }
                total -= probs.at(r, t).max(1e-300).ln();
                count += 1;
            }
        }
        if count == 0 {
            return Err(TensorError::Empty("cross_entropy"));
        }
        let loss = Tensor::scalar(total / count as f64);
        Ok(self.unary(logits, loss, Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs, count }))
    }

    /// `mean((a - b)^2)` over all elements; shapes must match.
    pub fn mean_squared(&mut self, a: Var, b: Var) -> Result<Var> {
        let loss = self.value(a).mse(self.value(b))?;
        if !loss.is_finite() {
            return Err(TensorError::NonFinite { op: "mean_squared" });
        }
        Ok(self.binary(a, b, Tensor::scalar(loss), Op::MeanSquared(a.0, b.0)))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], idx: usize, g: Tensor) -> Result<()> {
        if !self.nodes[idx].needs_grad {
            return Ok(());
        }
        let target = self.nodes[idx].value.shape();
        let g = if g.shape() == target {
            g
        } else {
            Tensor::from_parts(target.to_vec(), layout::reduce_to_shape(g.data(), g.shape(), target))
        };
        grads[idx] = Some(match grads[idx].take() {
            Some(prev) => prev.add(&g)?,
            None => g,
        });
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |j: usize| &self.nodes[j].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0)?)?;
            }
            Op::Mul(a, b) => {
                if self.nodes[*a].needs_grad {
                    self.accumulate(grads, *a, g.mul(val(*b))?)?;
                }
                if self.nodes[*b].needs_grad {
                    self.accumulate(grads, *b, g.mul(val(*a))?)?;
                }
            }
            Op::Div(a, b) => {
                if self.nodes[*a].needs_grad {
                    self.accumulate(grads, *a, g.div(val(*b))?)?;
                }
                if self.nodes[*b].needs_grad {
                    // d(a/b)/db = -(a/b)/b
                    let q = &self.nodes[i].value;
                    self.accumulate(grads, *b, g.mul(q)?.div(val(*b))?.scale(-1.0)?)?;
                }
            }
            Op::MatMul(a, b) => {
                if self.nodes[*a].needs_grad {
                    self.accumulate(grads, *a, g.matmul(&val(*b).transpose()?)?)?;
                }
                if self.nodes[*b].needs_grad {
                    self.accumulate(grads, *b, val(*a).transpose()?.matmul(g)?)?;
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.scale(*c)?)?,
            Op::Relu(x) => {
                let mask = val(*x).map("relu_grad", |v| if v > 0.0 { 1.0 } else { 0.0 })?;
                self.accumulate(grads, *x, g.mul(&mask)?)?;
            }
            Op::Exp(x) => self.accumulate(grads, *x, g.mul(&self.nodes[i].value)?)?,
            Op::Tanh(x) => {
                let d = self.nodes[i].value.map("tanh_grad", |t| 1.0 - t * t)?;
                self.accumulate(grads, *x, g.mul(&d)?)?;
            }
            Op::Sqrt(x) => {
                let d = self.nodes[i].value.map("sqrt_grad", |s| 0.5 / s)?;
                self.accumulate(grads, *x, g.mul(&d)?)?;
            }
            Op::SumAxis { x, axis, keepdim } => {
                let shape = val(*x).shape();
                let g = if *keepdim {
                    g.clone()
                } else {
                    let mut kept = shape.to_vec();
                    kept[*axis] = 1;
                    g.reshape(&kept)?
                };
                // broadcasting against zeros expands the reduced axis back
                self.accumulate(grads, *x, Tensor::zeros(shape).add(&g)?)?;
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()?)?,
            Op::SliceRows { x, start } => {
                let shape = val(*x).shape();
                let cols = shape[1];
                let mut out = vec![0.0; shape[0] * cols];
                out[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, Tensor::from_parts(shape.to_vec(), out))?;
            }
            Op::SliceCols { x, start } => {
                let shape = val(*x).shape();
                let (rows, cols) = (shape[0], shape[1]);
                let w = g.shape()[1];
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    out[r * cols + start..r * cols + start + w].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape.to_vec(), out))?;
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for &p in parts {
                    let r = val(p).shape()[0];
                    self.accumulate(grads, p, g.slice_rows(row, row + r)?)?;
                    row += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let c = val(p).shape()[1];
                    self.accumulate(grads, p, g.slice_cols(col, col + c)?)?;
                    col += c;
                }
            }
            Op::GatherRows { table, ids } => {
                let shape = val(*table).shape();
                let cols = shape[1];
                let mut out = vec![0.0; shape[0] * cols];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        out[id * cols + c] += g.data()[r * cols + c];
                    }
                }
                self.accumulate(grads, *table, Tensor::from_parts(shape.to_vec(), out))?;
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let classes = probs.shape()[1];
                let scale = g.item() / *count as f64;
                let mut out = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for c in 0..classes {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            out[r * classes + c] = (probs.at(r, c) - onehot) * scale;
                        }
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_parts(probs.shape().to_vec(), out))?;
            }
            Op::MeanSquared(a, b) => {
                let n = val(*a).len().max(1) as f64;
                let d = val(*a).sub(val(*b))?.scale(2.0 * g.item() / n)?;
                if self.nodes[*b].needs_grad {
                    self.accumulate(grads, *b, d.scale(-1.0)?)?;
                }
                self.accumulate(grads, *a, d)?;
            }
        }
        Ok(())
    }
}
