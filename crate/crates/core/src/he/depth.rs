//! Static multiplicative-depth analysis over a recorded op graph.

use crate::engine::{Engine, Eval, EvalResult};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DagOp {
    /// Encrypted query input.
    Input,
    /// Model weight or constant.
    Plain,
    Add,
    Mul,
    Relu,
    /// Slot movement with no arithmetic.
    Layout,
    /// Anything outside the HE contract.
    Other(&'static str),
}

#[derive(Debug, Clone)]
pub struct DagNode {
    pub op: DagOp,
    pub inputs: Vec<usize>,
}

/// Engine that evaluates in plaintext while recording the op graph.
#[derive(Debug, Default)]
pub struct DagRecorder {
    pub nodes: Vec<DagNode>,
    values: Vec<Tensor>,
}

impl DagRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, x: Tensor) -> usize {
        self.push(DagOp::Input, vec![], x)
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.values[id]
    }

    fn push(&mut self, op: DagOp, inputs: Vec<usize>, v: Tensor) -> usize {
        self.nodes.push(DagNode { op, inputs });
        self.values.push(v);
        self.nodes.len() - 1
    }

    fn node(&mut self, op: DagOp, inputs: &[usize], f: impl FnOnce(&mut Eval, &[&Tensor]) -> EvalResult<Tensor>) -> EvalResult<usize> {
        let args: Vec<Tensor> = inputs.iter().map(|&i| self.values[i].clone()).collect();
        let refs: Vec<&Tensor> = args.iter().collect();
        let v = f(&mut Eval, &refs)?;
        Ok(self.push(op, inputs.to_vec(), v))
    }
}

impl Engine for DagRecorder {
    type Value = usize;

    fn param(&mut self, _name: &str, value: &Tensor) -> EvalResult<usize> {
        Ok(self.push(DagOp::Plain, vec![], value.clone()))
    }
    fn constant(&mut self, value: Tensor) -> EvalResult<usize> {
        Ok(self.push(DagOp::Plain, vec![], value))
    }
    fn shape(&self, v: &usize) -> Vec<usize> {
        self.values[*v].shape().to_vec()
    }
    fn add(&mut self, a: &usize, b: &usize) -> EvalResult<usize> {
        self.node(DagOp::Add, &[*a, *b], |e, x| e.add(x[0], x[1]))
    }
    fn sub(&mut self, a: &usize, b: &usize) -> EvalResult<usize> {
        self.node(DagOp::Add, &[*a, *b], |e, x| e.sub(x[0], x[1]))
    }
    fn mul(&mut self, a: &usize, b: &usize) -> EvalResult<usize> {
        self.node(DagOp::Mul, &[*a, *b], |e, x| e.mul(x[0], x[1]))
    }
    fn div(&mut self, a: &usize, b: &usize) -> EvalResult<usize> {
        self.node(DagOp::Other("div"), &[*a, *b], |e, x| e.div(x[0], x[1]))
    }
    fn matmul(&mut self, a: &usize, b: &usize) -> EvalResult<usize> {
        self.node(DagOp::Mul, &[*a, *b], |e, x| e.matmul(x[0], x[1]))
    }
    fn scale(&mut self, a: &usize, c: f64) -> EvalResult<usize> {
        self.node(DagOp::Mul, &[*a], |e, x| e.scale(x[0], c))
    }
    fn relu(&mut self, a: &usize) -> EvalResult<usize> {
        self.node(DagOp::Relu, &[*a], |e, x| e.relu(x[0]))
    }
    fn exp(&mut self, a: &usize) -> EvalResult<usize> {
        self.node(DagOp::Other("exp"), &[*a], |e, x| e.exp(x[0]))
    }
    fn tanh(&mut self, a: &usize) -> EvalResult<usize> {
        self.node(DagOp::Other("tanh"), &[*a], |e, x| e.tanh(x[0]))
    }
    fn sqrt(&mut self, a: &usize) -> EvalResult<usize> {
        self.node(DagOp::Other("sqrt"), &[*a], |e, x| e.sqrt(x[0]))
    }
    fn sum_axis(&mut self, a: &usize, axis: usize, keepdim: bool) -> EvalResult<usize> {
        self.node(DagOp::Add, &[*a], |e, x| e.sum_axis(x[0], axis, keepdim))
    }
    fn max_axis(&mut self, a: &usize, axis: usize, keepdim: bool) -> EvalResult<usize> {
        self.node(DagOp::Other("max"), &[*a], |e, x| e.max_axis(x[0], axis, keepdim))
    }
    fn transpose(&mut self, a: &usize) -> EvalResult<usize> {
        self.node(DagOp::Layout, &[*a], |e, x| e.transpose(x[0]))
    }
    fn slice_rows(&mut self, a: &usize, start: usize, end: usize) -> EvalResult<usize> {
        self.node(DagOp::Layout, &[*a], |e, x| e.slice_rows(x[0], start, end))
    }
    fn slice_cols(&mut self, a: &usize, start: usize, end: usize) -> EvalResult<usize> {
        self.node(DagOp::Layout, &[*a], |e, x| e.slice_cols(x[0], start, end))
    }
    fn concat_rows(&mut self, parts: &[usize]) -> EvalResult<usize> {
        self.node(DagOp::Layout, parts, |e, x| {
            let owned: Vec<Tensor> = x.iter().map(|t| (*t).clone()).collect();
            e.concat_rows(&owned)
        })
    }
    fn concat_cols(&mut self, parts: &[usize]) -> EvalResult<usize> {
        self.node(DagOp::Layout, parts, |e, x| {
            let owned: Vec<Tensor> = x.iter().map(|t| (*t).clone()).collect();
            e.concat_cols(&owned)
        })
    }
    fn gather_rows(&mut self, table: &usize, ids: &[usize]) -> EvalResult<usize> {
        self.node(DagOp::Layout, &[*table], |e, x| e.gather_rows(x[0], ids))
    }
}

/// Depth of every ciphertext-valued node reachable from `output`, computed
/// by memoised depth-first search. Plain nodes carry no depth; a product
/// with any ciphertext operand adds one; relu restarts at zero.
///
/// Returns `(depth of output, maximum depth over the reachable graph)`.
pub fn static_depth(nodes: &[DagNode], output: usize) -> (Option<u16>, u16) {
    let mut memo: Vec<Option<Option<u16>>> = vec![None; nodes.len()];
    let mut stack = vec![(output, false)];
    while let Some((id, expanded)) = stack.pop() {
        if memo[id].is_some() {
            continue;
        }
        let node = &nodes[id];
        if !expanded {
            stack.push((id, true));
            for &i in &node.inputs {
                if memo[i].is_none() {
                    stack.push((i, false));
                }
            }
            continue;
        }
        let deepest = node.inputs.iter().filter_map(|&i| memo[i].flatten()).max();
        let d = match node.op {
            DagOp::Input => Some(0),
            DagOp::Plain => None,
            DagOp::Add | DagOp::Layout | DagOp::Other(_) => deepest,
            DagOp::Mul => deepest.map(|d| d + 1),
            DagOp::Relu => deepest.map(|_| 0),
        };
        memo[id] = Some(d);
    }
    let max = memo.iter().filter_map(|m| m.flatten()).max().unwrap_or(0);
    (memo[output].flatten(), max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_rules() {
        let mut g = DagRecorder::new();
        let x = g.input(Tensor::vector(vec![1.0, -2.0]));
        let w = g.param("w", &Tensor::vector(vec![3.0, 4.0])).unwrap();
        let ww = g.mul(&w, &w).unwrap();
        let a = g.mul(&x, &ww).unwrap();
        let b = g.mul(&a, &x).unwrap();
        let s = g.add(&b, &x).unwrap();
        assert_eq!(static_depth(&g.nodes, s), (Some(2), 2));
        let r = g.relu(&s).unwrap();
        let c = g.mul(&r, &w).unwrap();
        assert_eq!(static_depth(&g.nodes, c), (Some(1), 2));
        assert_eq!(static_depth(&g.nodes, ww), (None, 0));
    }
}
