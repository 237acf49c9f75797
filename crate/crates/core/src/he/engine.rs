use super::{CipherTensor, HeContext, HeError, HeResult, KeyPair};
use crate::engine::{Engine, EvalError, EvalResult};
use crate::model::{ModelError, TransformerModel};
use crate::tensor::{layout, Tensor};

/// Server-side value: model weights stay plaintext, activations derived
/// from the query are ciphertexts.
#[derive(Debug, Clone, PartialEq)]
pub enum HeValue {
    Plain(Tensor),
    Cipher(CipherTensor),
}

impl HeValue {
    pub fn shape(&self) -> &[usize] {
        match self {
            HeValue::Plain(t) => t.shape(),
            HeValue::Cipher(c) => c.shape(),
        }
    }

    pub fn into_cipher(self) -> HeResult<CipherTensor> {
        match self {
            HeValue::Cipher(c) => Ok(c),
            HeValue::Plain(_) => Err(HeError::UnsupportedOp("plaintext result")),
        }
    }
}

/// Relu on a ciphertext is delegated to the key holder, who answers with a
/// fresh encryption at depth zero.
pub trait ReluChannel {
    fn relu(&mut self, ct: CipherTensor) -> HeResult<CipherTensor>;
}

/// Key-holding relu service for single-process use.
#[derive(Debug)]
pub struct LocalRelu<'k> {
    pub ctx: HeContext,
    pub key: &'k KeyPair,
}

impl ReluChannel for LocalRelu<'_> {
    fn relu(&mut self, ct: CipherTensor) -> HeResult<CipherTensor> {
        let x = self.ctx.decrypt(&ct, self.key)?;
        self.ctx.encrypt(&x.relu()?, self.key)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DepthReport {
    /// Deepest ciphertext produced during the evaluation.
    pub max_depth: u16,
    pub relu_round_trips: u32,
    pub budget: u16,
}

pub struct HeEngine<'a> {
    ctx: &'a HeContext,
    channel: &'a mut dyn ReluChannel,
    site: String,
    report: DepthReport,
}

fn tensor_err(e: impl Into<crate::tensor::TensorError>) -> EvalError {
    EvalError::Tensor(e.into())
}

impl<'a> HeEngine<'a> {
    pub fn new(ctx: &'a HeContext, channel: &'a mut dyn ReluChannel) -> Self {
        HeEngine {
            ctx,
            channel,
            site: "input".into(),
            report: DepthReport { budget: ctx.level_budget(), ..DepthReport::default() },
        }
    }

    pub fn report(&self) -> DepthReport {
        self.report
    }

    pub fn input(&mut self, ct: CipherTensor) -> HeValue {
        self.record(&ct);
        HeValue::Cipher(ct)
    }

    fn record(&mut self, ct: &CipherTensor) {
        self.report.max_depth = self.report.max_depth.max(ct.depth());
    }

    fn at_site(&self, e: HeError) -> EvalError {
        match e {
            HeError::DepthExceeded { site, depth, budget } => {
                HeError::DepthExceeded { site: format!("{} ({site})", self.site), depth, budget }.into()
            }
            other => other.into(),
        }
    }

    fn cipher(&mut self, r: HeResult<CipherTensor>) -> EvalResult<HeValue> {
        let ct = r.map_err(|e| self.at_site(e))?;
        self.record(&ct);
        Ok(HeValue::Cipher(ct))
    }

    fn aligned(&self, a: &CipherTensor, b: &CipherTensor) -> EvalResult<(CipherTensor, CipherTensor)> {
        Ok(self.ctx.align(a, b)?)
    }

    /// `sum_j colbcast(a[:, j]) * rowbcast(b[j, :])`, accumulated in the same
    /// order as the plaintext kernel.
    fn lowered(&mut self, a: &HeValue, b: &HeValue) -> EvalResult<HeValue> {
        let (m, k) = layout::expect_matrix("matmul", a.shape()).map_err(tensor_err)?;
        let (k2, n) = layout::expect_matrix("matmul", b.shape()).map_err(tensor_err)?;
        if k != k2 || k == 0 {
            return Err(tensor_err(crate::tensor::TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            }));
        }
        let mut acc: Option<HeValue> = None;
        for j in 0..k {
            let col = self.slice_cols(a, j, j + 1)?;
            let row = self.slice_rows(b, j, j + 1)?;
            let term = self.mul(&col, &row)?;
            acc = Some(match acc {
                None => term,
                Some(s) => self.add(&s, &term)?,
            });
        }
        Ok(acc.expect("k > 0"))
    }
}

impl Engine for HeEngine<'_> {
    type Value = HeValue;

    fn param(&mut self, _name: &str, value: &Tensor) -> EvalResult<HeValue> {
        Ok(HeValue::Plain(value.clone()))
    }

    fn constant(&mut self, value: Tensor) -> EvalResult<HeValue> {
        Ok(HeValue::Plain(value))
    }

    fn shape(&self, v: &HeValue) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn add(&mut self, a: &HeValue, b: &HeValue) -> EvalResult<HeValue> {
        match (a, b) {
            (HeValue::Plain(x), HeValue::Plain(y)) => Ok(HeValue::Plain(x.add(y)?)),
            (HeValue::Cipher(x), HeValue::Plain(p)) | (HeValue::Plain(p), HeValue::Cipher(x)) => {
                let r = self.ctx.add_plain(x, p);
                self.cipher(r)
            }
            (HeValue::Cipher(x), HeValue::Cipher(y)) => {
                let (x, y) = self.aligned(x, y)?;
                let r = self.ctx.add(&x, &y);
                self.cipher(r)
            }
        }
    }

    fn sub(&mut self, a: &HeValue, b: &HeValue) -> EvalResult<HeValue> {
        match (a, b) {
            (HeValue::Plain(x), HeValue::Plain(y)) => Ok(HeValue::Plain(x.sub(y)?)),
            (HeValue::Cipher(x), HeValue::Plain(p)) => {
                let r = self.ctx.sub_plain(x, p);
                self.cipher(r)
            }
            (HeValue::Plain(p), HeValue::Cipher(x)) => {
                let r = self.ctx.plain_sub(p, x);
                self.cipher(r)
            }
            (HeValue::Cipher(x), HeValue::Cipher(y)) => {
                let (x, y) = self.aligned(x, y)?;
                let r = self.ctx.sub(&x, &y);
                self.cipher(r)
            }
        }
    }

    fn mul(&mut self, a: &HeValue, b: &HeValue) -> EvalResult<HeValue> {
        match (a, b) {
            (HeValue::Plain(x), HeValue::Plain(y)) => Ok(HeValue::Plain(x.mul(y)?)),
            (HeValue::Cipher(x), HeValue::Plain(p)) | (HeValue::Plain(p), HeValue::Cipher(x)) => {
                let r = self.ctx.mul_plain(x, p);
                self.cipher(r)
            }
            (HeValue::Cipher(x), HeValue::Cipher(y)) => {
                let (x, y) = self.aligned(x, y)?;
                let r = self.ctx.mul(&x, &y);
                self.cipher(r)
            }
        }
    }

    fn div(&mut self, a: &HeValue, b: &HeValue) -> EvalResult<HeValue> {
        match (a, b) {
            (HeValue::Plain(x), HeValue::Plain(y)) => Ok(HeValue::Plain(x.div(y)?)),
            _ => Err(HeError::UnsupportedOp("div").into()),
        }
    }

    fn matmul(&mut self, a: &HeValue, b: &HeValue) -> EvalResult<HeValue> {
        match (a, b) {
            (HeValue::Plain(x), HeValue::Plain(y)) => Ok(HeValue::Plain(x.matmul(y)?)),
            (HeValue::Cipher(x), HeValue::Plain(w)) => {
                let r = self.ctx.lower_matmul(x, w);
                self.cipher(r)
            }
            _ => self.lowered(a, b),
        }
    }

    fn scale(&mut self, a: &HeValue, c: f64) -> EvalResult<HeValue> {
        match a {
            HeValue::Plain(x) => Ok(HeValue::Plain(x.scale(c)?)),
            HeValue::Cipher(x) => {
                let r = self.ctx.mul_plain(x, &Tensor::scalar(c));
                self.cipher(r)
            }
        }
    }

    fn relu(&mut self, a: &HeValue) -> EvalResult<HeValue> {
        match a {
            HeValue::Plain(x) => Ok(HeValue::Plain(x.relu()?)),
            HeValue::Cipher(x) => {
                self.report.relu_round_trips += 1;
                let r = self.channel.relu(x.clone());
                self.cipher(r)
            }
        }
    }

    fn exp(&mut self, a: &HeValue) -> EvalResult<HeValue> {
        match a {
            HeValue::Plain(x) => Ok(HeValue::Plain(x.exp()?)),
            HeValue::Cipher(_) => Err(HeError::UnsupportedOp("exp").into()),
        }
    }

    fn tanh(&mut self, a: &HeValue) -> EvalResult<HeValue> {
        match a {
            HeValue::Plain(x) => Ok(HeValue::Plain(x.tanh()?)),
            HeValue::Cipher(_) => Err(HeError::UnsupportedOp("tanh").into()),
        }
    }

    fn sqrt(&mut self, a: &HeValue) -> EvalResult<HeValue> {
        match a {
            HeValue::Plain(x) => Ok(HeValue::Plain(x.sqrt()?)),
            HeValue::Cipher(_) => Err(HeError::UnsupportedOp("sqrt").into()),
        }
    }

    fn sum_axis(&mut self, a: &HeValue, axis: usize, keepdim: bool) -> EvalResult<HeValue> {
        match a {
            HeValue::Plain(x) => Ok(HeValue::Plain(x.sum_axis(axis, keepdim)?)),
            HeValue::Cipher(x) => {
                let r = self.ctx.sum_axis(x, axis, keepdim);
                self.cipher(r)
            }
        }
    }

    fn max_axis(&mut self, a: &HeValue, axis: usize, keepdim: bool) -> EvalResult<HeValue> {
        match a {
            HeValue::Plain(x) => Ok(HeValue::Plain(x.max_axis(axis, keepdim)?)),
            HeValue::Cipher(_) => Err(HeError::UnsupportedOp("max").into()),
        }
    }

    fn transpose(&mut self, a: &HeValue) -> EvalResult<HeValue> {
        match a {
            HeValue::Plain(x) => Ok(HeValue::Plain(x.transpose()?)),
            HeValue::Cipher(x) => Ok(HeValue::Cipher(self.ctx.transpose(x)?)),
        }
    }

    fn slice_rows(&mut self, a: &HeValue, start: usize, end: usize) -> EvalResult<HeValue> {
        match a {
            HeValue::Plain(x) => Ok(HeValue::Plain(x.slice_rows(start, end)?)),
            HeValue::Cipher(x) => Ok(HeValue::Cipher(self.ctx.slice_rows(x, start, end)?)),
        }
    }

    fn slice_cols(&mut self, a: &HeValue, start: usize, end: usize) -> EvalResult<HeValue> {
        match a {
            HeValue::Plain(x) => Ok(HeValue::Plain(x.slice_cols(start, end)?)),
            HeValue::Cipher(x) => Ok(HeValue::Cipher(self.ctx.slice_cols(x, start, end)?)),
        }
    }

    fn concat_rows(&mut self, parts: &[HeValue]) -> EvalResult<HeValue> {
        concat(self.ctx, parts, true)
    }

    fn concat_cols(&mut self, parts: &[HeValue]) -> EvalResult<HeValue> {
        concat(self.ctx, parts, false)
    }

    fn gather_rows(&mut self, table: &HeValue, ids: &[usize]) -> EvalResult<HeValue> {
        match table {
            HeValue::Plain(x) => Ok(HeValue::Plain(x.gather_rows(ids)?)),
            HeValue::Cipher(_) => Err(HeError::UnsupportedOp("gather").into()),
        }
    }

    fn mark(&mut self, site: &str) {
        self.site = site.to_string();
    }

    fn softmax_rows(&mut self, x: &HeValue) -> EvalResult<HeValue> {
        match x {
            HeValue::Plain(t) => Ok(HeValue::Plain(t.softmax(1)?)),
            HeValue::Cipher(_) => Err(HeError::UnsupportedOp("exp").into()),
        }
    }

    fn gelu(&mut self, x: &HeValue) -> EvalResult<HeValue> {
        match x {
            HeValue::Plain(t) => Ok(HeValue::Plain(t.gelu()?)),
            HeValue::Cipher(_) => Err(HeError::UnsupportedOp("gelu").into()),
        }
    }
}

fn concat(ctx: &HeContext, parts: &[HeValue], rows: bool) -> EvalResult<HeValue> {
    if parts.iter().all(|p| matches!(p, HeValue::Plain(_))) {
        let ts: Vec<Tensor> = parts
            .iter()
            .map(|p| match p {
                HeValue::Plain(t) => t.clone(),
                HeValue::Cipher(_) => unreachable!(),
            })
            .collect();
        return Ok(HeValue::Plain(if rows { Tensor::concat_rows(&ts)? } else { Tensor::concat_cols(&ts)? }));
    }
    let cts = parts
        .iter()
        .map(|p| match p {
            HeValue::Cipher(c) => Ok(c.clone()),
            HeValue::Plain(_) => Err(HeError::UnsupportedOp("concat of plaintext and ciphertext")),
        })
        .collect::<HeResult<Vec<_>>>()?;
    Ok(HeValue::Cipher(if rows { ctx.concat_rows(&cts)? } else { ctx.concat_cols(&cts)? }))
}

/// Evaluates an HE-ready model on an encrypted `[seq x hidden]` embedding
/// whose first `seq_len` rows are real tokens and the rest padding.
pub fn he_forward(
    model: &TransformerModel,
    input: CipherTensor,
    seq_len: usize,
    ctx: &HeContext,
    channel: &mut dyn ReluChannel,
) -> HeResult<(CipherTensor, DepthReport)> {
    let rows = input.shape().first().copied().unwrap_or(0);
    let mask: Vec<bool> = (0..rows).map(|i| i >= seq_len).collect();
    let mut eng = HeEngine::new(ctx, channel);
    let x = eng.input(input);
    let out = model.forward_embeddings(&mut eng, x, &[mask]).map_err(|e| match e {
        ModelError::Eval(EvalError::He(h)) => h,
        ModelError::Eval(EvalError::Tensor(t)) => HeError::Tensor(t),
        other => HeError::Model(other.to_string()),
    })?;
    let report = eng.report();
    Ok((out.into_cipher()?, report))
}
