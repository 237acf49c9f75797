//! Task fine-tuning and evaluation.

use thiserror::Error;

use crate::data::{epoch_order, make_batch, Example, Label, TaskData, TaskKind};
use crate::engine::{Engine, Eval, TapeEngine};
use crate::model::{Batch, ModelError, TransformerModel};
use crate::tensor::{AdamW, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training examples")]
    EmptyData,
    #[error("label does not match {kind} task")]
    LabelKind { kind: TaskKind },
    #[error("loss became non-finite at epoch {epoch} step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<crate::engine::EvalError> for TrainError {
    fn from(e: crate::engine::EvalError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type TrainResult<T> = Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Keep the epoch-end weights with the best dev metric.
    pub select_best: bool,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig { epochs: 5, batch: 32, lr: 3e-4, weight_decay: 0.1, seed: 0, select_best: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneReport {
    /// Dev metric after each epoch.
    pub dev_metrics: Vec<f64>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub steps: usize,
}

/// Chunks `examples` in order into padded batches.
pub fn batches(examples: &[Example], order: &[usize], size: usize, seq: usize) -> TrainResult<Vec<(Batch, Vec<usize>)>> {
    order
        .chunks(size.max(1))
        .map(|idx| {
            let ex: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
            Ok((make_batch(&ex, seq)?, idx.to_vec()))
        })
        .collect()
}

fn class_targets(kind: TaskKind, examples: &[&Example], seq: usize) -> TrainResult<Vec<Option<usize>>> {
    let mut out = Vec::new();
    for e in examples {
        match (&e.label, kind) {
            (Label::Class(c), TaskKind::Classify) => out.push(Some(*c)),
            (Label::Tags(tags), TaskKind::Tag) => {
                out.extend((0..seq).map(|i| tags.get(i).copied().flatten()));
            }
            _ => return Err(TrainError::LabelKind { kind }),
        }
    }
    Ok(out)
}

fn score_targets(examples: &[&Example]) -> TrainResult<Tensor> {
    let v = examples
        .iter()
        .map(|e| match e.label {
            Label::Score(s) => Ok(s),
            _ => Err(TrainError::LabelKind { kind: TaskKind::Regress }),
        })
        .collect::<TrainResult<Vec<f64>>>()?;
    Ok(Tensor::matrix(v.len(), 1, v)?)
}

/// Fine-tunes the parameters selected by `trainable` on the task loss.
pub fn fine_tune(
    model: &mut TransformerModel,
    data: &TaskData,
    cfg: &FineTuneConfig,
    trainable: &dyn Fn(&str) -> bool,
) -> TrainResult<FineTuneReport> {
    if data.train.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let seq = data.seq_len;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut best: Option<(f64, usize, TransformerModel)> = None;
    let mut dev_metrics = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.train.len(), cfg.seed, epoch);
        for (step, idx) in order.chunks(cfg.batch.max(1)).enumerate() {
            let ex: Vec<&Example> = idx.iter().map(|&i| &data.train[i]).collect();
            let batch = make_batch(&ex, seq)?;
            let mut eng = TapeEngine::new(trainable);
            let logits = model.forward_tokens(&mut eng, &batch)?;
            let loss = match data.kind {
                TaskKind::Regress => {
                    let t = eng.constant(score_targets(&ex)?)?;
                    eng.tape.mean_squared(logits, t)?
                }
                kind => eng.tape.cross_entropy(logits, &class_targets(kind, &ex, seq)?)?,
            };
            if !eng.tape.value(loss).item().is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            let grads = eng.tape.backward(loss)?;
            let mut updates: Vec<(String, Tensor, Tensor)> = eng
                .trainable_params()
                .into_iter()
                .map(|(name, var)| {
                    let p = model.param(&name)?.clone();
                    let g = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()));
                    Ok((name, p, g))
                })
                .collect::<TrainResult<_>>()?;
            drop(eng);
            opt.step(updates.iter_mut().map(|(n, p, g)| (n.as_str(), p, &*g)))
                .map_err(|_| TrainError::NonFiniteLoss { epoch, step })?;
            for (n, p, _) in updates {
                *model.param_mut(&n)? = p;
            }
            steps += 1;
        }
        let m = evaluate(model, data.kind, &data.dev, seq)?;
        dev_metrics.push(m);
        if cfg.select_best && best.as_ref().is_none_or(|(b, _, _)| m > *b) {
            best = Some((m, epoch, model.clone()));
        }
    }
    let (best_metric, best_epoch) = match best {
        Some((m, e, snapshot)) => {
            *model = snapshot;
            (m, e)
        }
        None => {
            let last = dev_metrics.last().copied().unwrap_or(f64::NAN);
            (last, cfg.epochs.saturating_sub(1))
        }
    };
    Ok(FineTuneReport { dev_metrics, best_epoch, best_metric, steps })
}

/// Task metric on `examples`, scaled to 0..100: accuracy for
/// classification, token accuracy for tagging, Pearson correlation for
/// regression.
pub fn evaluate(model: &TransformerModel, kind: TaskKind, examples: &[Example], seq: usize) -> TrainResult<f64> {
    if examples.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let order: Vec<usize> = (0..examples.len()).collect();
    let (mut correct, mut total) = (0usize, 0usize);
    let (mut preds, mut golds) = (Vec::new(), Vec::new());
    for (batch, idx) in batches(examples, &order, 64, seq)? {
        let logits = model.forward_tokens(&mut Eval, &batch)?;
        let ex: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        match kind {
            TaskKind::Regress => {
                preds.extend_from_slice(logits.data());
                golds.extend_from_slice(score_targets(&ex)?.data());
            }
            _ => {
                let targets = class_targets(kind, &ex, seq)?;
                let c = logits.shape()[1];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        let row = &logits.data()[r * c..(r + 1) * c];
                        correct += usize::from(argmax(row) == *t);
                        total += 1;
                    }
                }
            }
        }
    }
    Ok(match kind {
        TaskKind::Regress => 100.0 * pearson(&preds, &golds),
        _ => 100.0 * correct as f64 / total.max(1) as f64,
    })
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Largest absolute value entering any normalization site on `examples`.
pub fn max_norm_input(model: &TransformerModel, examples: &[Example], seq: usize) -> TrainResult<f64> {
    let order: Vec<usize> = (0..examples.len()).collect();
    let mut max = 0.0f64;
    for (batch, _) in batches(examples, &order, 64, seq)? {
        let mut eng = Eval;
        let x = model.embed_with(&mut eng, &batch.ids, batch.seq)?;
        model.forward_observed(&mut eng, x, &batch.masks, &mut |_: &str, v: &Tensor| max = max.max(v.max_abs()))?;
    }
    Ok(max)
}
