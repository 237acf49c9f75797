//! Approximation components: softmax estimator, affine normalization with
//! distillation, operator replacement and the end-to-end workflow.

mod estimator;
mod workflow;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::engine::{Engine, EvalError, TapeEngine};
use crate::model::{affine_norm, Activation, Batch, ModelError, NormMode, SoftmaxMode, TransformerModel, LN_EPS};
use crate::tensor::{AdamW, Tensor, TensorError};

pub use estimator::{
    fit_estimator, sample_rows, structural_floor, train_estimator, EstimatorConfig, EstimatorReport, SoftmaxEstimator,
    HIDDEN,
};
pub use workflow::{run_workflow, Schedule, StageMetrics, WorkflowConfig, WorkflowReport};

#[derive(Debug, Error)]
pub enum ApproxError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("estimator did not converge: held-out mse {:e} after {} steps", report.heldout_mse, report.steps)]
    DidNotConverge { report: EstimatorReport, estimator: Box<SoftmaxEstimator> },
    #[error("calibration needs at least one batch")]
    EmptyCalibration,
    #[error("distillation loss became non-finite at step {step}; consider stronger weight decay")]
    NonFiniteLoss { step: usize },
    #[error("{stage}: {source}")]
    Stage { stage: &'static str, source: Box<ApproxError> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
}

impl From<EvalError> for ApproxError {
    fn from(e: EvalError) -> Self {
        ApproxError::Model(e.into())
    }
}

impl From<TensorError> for ApproxError {
    fn from(e: TensorError) -> Self {
        ApproxError::Model(e.into())
    }
}

pub type ApproxResult<T> = Result<T, ApproxError>;

/// Normalization inputs per site, collected by running the model forward.
pub type SiteActivations = BTreeMap<String, Vec<Tensor>>;

/// Runs `model` over `batches` and records the input of every norm site.
pub fn collect_norm_inputs(model: &TransformerModel, batches: &[Batch]) -> ApproxResult<SiteActivations> {
    let mut acts: SiteActivations = BTreeMap::new();
    for b in batches {
        let mut eng = crate::engine::Eval;
        let x = model.embed_with(&mut eng, &b.ids, b.seq)?;
        model.forward_observed(&mut eng, x, &b.masks, &mut |site: &str, v: &Tensor| {
            acts.entry(site.to_string()).or_default().push(v.clone());
        })?;
    }
    Ok(acts)
}

fn stack(parts: &[Tensor]) -> ApproxResult<Tensor> {
    Ok(Tensor::concat_rows(parts)?)
}

/// Attaches `{site}.affine.{gamma,beta}` for every norm site, initialised as
/// `gamma / sqrt(v + eps)` and `beta - gamma_t * m` where `m`, `v` are the
/// per-feature mean and variance of the site's input over the calibration batches.
pub fn init_affine_from_calibration(model: &mut TransformerModel, calibration: &[Batch]) -> ApproxResult<()> {
    if calibration.is_empty() {
        return Err(ApproxError::EmptyCalibration);
    }
    let teacher = teacher_view(model)?;
    let acts = collect_norm_inputs(&teacher, calibration)?;
    for site in model.config.norm_sites() {
        let x = stack(acts.get(&site).ok_or_else(|| ModelError::MissingParam(site.clone()))?)?;
        let (gamma, beta) = solve_affine(
            &x,
            model.param(&format!("{site}.ln.gamma"))?,
            model.param(&format!("{site}.ln.beta"))?,
        )?;
        model.set_param(&format!("{site}.affine.gamma"), gamma);
        model.set_param(&format!("{site}.affine.beta"), beta);
    }
    Ok(())
}

/// Calibration formula applied to one site's stacked inputs `x`.
pub fn solve_affine(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> ApproxResult<(Tensor, Tensor)> {
    let rows = x.shape()[0] as f64;
    let mean = x.sum_axis(0, false)?.scale(1.0 / rows)?;
    let centered = x.sub(&mean)?;
    let var = centered.mul(&centered)?.sum_axis(0, false)?.scale(1.0 / rows)?;
    let denom = var.map("calibration", |v| (v + LN_EPS).sqrt())?;
    let g = gamma.div(&denom)?;
    let b = beta.sub(&g.mul(&mean)?)?;
    Ok((g, b))
}

/// A copy of `model` that evaluates through exact layer norm.
fn teacher_view(model: &TransformerModel) -> ApproxResult<TransformerModel> {
    if !model.has_exact_ln() {
        return Err(ModelError::InvalidConfig("exact layer norm is required as teacher".into()).into());
    }
    let mut t = model.clone();
    t.config.norm = NormMode::LayerNorm;
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub steps: usize,
    pub lr: f64,
    /// Rows sampled per site per step.
    pub rows: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { steps: 400, lr: 1e-2, rows: 512, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteMse {
    pub site: String,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillReport {
    pub sites: Vec<SiteMse>,
    pub steps: usize,
}

impl DistillReport {
    pub fn mean_before(&self) -> f64 {
        self.sites.iter().map(|s| s.before).sum::<f64>() / self.sites.len().max(1) as f64
    }

    pub fn mean_after(&self) -> f64 {
        self.sites.iter().map(|s| s.after).sum::<f64>() / self.sites.len().max(1) as f64
    }
}

/// Per-site MSE between the affine replacement and exact layer norm, both
/// applied to the inputs the exact model produces on `batches`.
pub fn affine_site_mse(model: &TransformerModel, batches: &[Batch]) -> ApproxResult<BTreeMap<String, f64>> {
    model.require_affine()?;
    let teacher = teacher_view(model)?;
    let acts = collect_norm_inputs(&teacher, batches)?;
    let mut out = BTreeMap::new();
    for site in model.config.norm_sites() {
        let x = stack(&acts[&site])?;
        let o = exact_ln(model, &site, &x)?;
        let s = affine_apply(model, &site, &x)?;
        out.insert(site, s.mse(&o)?);
    }
    Ok(out)
}

fn exact_ln(model: &TransformerModel, site: &str, x: &Tensor) -> ApproxResult<Tensor> {
    let g = model.param(&format!("{site}.ln.gamma"))?;
    let b = model.param(&format!("{site}.ln.beta"))?;
    Ok(crate::model::layer_norm(&mut crate::engine::Eval, x, g, b, LN_EPS)?)
}

fn affine_apply(model: &TransformerModel, site: &str, x: &Tensor) -> ApproxResult<Tensor> {
    let g = model.param(&format!("{site}.affine.gamma"))?;
    let b = model.param(&format!("{site}.affine.beta"))?;
    Ok(affine_norm(&mut crate::engine::Eval, x, g, b)?)
}

/// Trains only the affine parameters so that each site's affine output
/// matches exact layer norm on the same input. The loss is the sum of the
/// per-site MSEs; teacher inputs are cached once from the exact model.
pub fn ln_distill(model: &mut TransformerModel, data: &[Batch], cfg: &DistillConfig) -> ApproxResult<DistillReport> {
    if data.is_empty() {
        return Err(ApproxError::EmptyCalibration);
    }
    model.require_affine()?;
    let teacher = teacher_view(model)?;
    let acts = collect_norm_inputs(&teacher, data)?;
    let sites = model.config.norm_sites();
    let mut cache = Vec::with_capacity(sites.len());
    for site in &sites {
        let x = stack(&acts[site])?;
        let o = exact_ln(model, site, &x)?;
        cache.push((x, o));
    }
    let before: Vec<f64> = sites
        .iter()
        .zip(&cache)
        .map(|(s, (x, o))| Ok(affine_apply(model, s, x)?.mse(o)?))
        .collect::<ApproxResult<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.lr, 0.0);
    for step in 0..cfg.steps {
        let mut eng = TapeEngine::new(|n: &str| n.contains(".affine."));
        let mut total = None;
        for (site, (x, o)) in sites.iter().zip(&cache) {
            let n = x.shape()[0];
            let (xb, ob) = if cfg.rows == 0 || cfg.rows >= n {
                (x.clone(), o.clone())
            } else {
                let ids: Vec<usize> = (0..cfg.rows).map(|_| rng.random_range(0..n)).collect();
                (x.gather_rows(&ids)?, o.gather_rows(&ids)?)
            };
            let (gn, bn) = (format!("{site}.affine.gamma"), format!("{site}.affine.beta"));
            let g = eng.param(&gn, model.param(&gn)?)?;
            let b = eng.param(&bn, model.param(&bn)?)?;
            let xv = eng.constant(xb)?;
            let ov = eng.constant(ob)?;
            let y = affine_norm(&mut eng, &xv, &g, &b)?;
            let l = eng.tape.mean_squared(y, ov)?;
            total = Some(match total {
                None => l,
                Some(t) => eng.tape.add(t, l)?,
            });
        }
        let loss = total.expect("at least one site");
        if !eng.tape.value(loss).item().is_finite() {
            return Err(ApproxError::NonFiniteLoss { step });
        }
        let grads = eng.tape.backward(loss)?;
        let mut updates: Vec<(String, Tensor, Tensor)> = eng
            .trainable_params()
            .into_iter()
            .map(|(name, var)| {
                let p = model.param(&name).cloned()?;
                let g = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()));
                Ok((name, p, g))
            })
            .collect::<ApproxResult<_>>()?;
        opt.step(updates.iter_mut().map(|(n, p, g)| (n.as_str(), p, &*g)))
            .map_err(|_| ApproxError::NonFiniteLoss { step })?;
        for (n, p, _) in updates {
            model.set_param(&n, p);
        }
    }

    let mut out = Vec::with_capacity(sites.len());
    for ((site, (x, o)), b) in sites.iter().zip(&cache).zip(before) {
        let after = affine_apply(model, site, x)?.mse(o)?;
        if !after.is_finite() {
            return Err(ApproxError::NonFiniteLoss { step: cfg.steps });
        }
        out.push(SiteMse { site: site.clone(), before: b, after });
    }
    Ok(DistillReport { sites: out, steps: cfg.steps })
}

/// Switches the activation to relu and the softmax to the supplied frozen
/// estimator. Weights are left untouched.
pub fn replace_ops(model: &mut TransformerModel, estimator: &SoftmaxEstimator) {
    model.config.activation = Activation::Relu;
    model.config.softmax = SoftmaxMode::Estimated;
    let mut est = estimator.clone();
    est.frozen = true;
    model.set_estimator(Some(est));
}

/// Removes exact layer norm and routes every norm site through its affine
/// replacement.
pub fn drop_ln(model: &mut TransformerModel) -> ApproxResult<()> {
    model.require_affine()?;
    for site in model.config.norm_sites() {
        model.remove_param(&format!("{site}.ln.gamma"));
        model.remove_param(&format!("{site}.ln.beta"));
    }
    model.config.norm = NormMode::Affine;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Eval, Primitive};
    use crate::model::{HeadKind, ModelConfig};

    fn model() -> TransformerModel {
        let cfg = ModelConfig { hidden_size: 8, ffn_size: 16, num_heads: 2, ..ModelConfig::new(20, 6, 2, HeadKind::Sequence) };
        TransformerModel::new(cfg, 3).unwrap()
    }

    fn batches(n: usize) -> Vec<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..n)
            .map(|_| {
                let seqs: Vec<Vec<usize>> = (0..4).map(|_| (0..rng.random_range(2..=6)).map(|_| rng.random_range(0..20)).collect()).collect();
                let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
                Batch::from_sequences(&refs, 6, 0).unwrap()
            })
            .collect()
    }

    #[test]
    fn affine_forward_examples() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let y = affine_norm(&mut Eval, &x, &Tensor::vector(vec![2.0, 3.0]), &Tensor::vector(vec![1.0, 1.0])).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
        let id = affine_norm(&mut Eval, &x, &Tensor::ones(&[2]), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(id.data(), x.data());
        let bad = affine_norm(&mut Eval, &x, &Tensor::ones(&[3]), &Tensor::zeros(&[3]));
        assert!(bad.is_err());
    }

    #[test]
    fn calibration_formula() {
        let x = Tensor::matrix(2, 2, vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let g = Tensor::vector(vec![2.0, 3.0]);
        let b = Tensor::vector(vec![0.5, -0.5]);
        let (gt, bt) = solve_affine(&x, &g, &b).unwrap();
        assert!((gt.data()[0] - 2.0).abs() < 1e-9 && (gt.data()[1] - 3.0).abs() < 1e-9);
        assert!((bt.data()[0] - 0.5).abs() < 1e-12 && (bt.data()[1] + 0.5).abs() < 1e-12);

        let c = Tensor::full(&[3, 2], 4.0);
        let (gt, bt) = solve_affine(&c, &g, &Tensor::zeros(&[2])).unwrap();
        assert!(gt.is_finite() && bt.is_finite());
        assert!((gt.data()[0] - 2.0 / LN_EPS.sqrt()).abs() / gt.data()[0] < 1e-12);
    }

    #[test]
    fn calibration_needs_data() {
        let mut m = model();
        assert!(matches!(init_affine_from_calibration(&mut m, &[]), Err(ApproxError::EmptyCalibration)));
    }

    #[test]
    fn replace_is_idempotent_and_keeps_weights() {
        let mut m = model();
        let digest = m.param_digest(|_| true);
        let est = SoftmaxEstimator::new(6, 1).unwrap();
        replace_ops(&mut m, &est);
        let once = m.clone();
        replace_ops(&mut m, &est);
        assert_eq!(m, once);
        assert_eq!(m.param_digest(|n| !n.starts_with("est.")), digest);
        let trace = m.op_trace().unwrap();
        for p in [Primitive::Exp, Primitive::Tanh] {
            assert_eq!(trace.count(p), 0, "{p}");
        }
    }

    #[test]
    fn distill_touches_only_affine_and_improves() {
        let mut m = model();
        replace_ops(&mut m, &SoftmaxEstimator::new(6, 1).unwrap());
        let data = batches(4);
        init_affine_from_calibration(&mut m, &data).unwrap();
        let others = m.param_digest(|n| !n.contains(".affine."));
        let report = ln_distill(&mut m, &data, &DistillConfig { steps: 300, ..DistillConfig::default() }).unwrap();
        assert_eq!(m.param_digest(|n| !n.contains(".affine.")), others);
        assert!(report.mean_after() < report.mean_before(), "{report:?}");
    }

    #[test]
    fn distill_fixed_point_has_zero_loss() {
        // A norm input whose rows are all identical makes the affine solution exact.
        let mut m = model();
        let b = Batch::from_sequences(&[&[3, 3, 3, 3, 3, 3]], 6, 0).unwrap();
        let acts = collect_norm_inputs(&m, std::slice::from_ref(&b)).unwrap();
        let site = "emb.norm".to_string();
        let x = stack(&acts[&site]).unwrap();
        let row = x.slice_rows(0, 1).unwrap();
        let same = Tensor::concat_rows(&vec![row.clone(); 6]).unwrap();
        let o = exact_ln(&m, &site, &same).unwrap();
        m.set_param("emb.norm.affine.gamma", Tensor::zeros(&[8]));
        m.set_param("emb.norm.affine.beta", o.slice_rows(0, 1).unwrap().reshape(&[8]).unwrap());
        let y = affine_apply(&m, &site, &same).unwrap();
        assert_eq!(y.mse(&o).unwrap(), 0.0);
    }

    #[test]
    fn drop_ln_requires_affine_and_yields_he_ready_model() {
        let mut m = model();
        assert!(matches!(drop_ln(&mut m), Err(ApproxError::Model(ModelError::MissingAffineNorm(_)))));
        replace_ops(&mut m, &SoftmaxEstimator::new(6, 1).unwrap());
        let data = batches(2);
        init_affine_from_calibration(&mut m, &data).unwrap();
        let mut affine_only = m.clone();
        affine_only.config.norm = NormMode::Affine;
        drop_ln(&mut m).unwrap();
        assert!(!m.has_exact_ln());
        let trace = m.check_he_ready().unwrap();
        assert_eq!(trace.count(Primitive::Div), 0);
        assert_eq!(trace.count(Primitive::Sqrt), 0);
        assert_eq!(m.logits(&data[0]).unwrap(), affine_only.logits(&data[0]).unwrap());
    }
}
