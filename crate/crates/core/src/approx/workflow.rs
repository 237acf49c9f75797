use std::fmt;
use std::str::FromStr;

use super::{drop_ln, init_affine_from_calibration, ln_distill, replace_ops, ApproxError, ApproxResult, DistillConfig, DistillReport, SoftmaxEstimator};
use crate::data::{Example, TaskData};
use crate::he::{he_forward, HeContext, HeParams, KeyPair, LocalRelu};
use crate::model::{Activation, Batch, NormMode, TransformerModel};
use crate::train::{self, argmax, fine_tune, pearson, FineTuneConfig, FineTuneReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Schedule {
    TwoStages,
    JointFtS,
    JointFtLn,
    JointFtSLn,
}

impl Schedule {
    pub const ALL: [Schedule; 4] = [Schedule::TwoStages, Schedule::JointFtS, Schedule::JointFtLn, Schedule::JointFtSLn];

    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::TwoStages => "two-stages",
            Schedule::JointFtS => "joint-s",
            Schedule::JointFtLn => "joint-ln",
            Schedule::JointFtSLn => "joint-s-ln",
        }
    }

    fn trains_estimator(self) -> bool {
        matches!(self, Schedule::JointFtS | Schedule::JointFtSLn)
    }

    fn joint_norm(self) -> bool {
        matches!(self, Schedule::JointFtLn | Schedule::JointFtSLn)
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Schedule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Schedule::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| {
            format!("unknown schedule `{s}` (expected two-stages, joint-s, joint-ln or joint-s-ln)")
        })
    }
}

#[derive(Debug, Clone)]
pub struct WorkflowConfig {
    pub finetune: FineTuneConfig,
    pub distill: DistillConfig,
    /// Training batches used for affine calibration and distillation.
    pub calibration_batches: usize,
    /// Also fine-tune the exact and relu-only references.
    pub references: bool,
    /// Evaluate the final model under the shadow HE backend with these params.
    pub he_eval: Option<HeParams>,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        WorkflowConfig {
            finetune: FineTuneConfig::default(),
            distill: DistillConfig::default(),
            calibration_batches: 16,
            references: true,
            he_eval: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageMetrics {
    pub stage: &'static str,
    pub dev_metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowReport {
    pub schedule: Schedule,
    pub stages: Vec<StageMetrics>,
    pub finetune: Option<FineTuneReport>,
    pub distill: Option<DistillReport>,
    pub max_norm_input: f64,
}

impl WorkflowReport {
    pub fn metric(&self, stage: &str) -> Option<f64> {
        self.stages.iter().find(|s| s.stage == stage).map(|s| s.dev_metric)
    }

    pub fn final_metric(&self) -> f64 {
        self.metric("relu-s-l").unwrap_or(f64::NAN)
    }

    pub fn to_kv(&self) -> String {
        let mut out = format!("schedule={}\n", self.schedule);
        for s in &self.stages {
            out.push_str(&format!("stage.{}.dev_metric={:.4}\n", s.stage, s.dev_metric));
        }
        out.push_str(&format!("max_norm_input={:.6e}\n", self.max_norm_input));
        if let Some(d) = &self.distill {
            out.push_str(&format!("distill.mse_before={:.6e}\ndistill.mse_after={:.6e}\n", d.mean_before(), d.mean_after()));
        }
        out
    }
}

fn stage<T>(name: &'static str, r: Result<T, impl Into<ApproxError>>) -> ApproxResult<T> {
    r.map_err(|e| ApproxError::Stage { stage: name, source: Box::new(e.into()) })
}

fn calibration(data: &TaskData, n: usize, batch: usize) -> ApproxResult<Vec<Batch>> {
    let order = crate::data::epoch_order(data.train.len(), 0xca1b, 0);
    let take: Vec<usize> = order.into_iter().take(n * batch.max(1)).collect();
    Ok(train::batches(&data.train, &take, batch, data.seq_len)?.into_iter().map(|(b, _)| b).collect())
}

/// Converts `pretrained` into a model served under the HE contract.
///
/// Every schedule replaces the activation and softmax, fine-tunes, replaces
/// layer norm with its affine form and drops the exact norm. Dev metrics are
/// recorded after each stage.
pub fn run_workflow(
    pretrained: &TransformerModel,
    data: &TaskData,
    estimator: &SoftmaxEstimator,
    schedule: Schedule,
    cfg: &WorkflowConfig,
) -> ApproxResult<(TransformerModel, WorkflowReport)> {
    let eval = |m: &TransformerModel| train::evaluate(m, data.kind, &data.dev, data.seq_len);
    let ft = &cfg.finetune;
    let mut stages = Vec::new();

    if cfg.references {
        let mut base = pretrained.clone();
        stage("baseline", fine_tune(&mut base, data, ft, &|_| true))?;
        stages.push(StageMetrics { stage: "baseline", dev_metric: stage("baseline", eval(&base))? });
        let mut relu = pretrained.clone();
        relu.config.activation = Activation::Relu;
        stage("relu", fine_tune(&mut relu, data, ft, &|_| true))?;
        stages.push(StageMetrics { stage: "relu", dev_metric: stage("relu", eval(&relu))? });
    }

    let mut model = pretrained.clone();
    replace_ops(&mut model, estimator);
    if schedule.trains_estimator() {
        if let Some(e) = model.estimator_mut() {
            e.frozen = false;
        }
    }
    let calib = stage("calibrate", calibration(data, cfg.calibration_batches, ft.batch))?;
    if schedule.joint_norm() {
        stage("calibrate", init_affine_from_calibration(&mut model, &calib))?;
        model.config.norm = NormMode::Affine;
    }
    let est_frozen = !schedule.trains_estimator();
    let trainable = move |n: &str| !(est_frozen && n.starts_with("est.")) && !n.contains(".ln.");
    let trainable_ln = move |n: &str| !(est_frozen && n.starts_with("est."));
    let ft_report = if schedule.joint_norm() {
        stage("finetune", fine_tune(&mut model, data, ft, &trainable))?
    } else {
        stage("finetune", fine_tune(&mut model, data, ft, &trainable_ln))?
    };
    let mut distill = None;
    if !schedule.joint_norm() {
        stages.push(StageMetrics { stage: "relu-s", dev_metric: stage("relu-s", eval(&model))? });
        stage("calibrate", init_affine_from_calibration(&mut model, &calib))?;
        let report = stage("distill", ln_distill(&mut model, &calib, &cfg.distill))?;
        distill = Some(report);
    }
    let max_norm_input = stage("distill", train::max_norm_input(&model, &data.dev, data.seq_len))?;
    if let Some(e) = model.estimator_mut() {
        e.frozen = true;
    }
    stage("drop-ln", drop_ln(&mut model))?;
    stage("drop-ln", model.absorb_attention_scale())?;
    stage("drop-ln", model.check_he_ready())?;
    stages.push(StageMetrics { stage: "relu-s-l", dev_metric: stage("relu-s-l", eval(&model))? });

    if let Some(params) = &cfg.he_eval {
        let metric = stage("he", he_metric(&model, data, params.clone()))?;
        stages.push(StageMetrics { stage: "he", dev_metric: metric });
    }
    let report = WorkflowReport { schedule, stages, finetune: Some(ft_report), distill, max_norm_input };
    Ok((model, report))
}

/// Dev metric with every example run through `he_forward` on the shadow backend.
pub fn he_metric(model: &TransformerModel, data: &TaskData, params: HeParams) -> ApproxResult<f64> {
    let ctx = HeContext::shadow(params).map_err(model_err)?;
    let key = KeyPair::from_seed(0x4e);
    let mut channel = LocalRelu { ctx: ctx.clone(), key: &key };
    let (mut correct, mut total) = (0usize, 0usize);
    let (mut preds, mut golds) = (Vec::new(), Vec::new());
    for ex in &data.dev {
        let logits = he_logits(model, ex, data.seq_len, &ctx, &key, &mut channel)?;
        match &ex.label {
            crate::data::Label::Score(s) => {
                preds.push(logits.data()[0]);
                golds.push(*s);
            }
            crate::data::Label::Class(c) => {
                correct += usize::from(argmax(logits.data()) == *c);
                total += 1;
            }
            crate::data::Label::Tags(tags) => {
                let c = logits.shape()[1];
                for (i, t) in tags.iter().enumerate() {
                    if let Some(t) = t {
                        correct += usize::from(argmax(&logits.data()[i * c..(i + 1) * c]) == *t);
                        total += 1;
                    }
                }
            }
        }
    }
    Ok(if preds.is_empty() { 100.0 * correct as f64 / total.max(1) as f64 } else { 100.0 * pearson(&preds, &golds) })
}

fn model_err(e: crate::he::HeError) -> ApproxError {
    ApproxError::from(crate::engine::EvalError::from(e))
}

fn he_logits(
    model: &TransformerModel,
    ex: &Example,
    seq: usize,
    ctx: &HeContext,
    key: &KeyPair,
    channel: &mut LocalRelu<'_>,
) -> ApproxResult<crate::tensor::Tensor> {
    let mut ids = ex.tokens.clone();
    let len = ids.len().min(seq);
    ids.resize(seq, crate::data::PAD);
    let x = model.embed(&ids, seq)?;
    let ct = ctx.encrypt(&x, key).map_err(model_err)?;
    let (out, _) = he_forward(model, ct, len, ctx, channel).map_err(model_err)?;
    ctx.decrypt(&out, key).map_err(model_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticTaskSpec, TaskKind};
    use crate::engine::Primitive;
    use crate::model::ModelConfig;

    #[test]
    fn schedule_names_round_trip() {
        for s in Schedule::ALL {
            assert_eq!(s.as_str().parse::<Schedule>().unwrap(), s);
        }
        assert!("both".parse::<Schedule>().is_err());
    }

    #[test]
    fn every_schedule_ends_he_ready() {
        let spec = SyntheticTaskSpec { train_size: 128, dev_size: 32, seq_len: 6, vocab_size: 30, ..SyntheticTaskSpec::default_for(TaskKind::Classify) };
        let data = gen_synthetic(&spec, 1).unwrap();
        let cfg = ModelConfig { hidden_size: 8, ffn_size: 16, ..ModelConfig::new(data.vocab.len(), 6, 2, data.kind.head()) };
        let model = TransformerModel::new(cfg, 2).unwrap();
        let est = SoftmaxEstimator::new(6, 3).unwrap();
        let wf = WorkflowConfig {
            finetune: FineTuneConfig { epochs: 1, ..FineTuneConfig::default() },
            distill: DistillConfig { steps: 20, ..DistillConfig::default() },
            calibration_batches: 2,
            references: false,
            he_eval: Some(HeParams::with_levels(1024, 16).unwrap()),
        };
        for s in Schedule::ALL {
            let (m, r) = run_workflow(&model, &data, &est, s, &wf).unwrap();
            let trace = m.check_he_ready().unwrap();
            assert!(trace.primitives().all(|(p, _)| matches!(p, Primitive::Add | Primitive::Mul | Primitive::Relu)));
            assert_eq!(r.metric("he"), r.metric("relu-s-l"), "{s}");
            let est_same = m.estimator().unwrap().params == est.params;
            assert_eq!(est_same, !s.trains_estimator(), "{s}");
            assert_eq!(r.distill.is_some(), !s.joint_norm());
        }
    }
}
