use std::sync::Arc;

use proptest::prelude::*;

use hexform::approx::{fit_estimator, run_workflow, EstimatorConfig, Schedule, SoftmaxEstimator, WorkflowConfig};
use hexform::data::{gen_synthetic, SyntheticTaskSpec, TaskData, TaskKind};
use hexform::he::{static_depth, Backend, DagRecorder, HeParams, KeyPair};
use hexform::model::{Batch, ModelConfig, TransformerModel};
use hexform::protocol::{audit_transcript, run_session, ServerSession};
use hexform::train::FineTuneConfig;

fn tiny_task(kind: TaskKind) -> TaskData {
    let spec = SyntheticTaskSpec { vocab_size: 24, seq_len: 8, train_size: 96, dev_size: 16, ..SyntheticTaskSpec::default_for(kind) };
    gen_synthetic(&spec, 3).unwrap()
}

fn tiny_estimator(dim: usize) -> SoftmaxEstimator {
    fit_estimator(&EstimatorConfig { max_steps: 300, ..EstimatorConfig::new(dim, 1) }).unwrap().0
}

fn tiny_model(data: &TaskData, seed: u64) -> TransformerModel {
    let cfg = ModelConfig {
        hidden_size: 8,
        ffn_size: 16,
        ..ModelConfig::small(data.vocab.len(), data.seq_len, data.num_labels, data.kind.head())
    };
    TransformerModel::new(cfg, seed).unwrap()
}

fn tiny_workflow(data: &TaskData, est: &SoftmaxEstimator, schedule: Schedule, seed: u64) -> TransformerModel {
    let mut cfg = WorkflowConfig {
        finetune: FineTuneConfig { epochs: 1, batch: 16, seed, ..FineTuneConfig::default() },
        calibration_batches: 2,
        references: false,
        he_eval: None,
        ..WorkflowConfig::default()
    };
    cfg.distill.steps = 10;
    cfg.distill.rows = 64;
    let (model, report) = run_workflow(&tiny_model(data, seed), data, est, schedule, &cfg).unwrap();
    assert!(report.final_metric().is_finite());
    model
}

fn params() -> HeParams {
    HeParams::with_levels(8192, 16).unwrap()
}

fn local_logits(model: &TransformerModel, ids: &[usize]) -> Vec<f64> {
    model.logits(&Batch::from_sequences(&[ids], ids.len(), 0).unwrap()).unwrap().data().to_vec()
}

#[test]
fn every_task_converts_and_serves_under_both_backends() {
    let est = tiny_estimator(8);
    for kind in [TaskKind::Classify, TaskKind::Regress, TaskKind::Tag] {
        let data = tiny_task(kind);
        let model = Arc::new(tiny_workflow(&data, &est, Schedule::TwoStages, 5));
        model.check_he_ready().unwrap();
        for backend in [Backend::Shadow, Backend::FixedPoint] {
            let mut server =
                ServerSession::new(Arc::clone(&model), params(), backend, data.vocab.tokens().to_vec(), kind, "tiny").unwrap();
            let (q, served, transcript) = run_session(&mut server, KeyPair::from_seed(8), "w3 w5 w7").unwrap();
            assert_eq!(q.report, served.report);
            assert!(audit_transcript(&transcript.lock().unwrap()).unwrap() > 0);
            let local = local_logits(&model, &q.token_ids);
            match backend {
                Backend::Shadow => assert_eq!(q.logits.data(), &local[..], "{kind:?}"),
                Backend::FixedPoint => {
                    let dev = q.logits.data().iter().zip(&local).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    assert!(dev <= 1e-3, "{kind:?}: {dev}");
                }
            }
        }
    }
}

#[test]
fn joint_schedules_end_he_ready() {
    let est = tiny_estimator(8);
    let data = tiny_task(TaskKind::Classify);
    for schedule in [Schedule::JointFtS, Schedule::JointFtLn, Schedule::JointFtSLn] {
        tiny_workflow(&data, &est, schedule, 2).check_he_ready().unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn reported_depth_matches_the_static_oracle(seed in 0u64..1000, len in 1usize..8) {
        let est = tiny_estimator(8);
        let data = tiny_task(TaskKind::Classify);
        let model = Arc::new(tiny_workflow(&data, &est, Schedule::JointFtSLn, seed));
        let text = data.vocab.tokens()[3..3 + len].join(" ");
        let mut server = ServerSession::new(
            Arc::clone(&model), params(), Backend::Shadow, data.vocab.tokens().to_vec(), TaskKind::Classify, "tiny",
        ).unwrap();
        let (q, _, _) = run_session(&mut server, KeyPair::from_seed(seed), &text).unwrap();

        let mut rec = DagRecorder::new();
        let x = rec.input(model.embed(&q.token_ids, q.token_ids.len()).unwrap());
        let out = model.forward_embeddings(&mut rec, x, &[vec![false; q.token_ids.len()]]).unwrap();
        let (_, max) = static_depth(&rec.nodes, out);
        prop_assert_eq!(max, q.report.max_depth);
        prop_assert!(max <= params().level_budget());
    }
}
