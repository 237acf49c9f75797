//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the summary is always
//! printed. Exits non-zero when any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use hexform::approx::{
    drop_ln, fit_estimator, init_affine_from_calibration, replace_ops, run_workflow, EstimatorConfig, Schedule,
    SoftmaxEstimator, WorkflowConfig, WorkflowReport,
};
use hexform::checkpoint::Checkpoint;
use hexform::data::{gen_synthetic, SyntheticTaskSpec, TaskData, TaskKind, Vocab};
use hexform::engine::{Engine, EvalError, TapeEngine};
use hexform::he::{static_depth, Backend, DagRecorder, HeContext, HeEngine, HeError, HeParams, KeyPair, LocalRelu};
use hexform::model::{Batch, ModelConfig, ModelError, TransformerModel};
use hexform::protocol::{audit_transcript, run_session, ServerSession};
use hexform::tensor::Tensor;
use hexform::train::{argmax, batches, FineTuneConfig};

const SEED: u64 = 20;
const SESSIONS: usize = 20;
/// Epochs for the trend comparisons; the degradation check uses the default.
const TREND_EPOCHS: usize = 3;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

type Check = Result<Verdict, String>;

fn run_check(f: impl FnOnce() -> Check) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => v,
        Ok(Err(e)) => verdict(false, format!("error: {e}")),
        Err(p) => {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            verdict(false, format!("panic: {}", msg.unwrap_or_default()))
        }
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn he_params() -> HeParams {
    HeParams::with_levels(8192, 16).expect("valid parameters")
}

fn task(kind: TaskKind) -> Result<TaskData, String> {
    gen_synthetic(&SyntheticTaskSpec::default_for(kind), SEED).map_err(err)
}

fn fresh_model(data: &TaskData, mask_value: f64) -> Result<TransformerModel, String> {
    let cfg = ModelConfig { mask_value, ..ModelConfig::new(data.vocab.len(), data.seq_len, data.num_labels, data.kind.head()) };
    TransformerModel::new(cfg, SEED).map_err(err)
}

fn workflow(
    data: &TaskData,
    est: &SoftmaxEstimator,
    schedule: Schedule,
    mask_value: f64,
    ft: FineTuneConfig,
    references: bool,
) -> Result<(TransformerModel, WorkflowReport), String> {
    let model = fresh_model(data, mask_value)?;
    let cfg = WorkflowConfig { finetune: FineTuneConfig { seed: SEED, ..ft }, references, ..WorkflowConfig::default() };
    run_workflow(&model, data, est, schedule, &cfg).map_err(err)
}

fn trend(epochs: usize, weight_decay: f64) -> FineTuneConfig {
    FineTuneConfig { epochs, weight_decay, ..FineTuneConfig::default() }
}

/// HE-ready model without task training, used when the trained one is unavailable.
fn converted_untrained(data: &TaskData, est: &SoftmaxEstimator) -> Result<TransformerModel, String> {
    let mut m = fresh_model(data, -3.0)?;
    replace_ops(&mut m, est);
    let order: Vec<usize> = (0..data.train.len()).collect();
    let calib: Vec<Batch> = batches(&data.train, &order[..256], 32, data.seq_len).map_err(err)?.into_iter().map(|(b, _)| b).collect();
    init_affine_from_calibration(&mut m, &calib).map_err(err)?;
    drop_ln(&mut m).map_err(err)?;
    m.absorb_attention_scale().map_err(err)?;
    m.check_he_ready().map_err(err)?;
    Ok(m)
}

fn random_text(rng: &mut StdRng, vocab: &Vocab, max_words: usize) -> String {
    let words = vocab.tokens();
    let n = rng.random_range(1..=max_words);
    (0..n)
        .map(|_| if rng.random_bool(0.1) { "outofvocab".to_string() } else { words[rng.random_range(3..words.len())].clone() })
        .collect::<Vec<_>>()
        .join(" ")
}

struct SessionRun {
    token_ids: Vec<usize>,
    logits: Tensor,
    reported_depth: u16,
    audited_blobs: usize,
}

fn sessions(model: &Arc<TransformerModel>, vocab: &Vocab, backend: Backend, texts: &[String]) -> Result<Vec<SessionRun>, String> {
    let mut out = Vec::new();
    for (i, text) in texts.iter().enumerate() {
        let mut server =
            ServerSession::new(Arc::clone(model), he_params(), backend, vocab.tokens().to_vec(), TaskKind::Classify, "acceptance")
                .map_err(err)?;
        let (q, served, transcript) = run_session(&mut server, KeyPair::from_seed(1000 + i as u64), text).map_err(err)?;
        let log = transcript.lock().map_err(err)?.clone();
        let audited_blobs = audit_transcript(&log)?;
        if q.report != served.report {
            return Err(format!("client and server depth reports differ for {text:?}"));
        }
        out.push(SessionRun { token_ids: q.token_ids, logits: q.logits, reported_depth: served.report.max_depth, audited_blobs });
    }
    Ok(out)
}

fn local_logits(model: &TransformerModel, ids: &[usize]) -> Result<Tensor, String> {
    model.logits(&Batch::from_sequences(&[ids], ids.len(), 0).map_err(err)?).map_err(err)
}

fn criterion_1(est_slot: &mut Option<SoftmaxEstimator>) -> Check {
    let t = Instant::now();
    let cfg = EstimatorConfig::new(16, SEED);
    let (est, report) = fit_estimator(&cfg).map_err(err)?;
    let elapsed = t.elapsed();
    *est_slot = Some(est);
    let pass = (report.train_mse <= 1e-6 || report.heldout_mse <= 1e-5) && elapsed <= Duration::from_secs(600);
    Ok(verdict(
        pass,
        format!(
            "train mse {:.3e}, held-out mse {:.3e} after {} steps in {:.0?} (needs train <= 1e-6 or held-out <= 1e-5)",
            report.train_mse, report.heldout_mse, report.steps, elapsed
        ),
    ))
}

fn criterion_5(data: &TaskData, est: &SoftmaxEstimator, model_slot: &mut Option<TransformerModel>) -> Check {
    let t = Instant::now();
    let (model, report) = workflow(data, est, Schedule::TwoStages, -3.0, FineTuneConfig::default(), true)?;
    let elapsed = t.elapsed();
    *model_slot = Some(model);
    let base = report.metric("baseline").unwrap_or(f64::NAN);
    let fin = report.final_metric();
    let pass = base >= 90.0 && base - fin <= 5.0 && elapsed <= Duration::from_secs(1200);
    Ok(verdict(
        pass,
        format!(
            "baseline {base:.2}, relu {:.2}, relu-s {:.2}, relu-s-l {fin:.2}, drop {:.2} points, {elapsed:.0?}",
            report.metric("relu").unwrap_or(f64::NAN),
            report.metric("relu-s").unwrap_or(f64::NAN),
            base - fin
        ),
    ))
}

fn criterion_2(model: &Arc<TransformerModel>, runs: &[SessionRun]) -> Check {
    let mut mismatched = 0;
    for r in runs {
        if r.logits != local_logits(model, &r.token_ids)? {
            mismatched += 1;
        }
    }
    Ok(verdict(mismatched == 0, format!("{} shadow sessions, {mismatched} differ from the plaintext forward", runs.len())))
}

fn criterion_3(model: &Arc<TransformerModel>, runs: &[SessionRun]) -> Check {
    let mut worst: f64 = 0.0;
    for r in runs {
        worst = worst.max(r.logits.max_abs_diff(&local_logits(model, &r.token_ids)?).map_err(err)?);
    }
    Ok(verdict(worst <= 1e-3, format!("{} fixed-point sessions, max abs logit deviation {worst:.3e} (limit 1e-3)", runs.len())))
}

fn criterion_4(model: &Arc<TransformerModel>, runs: &[SessionRun]) -> Check {
    let mut mismatches = Vec::new();
    for r in runs {
        let mut rec = DagRecorder::new();
        let x = rec.input(model.embed(&r.token_ids, r.token_ids.len()).map_err(err)?);
        let out = model.forward_embeddings(&mut rec, x, &[vec![false; r.token_ids.len()]]).map_err(err)?;
        let (_, max) = static_depth(&rec.nodes, out);
        if max != r.reported_depth {
            mismatches.push((r.reported_depth, max));
        }
    }
    let depth = runs.first().map_or(0, |r| r.reported_depth);
    Ok(verdict(
        mismatches.is_empty(),
        format!("{} sessions, reported depth {depth}, static oracle mismatches {mismatches:?}", runs.len()),
    ))
}

fn criterion_10(runs: &[&SessionRun]) -> Check {
    let blobs: usize = runs.iter().map(|r| r.audited_blobs).sum();
    let empty = runs.iter().filter(|r| r.audited_blobs == 0).count();
    Ok(verdict(
        empty == 0 && !runs.is_empty(),
        format!("{} transcripts audited, {blobs} ciphertext payloads, no plaintext after setup", runs.len()),
    ))
}

fn criterion_6(data: &TaskData, est: &SoftmaxEstimator) -> Check {
    let (_, near) = workflow(data, est, Schedule::TwoStages, -3.0, trend(TREND_EPOCHS, 0.1), false)?;
    let (_, far) = workflow(data, est, Schedule::TwoStages, -30.0, trend(TREND_EPOCHS, 0.1), false)?;
    let (a, b) = (near.final_metric(), far.final_metric());
    Ok(verdict(
        a - b >= 2.0,
        format!(
            "token accuracy at mask -3: {a:.2} (relu-s {:.2}), at -30: {b:.2} (relu-s {:.2}), gap {:.2}",
            near.metric("relu-s").unwrap_or(f64::NAN),
            far.metric("relu-s").unwrap_or(f64::NAN),
            a - b
        ),
    ))
}

fn criterion_7(data: &TaskData, est: &SoftmaxEstimator) -> Check {
    let (_, decayed) = workflow(data, est, Schedule::TwoStages, -3.0, trend(TREND_EPOCHS, 0.1), false)?;
    let (_, plain) = workflow(data, est, Schedule::TwoStages, -3.0, trend(TREND_EPOCHS, 0.0), false)?;
    let mse = |r: &WorkflowReport| r.distill.as_ref().map_or(f64::NAN, |d| d.mean_after());
    let pass = decayed.max_norm_input < plain.max_norm_input && mse(&decayed) < mse(&plain);
    Ok(verdict(
        pass,
        format!(
            "max norm input {:.4e} (decay 0.1) vs {:.4e} (decay 0), distill mse {:.4e} vs {:.4e}",
            decayed.max_norm_input,
            plain.max_norm_input,
            mse(&decayed),
            mse(&plain)
        ),
    ))
}

fn criterion_8(data: &TaskData, est: &SoftmaxEstimator) -> Check {
    let (_, two) = workflow(data, est, Schedule::TwoStages, -3.0, trend(TREND_EPOCHS, 0.1), false)?;
    let (_, joint) = workflow(data, est, Schedule::JointFtSLn, -3.0, trend(TREND_EPOCHS, 0.1), false)?;
    let (a, b) = (joint.final_metric(), two.final_metric());
    Ok(verdict(a <= b, format!("pearson x100: joint-s-ln {a:.2}, two-stages {b:.2}")))
}

fn criterion_9() -> Check {
    use proptest::prelude::*;
    use proptest::test_runner::{Config, TestRunner};

    let mut runner = TestRunner::new(Config { cases: 256, failure_persistence: None, ..Config::default() });
    let strategy = (1usize..5, 1usize..6, proptest::collection::vec(-4.0f64..4.0, 25), 0u8..6, any::<bool>(), any::<u64>());
    let result = runner.run(&strategy, |(rows, cols, vals, op, fixed, seed)| {
        let params = HeParams::with_levels(1024, 4).unwrap();
        let ctx = if fixed { HeContext::fixed_point(params) } else { HeContext::shadow(params) }.unwrap();
        let key = KeyPair::from_seed(seed);
        let x = Tensor::matrix(rows, cols, vals[..rows * cols].to_vec()).unwrap();
        let a = ctx.encrypt(&x, &key).unwrap();
        let mut relu = LocalRelu { ctx: ctx.clone(), key: &key };
        let mut eng = HeEngine::new(&ctx, &mut relu);
        let v = eng.input(a.clone());
        let r: Result<(), EvalError> = match op {
            0 => ctx.div(&a, &a).map(|_| ()).map_err(EvalError::from),
            1 => ctx.exp(&a).map(|_| ()).map_err(EvalError::from),
            2 => ctx.max(&a, &a).map(|_| ()).map_err(EvalError::from),
            3 => ctx.compare(&a, &a).map(|_| ()).map_err(EvalError::from),
            4 => eng.softmax_rows(&v).map(|_| ()),
            _ => eng.gelu(&v).map(|_| ()),
        };
        prop_assert!(matches!(r, Err(EvalError::He(HeError::UnsupportedOp(_)))), "op {} gave {:?}", op, r);
        Ok(())
    });
    let props = result.is_ok();

    let dir = tempfile::tempdir().map_err(err)?;
    let vocab = Vocab::synthetic(10);
    let model = TransformerModel::new(ModelConfig::small(vocab.len(), 8, 2, hexform::model::HeadKind::Sequence), 1).map_err(err)?;
    let mut ckpt = Checkpoint::from_model(&model);
    ckpt.vocab = Some(vocab.tokens().to_vec());
    ckpt.save(dir.path()).map_err(err)?;
    let served = hexform_cli::try_run(["hexform", "serve", "--checkpoint", dir.path().to_str().unwrap(), "--port", "0"]);
    let code = served.as_ref().err().map(|f| f.code);
    let refused = served.is_err_and(|f| f.code == 3 && f.message.contains("model not HE-ready"));
    Ok(verdict(
        props && refused,
        format!(
            "256 property cases {}, serving an exact-norm checkpoint exits {code:?}",
            if props { "all raise UnsupportedOp".to_string() } else { format!("failed: {:?}", result.err()) }
        ),
    ))
}

fn random_batch(rng: &mut StdRng, vocab_size: usize, seq: usize) -> Result<Batch, String> {
    let len = rng.random_range(1..=seq);
    let ids: Vec<usize> = std::iter::once(2).chain((1..len).map(|_| rng.random_range(3..vocab_size))).collect();
    Batch::from_sequences(&[&ids], seq, 0).map_err(err)
}

fn criterion_11(data: &TaskData) -> Check {
    let model = fresh_model(data, -3.0)?;
    let mut absorbed = model.clone();
    absorbed.absorb_attention_scale().map_err(err)?;
    let mut rng = StdRng::seed_from_u64(SEED);
    let (mut worst, mut flips) = (0.0f64, 0);
    for _ in 0..100 {
        let b = random_batch(&mut rng, data.vocab.len(), data.seq_len)?;
        let (p, q) = (model.logits(&b).map_err(err)?, absorbed.logits(&b).map_err(err)?);
        worst = worst.max(p.max_abs_diff(&q).map_err(err)?);
        flips += usize::from(argmax(p.data()) != argmax(q.data()));
    }
    Ok(verdict(worst <= 1e-9 && flips == 0, format!("100 inputs, max abs logit difference {worst:.3e}, {flips} argmax changes")))
}

fn loss_of(model: &TransformerModel, batch: &Batch, target: usize) -> Result<f64, ModelError> {
    let mut eng = TapeEngine::new(|_| false);
    let logits = model.forward_tokens(&mut eng, batch)?;
    let loss = eng.tape.cross_entropy(logits, &[Some(target)])?;
    Ok(eng.tape.value(loss).item())
}

fn criterion_12(data: &TaskData) -> Check {
    let mut model = fresh_model(data, -3.0)?;
    let mut rng = StdRng::seed_from_u64(SEED + 1);
    let batch = random_batch(&mut rng, data.vocab.len(), data.seq_len)?;
    let target = 1;
    let mut eng = TapeEngine::new(|_| true);
    let logits = model.forward_tokens(&mut eng, &batch).map_err(err)?;
    let loss = eng.tape.cross_entropy(logits, &[Some(target)]).map_err(err)?;
    let grads = eng.tape.backward(loss).map_err(err)?;
    let params = eng.trainable_params();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut sampled = 0;
    while sampled < 32 {
        let (name, var) = &params[rng.random_range(0..params.len())];
        let Some(g) = grads.get(*var) else { continue };
        let i = rng.random_range(0..g.len());
        let analytic = g.data()[i];
        let orig = model.param(name).map_err(err)?.data()[i];
        model.param_mut(name).map_err(err)?.data_mut()[i] = orig + h;
        let up = loss_of(&model, &batch, target).map_err(err)?;
        model.param_mut(name).map_err(err)?.data_mut()[i] = orig - h;
        let down = loss_of(&model, &batch, target).map_err(err)?;
        model.param_mut(name).map_err(err)?.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        if analytic.abs().max(numeric.abs()) < 1e-8 {
            // both vanish, e.g. embedding rows of tokens absent from the batch
            continue;
        }
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        worst = worst.max(rel);
        sampled += 1;
    }
    Ok(verdict(worst < 1e-4, format!("32 parameters, max relative error {worst:.3e} (limit 1e-4)")))
}

fn report(results: &mut Vec<(u8, &'static str, Verdict)>, id: u8, name: &'static str, v: Verdict) {
    println!("criterion {id:>2} {}: {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    results.push((id, name, v));
}

fn main() {
    let started = Instant::now();
    let mut results = Vec::new();
    let unavailable = || verdict(false, "skipped: estimator unavailable");

    let mut est = None;
    report(&mut results, 1, "estimator fidelity", run_check(|| criterion_1(&mut est)));

    let classify = task(TaskKind::Classify);
    let mut trained = None;
    let v = match (&classify, &est) {
        (Ok(d), Some(e)) => run_check(|| criterion_5(d, e, &mut trained)),
        (Err(e), _) => verdict(false, format!("error: {e}")),
        _ => unavailable(),
    };
    report(&mut results, 5, "end-task degradation", v);

    let served: Result<(Arc<TransformerModel>, Vocab), String> = match (&classify, &est) {
        (Ok(d), Some(e)) => {
            let m = match trained.take() {
                Some(m) => Ok(m),
                None => converted_untrained(d, e),
            };
            m.map(|m| (Arc::new(m), d.vocab.clone()))
        }
        (Err(e), _) => Err(e.clone()),
        _ => Err("estimator unavailable".into()),
    };
    let mut rng = StdRng::seed_from_u64(SEED);
    let shadow = served.as_ref().map_err(Clone::clone).and_then(|(m, vocab)| {
        let texts: Vec<String> = (0..SESSIONS).map(|_| random_text(&mut rng, vocab, m.config.max_seq_len - 1)).collect();
        let shadow = sessions(m, vocab, Backend::Shadow, &texts)?;
        let fixed = sessions(m, vocab, Backend::FixedPoint, &texts)?;
        Ok((shadow, fixed))
    });
    match (&served, &shadow) {
        (Ok((m, _)), Ok((s, f))) => {
            report(&mut results, 2, "homomorphic correctness (shadow)", run_check(|| criterion_2(m, s)));
            report(&mut results, 3, "homomorphic correctness (fixed-point)", run_check(|| criterion_3(m, f)));
            report(&mut results, 4, "depth soundness", run_check(|| criterion_4(m, s)));
            let all: Vec<&SessionRun> = s.iter().chain(f.iter()).collect();
            report(&mut results, 10, "leakage audit", run_check(|| criterion_10(&all)));
        }
        (_, Err(e)) => {
            for (id, name) in [
                (2, "homomorphic correctness (shadow)"),
                (3, "homomorphic correctness (fixed-point)"),
                (4, "depth soundness"),
                (10, "leakage audit"),
            ] {
                report(&mut results, id, name, verdict(false, format!("error: {e}")));
            }
        }
        (Err(_), Ok(_)) => unreachable!("sessions need a served model"),
    }

    let tag = task(TaskKind::Tag);
    let v = match (&tag, &est) {
        (Ok(d), Some(e)) => run_check(|| criterion_6(d, e)),
        (Err(e), _) => verdict(false, format!("error: {e}")),
        _ => unavailable(),
    };
    report(&mut results, 6, "mask-value trend", v);

    let v = match (&classify, &est) {
        (Ok(d), Some(e)) => run_check(|| criterion_7(d, e)),
        (Err(e), _) => verdict(false, format!("error: {e}")),
        _ => unavailable(),
    };
    report(&mut results, 7, "weight-decay trend", v);

    let regress = task(TaskKind::Regress);
    let v = match (&regress, &est) {
        (Ok(d), Some(e)) => run_check(|| criterion_8(d, e)),
        (Err(e), _) => verdict(false, format!("error: {e}")),
        _ => unavailable(),
    };
    report(&mut results, 8, "schedule trend", v);

    report(&mut results, 9, "contract enforcement", run_check(criterion_9));

    let v = match &classify {
        Ok(d) => run_check(|| criterion_11(d)),
        Err(e) => verdict(false, format!("error: {e}")),
    };
    report(&mut results, 11, "absorption invariance", v);
    let v = match &classify {
        Ok(d) => run_check(|| criterion_12(d)),
        Err(e) => verdict(false, format!("error: {e}")),
    };
    report(&mut results, 12, "gradient correctness", v);

    results.sort_by_key(|r| r.0);
    println!();
    println!("acceptance summary ({:.0?})", started.elapsed());
    for (id, name, v) in &results {
        println!("  {id:>2} {} {name}", if v.pass { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
