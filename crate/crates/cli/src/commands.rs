use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;

use hexform::approx::{
    fit_estimator, run_workflow, ApproxError, DistillConfig, EstimatorConfig, Schedule, SoftmaxEstimator,
    WorkflowConfig, WorkflowReport,
};
use hexform::checkpoint::Checkpoint;
use hexform::data::{gen_synthetic, load_tsv, Label, SyntheticTaskSpec, TaskData, TaskKind, TsvSchema};
use hexform::he::{Backend, HeError, HeParams, KeyPair};
use hexform::model::{ModelConfig, ModelError, TransformerModel};
use hexform::protocol::{ClientSession, ProtocolError, ServerSession, StreamTransport};
use hexform::train::{argmax, FineTuneConfig};

use crate::{
    Failure, FinetuneArgs, QueryArgs, ServeArgs, SweepArgs, SweepParam, TaskArgs, TrainEstimatorArgs, TrainingArgs,
};

/// Multiplicative levels available to a served model by default.
const DEFAULT_LEVELS: usize = 16;

type CmdResult = Result<(), Failure>;

fn approx_failure(e: ApproxError) -> Failure {
    match e {
        ApproxError::InvalidSpec(_) => Failure::usage(e),
        ApproxError::Stage { source, stage } if matches!(*source, ApproxError::InvalidSpec(_)) => {
            Failure::usage(format!("{stage}: {source}"))
        }
        other => Failure::runtime(other),
    }
}

pub fn train_estimator(args: TrainEstimatorArgs, seed: u64) -> CmdResult {
    if args.dim < 2 {
        return Err(Failure::usage(format!("estimator dim must be at least 2, got {}", args.dim)));
    }
    if args.steps == 0 || args.batch == 0 || !(args.lr > 0.0) {
        return Err(Failure::usage("steps, batch and lr must be positive"));
    }
    let cfg = EstimatorConfig { max_steps: args.steps, lr: args.lr, batch: args.batch, ..EstimatorConfig::new(args.dim, seed) };
    let (est, report) = fit_estimator(&cfg).map_err(approx_failure)?;
    Checkpoint::from_estimator(&est).save(&args.out).map_err(Failure::runtime)?;
    let kv = report.to_kv();
    fs::write(args.out.join("report.txt"), &kv).map_err(Failure::runtime)?;
    print!("{kv}");
    if report.heldout_mse > cfg.converge_mse {
        return Err(Failure::runtime(format!(
            "estimator did not converge: held-out mse {:e} above {:e}; checkpoint written to {}",
            report.heldout_mse,
            cfg.converge_mse,
            args.out.display()
        )));
    }
    Ok(())
}

fn load_task(args: &TaskArgs, seed: u64) -> Result<TaskData, Failure> {
    let kind = TaskKind::from(args.task);
    let (Some(train), Some(dev)) = (&args.train_tsv, &args.dev_tsv) else {
        let spec = SyntheticTaskSpec {
            kind,
            vocab_size: args.vocab_size,
            seq_len: args.seq_len,
            rule_seed: args.rule_seed,
            train_size: args.train_size,
            dev_size: args.dev_size,
            ..SyntheticTaskSpec::default_for(kind)
        };
        return gen_synthetic(&spec, seed).map_err(Failure::usage);
    };
    let schema = TsvSchema { kind, text_columns: args.text_columns as usize, has_header: args.tsv_header };
    let train = load_tsv(train, &schema).map_err(Failure::usage)?;
    let dev = load_tsv(dev, &schema).map_err(Failure::usage)?;
    let vocab = train.vocab();
    let mut dev_examples = dev.examples(&vocab, args.seq_len);
    if kind == TaskKind::Classify {
        let names: BTreeMap<usize, &str> = dev.label_map.iter().map(|(k, v)| (*v, k.as_str())).collect();
        for ex in &mut dev_examples {
            if let Label::Class(c) = &mut ex.label {
                let name = names[c];
                *c = *train
                    .label_map
                    .get(name)
                    .ok_or_else(|| Failure::usage(format!("dev label `{name}` does not occur in training data")))?;
            }
        }
    }
    let num_labels = match kind {
        TaskKind::Regress => 1,
        _ => train.label_map.len(),
    };
    Ok(TaskData { kind, num_labels, seq_len: args.seq_len, train: train.examples(&vocab, args.seq_len), dev: dev_examples, vocab })
}

fn base_model(args: &TaskArgs, data: &TaskData, mask_value: f64, seed: u64) -> Result<TransformerModel, Failure> {
    let cfg = ModelConfig {
        num_layers: args.layers,
        hidden_size: args.hidden,
        num_heads: args.heads,
        ffn_size: args.ffn,
        mask_value,
        ..ModelConfig::new(data.vocab.len(), data.seq_len, data.num_labels, data.kind.head())
    };
    TransformerModel::new(cfg, seed).map_err(Failure::usage)
}

fn load_or_fit_estimator(training: &TrainingArgs, dim: usize, seed: u64) -> Result<SoftmaxEstimator, Failure> {
    let est = match &training.estimator {
        Some(dir) => Checkpoint::load(dir).and_then(|c| c.estimator()).map_err(Failure::runtime)?,
        None => {
            let cfg = EstimatorConfig { max_steps: training.estimator_steps, ..EstimatorConfig::new(dim, seed) };
            let (est, report) = fit_estimator(&cfg).map_err(approx_failure)?;
            eprintln!("estimator trained: held-out mse {:e} after {} steps", report.heldout_mse, report.steps);
            est
        }
    };
    if est.dim != dim {
        return Err(Failure::usage(format!("estimator is for rows of {} but the task uses {dim}", est.dim)));
    }
    Ok(est)
}

fn workflow_config(training: &TrainingArgs, he_eval: Option<HeParams>, seed: u64) -> Result<WorkflowConfig, Failure> {
    if training.batch == 0 || training.epochs == 0 || !(training.lr > 0.0) || !(training.weight_decay >= 0.0) {
        return Err(Failure::usage("batch, epochs and lr must be positive and weight decay non-negative"));
    }
    Ok(WorkflowConfig {
        finetune: FineTuneConfig {
            epochs: training.epochs,
            batch: training.batch,
            lr: training.lr,
            weight_decay: training.weight_decay,
            seed,
            ..FineTuneConfig::default()
        },
        distill: DistillConfig { steps: training.distill_steps, seed, ..DistillConfig::default() },
        references: !training.no_references,
        he_eval,
        ..WorkflowConfig::default()
    })
}

fn default_he_params() -> HeParams {
    HeParams::with_levels(8192, DEFAULT_LEVELS).expect("valid default parameters")
}

pub fn finetune(args: FinetuneArgs, seed: u64) -> CmdResult {
    let data = load_task(&args.task, seed)?;
    let model = base_model(&args.task, &data, args.training.mask_value, seed)?;
    let est = load_or_fit_estimator(&args.training, data.seq_len, seed)?;
    let he_eval = (!args.no_he_eval).then(default_he_params);
    let cfg = workflow_config(&args.training, he_eval, seed)?;
    let schedule = Schedule::from(args.schedule);
    let (model, report) = run_workflow(&model, &data, &est, schedule, &cfg).map_err(approx_failure)?;
    let kv = report.to_kv();
    print!("{kv}");

    let mut ckpt = Checkpoint::from_model(&model);
    ckpt.vocab = Some(data.vocab.tokens().to_vec());
    ckpt.meta.insert("task".into(), data.kind.to_string());
    ckpt.meta.insert("schedule".into(), schedule.to_string());
    for line in kv.lines() {
        if let Some((k, v)) = line.split_once('=') {
            ckpt.meta.entry(k.to_string()).or_insert_with(|| v.to_string());
        }
    }
    ckpt.save(&args.out).map_err(Failure::runtime)?;
    fs::write(args.out.join("report.txt"), kv).map_err(Failure::runtime)?;
    Ok(())
}

fn sweep_row(report: &WorkflowReport) -> (f64, f64, f64) {
    let distill = report.distill.as_ref().map_or(f64::NAN, |d| d.mean_after());
    (report.final_metric(), report.max_norm_input, distill)
}

pub fn sweep(args: SweepArgs, seed: u64) -> CmdResult {
    if args.values.is_empty() {
        return Err(Failure::usage("--values needs at least one value"));
    }
    let data = load_task(&args.task, seed)?;
    let est = load_or_fit_estimator(&args.training, data.seq_len, seed)?;
    let schedule = Schedule::from(args.schedule);
    let name = match args.param {
        SweepParam::MaskValue => "mask_value",
        SweepParam::WeightDecay => "weight_decay",
    };
    println!("{:<14}{:>12}{:>14}{:>18}{:>16}", "param", "value", "dev_metric", "max_norm_input", "distill_mse");
    for &v in &args.values {
        let mut training = args.training.clone();
        match args.param {
            SweepParam::MaskValue => training.mask_value = v,
            SweepParam::WeightDecay => training.weight_decay = v,
        }
        let model = base_model(&args.task, &data, training.mask_value, seed)?;
        let cfg = workflow_config(&training, None, seed)?;
        let (_, report) = run_workflow(&model, &data, &est, schedule, &cfg).map_err(approx_failure)?;
        let (metric, norm, distill) = sweep_row(&report);
        println!("{name:<14}{v:>12}{metric:>14.4}{norm:>18.6e}{distill:>16.6e}");
    }
    Ok(())
}

fn serve_params(args: &ServeArgs) -> Result<HeParams, Failure> {
    let mut params = if args.he_coeffs.is_empty() {
        HeParams::with_levels(args.he_degree, DEFAULT_LEVELS)
    } else {
        HeParams::new(args.he_degree, args.he_coeffs.clone())
    }
    .map_err(Failure::usage)?;
    params.scale_bits = args.scale_bits;
    params.validate().map_err(Failure::usage)?;
    Ok(params)
}

fn is_not_he_ready(e: &ProtocolError) -> bool {
    matches!(e, ProtocolError::Model(ModelError::NotHeReady(_)))
}

pub fn serve(args: ServeArgs) -> CmdResult {
    let params = serve_params(&args)?;
    let ckpt = Checkpoint::load(&args.checkpoint).map_err(Failure::runtime)?;
    let model = Arc::new(ckpt.model().map_err(Failure::runtime)?);
    let vocab = ckpt.vocab.clone().ok_or_else(|| Failure::runtime("checkpoint has no vocabulary"))?;
    let task: TaskKind = match ckpt.meta.get("task") {
        Some(t) => t.parse().map_err(Failure::runtime)?,
        None => TaskKind::Classify,
    };
    let model_id = ckpt.meta.get("schedule").map_or_else(|| "model".to_string(), |s| format!("{task}/{s}"));
    let hosted = Arc::new(Hosted { model, params, backend: args.backend.into(), vocab, task, model_id });
    if let Err(e) = hosted.session() {
        if is_not_he_ready(&e) {
            return Err(Failure::contract(format!("model not HE-ready: {e}")));
        }
        return Err(Failure::runtime(e));
    }

    let listener = TcpListener::bind((args.host.as_str(), args.port)).map_err(Failure::runtime)?;
    let addr = listener.local_addr().map_err(Failure::runtime)?;
    println!("listening on {addr}");
    std::io::stdout().flush().map_err(Failure::runtime)?;
    for conn in listener.incoming() {
        let stream = match conn {
            Ok(s) => s,
            Err(e) => {
                eprintln!("accept failed: {e}");
                continue;
            }
        };
        if args.once {
            return hosted.serve_one(stream).map_err(Failure::runtime);
        }
        let hosted = Arc::clone(&hosted);
        std::thread::spawn(move || hosted.serve_one(stream));
    }
    Ok(())
}

struct Hosted {
    model: Arc<TransformerModel>,
    params: HeParams,
    backend: Backend,
    vocab: Vec<String>,
    task: TaskKind,
    model_id: String,
}

impl Hosted {
    fn session(&self) -> Result<ServerSession, ProtocolError> {
        let m = Arc::clone(&self.model);
        ServerSession::new(m, self.params.clone(), self.backend, self.vocab.clone(), self.task, self.model_id.clone())
    }

    fn serve_one(&self, stream: TcpStream) -> Result<(), ProtocolError> {
        let peer = stream.peer_addr().map_or_else(|_| "?".to_string(), |a| a.to_string());
        let mut server = self.session()?;
        let outcome = server.run(&mut StreamTransport::new(stream));
        match &outcome {
            Ok(o) => eprintln!(
                "{peer}: served, max depth {} of {}, {} relu round trips",
                o.report.max_depth, o.report.budget, o.report.relu_round_trips
            ),
            Err(e) => eprintln!("{peer}: session failed: {e}"),
        }
        outcome.map(|_| ())
    }
}

fn protocol_failure(e: ProtocolError) -> Failure {
    match &e {
        ProtocolError::EmptyQuery | ProtocolError::Model(ModelError::SeqTooLong { .. }) => Failure::usage(e),
        ProtocolError::He(HeError::DepthExceeded { .. } | HeError::UnsupportedOp(_)) => Failure::contract(e),
        ProtocolError::Remote { code, .. }
            if *code == hexform::protocol::codes::DEPTH_EXCEEDED || *code == hexform::protocol::codes::UNSUPPORTED_OP =>
        {
            Failure::contract(e)
        }
        _ => Failure::runtime(e),
    }
}

fn fmt_row(row: &[f64]) -> String {
    row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn query(args: QueryArgs, key_seed: Option<u64>) -> CmdResult {
    let key = match key_seed {
        Some(s) => KeyPair::from_seed(s),
        None => KeyPair::generate(&mut rand::rng()),
    };
    let stream = TcpStream::connect((args.host.as_str(), args.port)).map_err(Failure::runtime)?;
    let mut client = ClientSession::connect(StreamTransport::new(stream), key).map_err(protocol_failure)?;
    let task = client.task();
    let out = client.query(&args.text).map_err(protocol_failure)?;

    println!("model={}", client.model_id());
    println!("tokens={}", out.token_ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(","));
    let cols = *out.logits.shape().last().unwrap_or(&1);
    let rows: Vec<&[f64]> = out.logits.data().chunks(cols.max(1)).collect();
    for (i, r) in rows.iter().enumerate() {
        println!("logits.{i}={}", fmt_row(r));
    }
    match task {
        TaskKind::Classify => println!("prediction={}", argmax(rows[0])),
        TaskKind::Regress => println!("prediction={:.6}", rows[0][0]),
        TaskKind::Tag => {
            let tags: Vec<String> = rows.iter().skip(1).map(|r| argmax(r).to_string()).collect();
            println!("prediction={}", tags.join(","));
        }
    }
    println!("depth.max={}", out.report.max_depth);
    println!("depth.budget={}", out.report.budget);
    println!("relu_round_trips={}", out.report.relu_round_trips);
    Ok(())
}
