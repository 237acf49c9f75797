mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hexform::approx::Schedule;
use hexform::data::TaskKind;
use hexform::he::Backend;

/// Train, convert and serve transformers under a leveled HE contract.
#[derive(Debug, Parser)]
#[command(name = "hexform", version)]
struct Cli {
    /// Base random seed.
    /// Also the key seed for `query`; a fresh key is drawn when absent.
    #[arg(long, global = true, env = "HEXFORM_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the softmax estimator on random rows.
    TrainEstimator(TrainEstimatorArgs),
    /// Run the approximation workflow on a task.
    Finetune(FinetuneArgs),
    /// Repeat the workflow over a range of one hyperparameter.
    Sweep(SweepArgs),
    /// Host encrypted inference sessions for a converted checkpoint.
    Serve(ServeArgs),
    /// Query a running server.
    Query(QueryArgs),
}

#[derive(Debug, Args)]
struct TrainEstimatorArgs {
    /// Attention row length the estimator is trained for.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Classify,
    Regress,
    Tag,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Classify => TaskKind::Classify,
            TaskArg::Regress => TaskKind::Regress,
            TaskArg::Tag => TaskKind::Tag,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScheduleArg {
    TwoStages,
    JointS,
    JointLn,
    JointSLn,
}

impl From<ScheduleArg> for Schedule {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::TwoStages => Schedule::TwoStages,
            ScheduleArg::JointS => Schedule::JointFtS,
            ScheduleArg::JointLn => Schedule::JointFtLn,
            ScheduleArg::JointSLn => Schedule::JointFtSLn,
        }
    }
}

#[derive(Debug, Clone, Args)]
struct TaskArgs {
    #[arg(long, value_enum, default_value = "classify")]
    task: TaskArg,
    /// Training TSV; synthetic data is generated when absent.
    #[arg(long, requires = "dev_tsv")]
    train_tsv: Option<PathBuf>,
    #[arg(long, requires = "train_tsv")]
    dev_tsv: Option<PathBuf>,
    /// Text columns in the TSV files.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    text_columns: u8,
    #[arg(long)]
    tsv_header: bool,
    #[arg(long, default_value_t = 16)]
    seq_len: usize,
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    #[arg(long, default_value_t = 2000)]
    train_size: usize,
    #[arg(long, default_value_t = 400)]
    dev_size: usize,
    /// Seed of the planted synthetic rule.
    #[arg(long, default_value_t = 17)]
    rule_seed: u64,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 512)]
    ffn: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
}

#[derive(Debug, Clone, Args)]
struct TrainingArgs {
    #[arg(long, default_value_t = -3.0, allow_negative_numbers = true)]
    mask_value: f64,
    #[arg(long, default_value_t = 0.1)]
    weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    /// Estimator checkpoint; one is trained on the fly when absent.
    #[arg(long)]
    estimator: Option<PathBuf>,
    /// Steps for an estimator trained on the fly.
    #[arg(long, default_value_t = 100_000)]
    estimator_steps: usize,
    #[arg(long, default_value_t = 400)]
    distill_steps: usize,
    /// Skip the exact and relu-only reference runs.
    #[arg(long)]
    no_references: bool,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    training: TrainingArgs,
    #[arg(long, value_enum, default_value = "two-stages")]
    schedule: ScheduleArg,
    /// Skip the encrypted evaluation of the final model.
    #[arg(long)]
    no_he_eval: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepParam {
    MaskValue,
    WeightDecay,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    param: SweepParam,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true, num_args = 1..)]
    values: Vec<f64>,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    training: TrainingArgs,
    #[arg(long, value_enum, default_value = "two-stages")]
    schedule: ScheduleArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Shadow,
    Fixedpoint,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Shadow => Backend::Shadow,
            BackendArg::Fixedpoint => Backend::FixedPoint,
        }
    }
}

fn parse_degree(s: &str) -> Result<usize, String> {
    let d: usize = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if hexform::he::POLY_DEGREES.contains(&d) {
        Ok(d)
    } else {
        Err(format!("degree must be one of {:?}", hexform::he::POLY_DEGREES))
    }
}

fn parse_coeff(s: &str) -> Result<u8, String> {
    let b: u8 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if hexform::he::COEFF_BITS.contains(&b) {
        Ok(b)
    } else {
        Err(format!("coefficient width must be one of {:?}", hexform::he::COEFF_BITS))
    }
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// 0 picks a free port; the bound address is printed on startup.
    #[arg(long, default_value_t = 7878)]
    port: u16,
    #[arg(long, default_value_t = 8192, value_parser = parse_degree)]
    he_degree: usize,
    /// Comma-separated coefficient modulus widths. Defaults to a chain
    /// deep enough for the two-layer model.
    #[arg(long, value_delimiter = ',', value_parser = parse_coeff)]
    he_coeffs: Vec<u8>,
    #[arg(long, default_value_t = 30)]
    scale_bits: u8,
    #[arg(long, value_enum, default_value = "shadow")]
    backend: BackendArg,
    /// Exit after the first session.
    #[arg(long)]
    once: bool,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 7878)]
    port: u16,
    #[arg(long)]
    text: String,
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn runtime(message: impl ToString) -> Self {
        Failure { code: 1, message: message.to_string() }
    }

    pub fn usage(message: impl ToString) -> Self {
        Failure { code: 2, message: message.to_string() }
    }

    pub fn contract(message: impl ToString) -> Self {
        Failure { code: 3, message: message.to_string() }
    }
}

/// Parses `args` (program name first) and runs the selected command.
pub fn try_run<I, T>(args: I) -> Result<(), Failure>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| {
        let code = u8::try_from(e.exit_code()).unwrap_or(2);
        Failure { code, message: e.render().to_string() }
    })?;
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::TrainEstimator(a) => commands::train_estimator(a, seed),
        Command::Finetune(a) => commands::finetune(a, seed),
        Command::Sweep(a) => commands::sweep(a, seed),
        Command::Serve(a) => commands::serve(a),
        Command::Query(a) => commands::query(a, cli.seed),
    }
}

/// Like [`try_run`], printing any failure; returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<T> = args.into_iter().collect();
    if let Err(e) = Cli::try_parse_from(args.clone()) {
        let _ = e.print();
        return u8::try_from(e.exit_code()).unwrap_or(2);
    }
    match try_run(args) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
