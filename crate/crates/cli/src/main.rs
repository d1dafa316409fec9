//! `kronekit`: plan, compress, verify, benchmark and distill Kronecker
//! students.
//!
//! Exit codes: 0 success, 2 invalid input, 3 numerical or verification
//! failure, 4 infeasible compression target.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use output::Format;

#[derive(Parser)]
#[command(
    name = "kronekit",
    version,
    about = "Kronecker-factored Transformer compression"
)]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, env = "KRONEKIT_SEED", default_value_t = 0, global = true)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Text, global = true)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Choose factor shapes and report parameters and FLOPs.
    Plan(PlanArgs),
    /// Replace planned weights of a dense checkpoint by nearest Kronecker factors.
    Compress(CompressArgs),
    /// Run consistency checks on a checkpoint.
    Verify(VerifyArgs),
    /// Time dense against Kronecker linear maps.
    Bench(BenchArgs),
    /// Train a Kronecker student from a dense teacher.
    Distill(DistillArgs),
    /// Parameter and FLOPs table for the dense model and any number of plans.
    Report(ReportArgs),
    /// Train the desk-scale teacher on the synthetic task.
    Teacher(TeacherArgs),
}

#[derive(Args)]
pub struct PlanArgs {
    /// Architecture JSON.
    pub arch: PathBuf,
    /// Smallest acceptable whole-model compression factor.
    #[arg(long, conflicts_with = "shapes", required_unless_present = "shapes")]
    pub ratio: Option<f64>,
    /// Plan JSON with fixed shapes.
    #[arg(long)]
    pub shapes: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub seq_len: usize,
    /// Accept plans whose factor exceeds the closest feasible one by this fraction.
    #[arg(long, default_value_t = 0.05)]
    pub slack: f64,
    /// Write the plan JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CompressArgs {
    /// Dense checkpoint.
    pub model: PathBuf,
    /// Plan JSON.
    pub plan: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Power-iteration stopping tolerance.
    #[arg(long, default_value_t = kronekit_core::nkp::DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = kronekit_core::nkp::DEFAULT_MAX_ITER)]
    pub max_iter: usize,
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Any KTS1 checkpoint.
    pub checkpoint: PathBuf,
    /// Largest tolerated magnitude of any stored value.
    #[arg(long, default_value_t = 1e4)]
    pub max_abs: f64,
    /// Relative tolerance of the factor-pair oracle.
    #[arg(long, default_value_t = 1e-10)]
    pub oracle_tol: f64,
    /// Tolerance on softmax row sums in the probe forward.
    #[arg(long, default_value_t = 1e-9)]
    pub softmax_tol: f64,
    #[arg(long, default_value_t = 8)]
    pub probe_len: usize,
}

#[derive(Args)]
pub struct BenchArgs {
    /// Plan JSON; needs --arch.
    #[arg(long, required_unless_present = "model", requires = "arch")]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub arch: Option<PathBuf>,
    /// Kronecker checkpoint whose layer-0 shapes are timed.
    #[arg(long, conflicts_with = "plan")]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 50)]
    pub iters: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    PretrainKd,
    FinetuneKd,
    NoKd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogitArg {
    Mse,
    Kl,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeatureArg {
    ModuleOutput,
    PostNorm,
}

#[derive(Args)]
pub struct DistillArgs {
    /// Dense teacher checkpoint.
    pub teacher: PathBuf,
    /// Plan JSON for the student.
    pub plan: PathBuf,
    #[arg(long, value_enum, default_value_t = StageArg::FinetuneKd)]
    pub stage: StageArg,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.02)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Global gradient-norm limit; 0 disables clipping.
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    #[arg(long, value_enum, default_value_t = LogitArg::Mse)]
    pub logit_loss: LogitArg,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Attention tensor pooled into the projection features.
    #[arg(long, value_enum, default_value_t = FeatureArg::ModuleOutput)]
    pub feature: FeatureArg,
    /// Student checkpoint output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON-lines loss history output.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Add elapsed milliseconds to history records, which makes them
    /// differ between runs.
    #[arg(long)]
    pub wall_time: bool,
    /// Run the four pretraining/finetuning KD regimes instead of one stage.
    #[arg(long)]
    pub ablate: bool,
    /// Pretraining steps for --ablate.
    #[arg(long, default_value_t = 500)]
    pub pretrain_steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub pretrain_lr: f64,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Architecture JSON.
    pub arch: PathBuf,
    /// Plan JSON files, one row each.
    #[arg(long = "plan")]
    pub plans: Vec<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub seq_len: usize,
}

#[derive(Args)]
pub struct TeacherArgs {
    #[arg(long)]
    pub arch: Option<PathBuf>,
    /// Shapes of the structured initialization.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// An error with the exit code it maps to.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

impl From<kronekit_core::Error> for Failure {
    fn from(e: kronekit_core::Error) -> Self {
        let code = match &e {
            kronekit_core::Error::Infeasible { .. } => 4,
            e if e.is_numerical() => 3,
            _ => 2,
        };
        Self::new(code, e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::new(2, e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(2, e)
    }
}

pub struct Ctx {
    pub seed: u64,
    pub format: Format,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx {
        seed: cli.seed,
        format: cli.format,
    };
    let res = match cli.command {
        Command::Plan(a) => commands::plan(&ctx, a),
        Command::Compress(a) => commands::compress(&ctx, a),
        Command::Verify(a) => commands::verify(&ctx, a),
        Command::Bench(a) => commands::bench(&ctx, a),
        Command::Distill(a) => commands::distill(&ctx, a),
        Command::Report(a) => commands::report(&ctx, a),
        Command::Teacher(a) => commands::teacher(&ctx, a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
