//! Experiment subcommands behind the `multibatch` binary.
//!
//! Every subcommand is deterministic given `--seed`: the dataset, the initial
//! state and the sampling stream are derived from it, and parallel work is
//! reduced in a fixed order, so `--threads` never changes the output.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use multibatch::Error;

mod commands;

pub use commands::{
    claim_demo, cluster_dataset, compare, converse_claim, fig2_head, forward_claim, full_gradient_fd_error, grad_check, train,
    unbiasedness, variance_scan, CompareOutcome, ConverseClaim, ForwardClaim,
};

#[derive(Debug, Parser)]
#[command(name = "multibatch", version, about = "Multibatch gradient estimation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
    /// Check that the multibatch estimate averages to the full gradient.
    Unbiasedness(UnbiasednessArgs),
    /// Measure estimator variance over a grid of batch sizes (CSV).
    VarianceScan(VarianceScanArgs),
    /// Train one configuration and emit its history (CSV).
    Train(TrainArgs),
    /// Train with both estimators on equal budgets and compare (CSV).
    Compare(CompareArgs),
    /// Metric loss zero implies multiclass loss zero, but not conversely.
    ClaimDemo(ClaimArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Worker threads; 0 uses one per core. Output does not depend on it.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Number of classes; defaults to min(default, m) where m is fixed.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Input feature dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub center_scale: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
}

#[derive(Debug, Clone, Args)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Samples in the dataset used for the full-gradient check.
    #[arg(long, default_value_t = 8)]
    pub m: usize,
    /// Random states checked per model.
    #[arg(long, default_value_t = 10)]
    pub states: usize,
}

#[derive(Debug, Clone, Args)]
pub struct UnbiasednessArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 6)]
    pub m: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Average over every k-subset instead of sampling.
    #[arg(long)]
    pub exhaustive: bool,
    /// Monte-Carlo draws in sampled mode.
    #[arg(long, default_value_t = 100_000)]
    pub trials: usize,
}

#[derive(Debug, Clone, Args)]
pub struct VarianceScanArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 60)]
    pub m: usize,
    #[arg(long, default_value_t = 6)]
    pub classes: usize,
    #[arg(long, default_value_t = 4)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2.0)]
    pub center_scale: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    /// Batch sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![4, 8, 16, 32])]
    pub ks: Vec<usize>,
    #[arg(long, default_value_t = 2000)]
    pub trials: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightingArg {
    /// Same pairs weigh 1, not-same pairs #same/#not-same.
    Balanced,
    Unit,
}

impl From<WeightingArg> for multibatch::Weighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::Balanced => multibatch::Weighting::Balanced,
            WeightingArg::Unit => multibatch::Weighting::UNIT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    Multibatch,
    Pairwise,
    Full,
}

impl From<EstimatorArg> for multibatch::EstimatorKind {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Multibatch => multibatch::EstimatorKind::Multibatch,
            EstimatorArg::Pairwise => multibatch::EstimatorKind::PairwiseMinibatch,
            EstimatorArg::Full => multibatch::EstimatorKind::Full,
        }
    }
}

/// Dataset, model and batching shared by `train` and `compare`.
#[derive(Debug, Clone, Args)]
pub struct TrainSetup {
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    /// Training samples per class.
    #[arg(long, default_value_t = 10)]
    pub per_class: usize,
    /// Held-out samples per class for pair accuracy; 0 reports training accuracy.
    #[arg(long, default_value_t = 5)]
    pub holdout_per_class: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Hidden width of the MLP; 0 trains a linear embedding.
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    /// Signature dimension; defaults to --dim.
    #[arg(long)]
    pub out_dim: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub center_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 4)]
    pub classes_per_batch: usize,
    #[arg(long, default_value_t = 4)]
    pub samples_per_class: usize,
    #[arg(long, default_value_t = 10)]
    pub eval_every: usize,
    #[arg(long, value_enum, default_value_t = WeightingArg::Balanced)]
    pub weighting: WeightingArg,
    /// Fraction of the run after which the learning rate drops; 1 disables.
    /// Defaults to 0.9 for `train` and 1 for `compare`.
    #[arg(long)]
    pub lr_drop_at: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub lr_drop_factor: f64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub setup: TrainSetup,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Multibatch)]
    pub estimator: EstimatorArg,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Save the final state as a JSON checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub setup: TrainSetup,
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Objective both runs race to.
    #[arg(long, default_value_t = 0.05)]
    pub target: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ClaimArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 10)]
    pub per_class: usize,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Metric objective that counts as zero.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

/// What a subcommand produced. `report` goes to stdout or `--out`, `notes`
/// to stderr.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Outcome {
    pub report: String,
    pub notes: String,
    pub success: bool,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.success {
            0
        } else {
            1
        }
    }

    fn note(&mut self, line: impl AsRef<str>) {
        let _ = writeln!(self.notes, "{}", line.as_ref());
    }
}

/// Failure to run a subcommand at all.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags: exit 2.
    Usage(String),
    /// The experiment itself failed: exit 1.
    Run(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(msg) => CliError::Usage(msg),
            other => CliError::Run(other),
        }
    }
}

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Usage(msg.into()))
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GradCheck(_) => "grad-check",
            Command::Unbiasedness(_) => "unbiasedness",
            Command::VarianceScan(_) => "variance-scan",
            Command::Train(_) => "train",
            Command::Compare(_) => "compare",
            Command::ClaimDemo(_) => "claim-demo",
        }
    }

    fn common(&self) -> &CommonArgs {
        match self {
            Command::GradCheck(a) => &a.common,
            Command::Unbiasedness(a) => &a.common,
            Command::VarianceScan(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Compare(a) => &a.common,
            Command::ClaimDemo(a) => &a.common,
        }
    }
}

/// Runs a parsed command on a pool of `--threads` workers.
pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let threads = cli.command.common().threads;
    let go = || match &cli.command {
        Command::GradCheck(a) => grad_check(a),
        Command::Unbiasedness(a) => unbiasedness(a),
        Command::VarianceScan(a) => variance_scan(a),
        Command::Train(a) => train(a),
        Command::Compare(a) => compare(a).map(|c| c.outcome),
        Command::ClaimDemo(a) => claim_demo(a),
    };
    if threads == 0 {
        return go();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {threads} threads: {e}")))?;
    pool.install(go)
}

/// Runs the command and delivers its report, returning the exit code.
pub fn main_with(cli: &Cli) -> i32 {
    match run(cli) {
        Ok(outcome) => {
            let out = &cli.command.common().out;
            if let Some(path) = out {
                if let Err(e) = fs::write(path, &outcome.report) {
                    eprintln!("error: cannot write {}: {e}", path.display());
                    return 1;
                }
            } else {
                print!("{}", outcome.report);
            }
            eprint!("{}", outcome.notes);
            outcome.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                let mut cmd = Cli::command();
                if let Some(sub) = cmd.find_subcommand_mut(cli.command.name()) {
                    let sub = sub.clone().bin_name(format!("multibatch {}", cli.command.name()));
                    eprintln!("\n{}", sub.clone().render_usage());
                }
                eprintln!("For more information, try '--help'.");
            }
            e.exit_code()
        }
    }
}
