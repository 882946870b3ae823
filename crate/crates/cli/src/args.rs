use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "gradval",
    version,
    about = "Dataset valuation by gradient kernel mean matching"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score auxiliary datasets.
    Score(ScoreArgs),
    /// Turn a scores file into top-k selections with mixing weights.
    Select(SelectArgs),
    /// Compare score files under the fixed-compute protocol.
    Evaluate(EvaluateArgs),
    /// Synthetic experiments.
    #[command(subcommand)]
    Lab(LabCommand),
    /// Write the Gram matrix and alignment vector as CSV.
    GramDump(GramDumpArgs),
}

#[derive(Debug, Subcommand)]
pub enum LabCommand {
    /// Preview-size stability of KMM weights.
    Stability(StabilityArgs),
    /// Surrogate versus exact utility agreement over all size-k subsets.
    Faithfulness(FaithfulnessArgs),
    /// Selection methods compared with a quadratic trainer.
    Protocol(ProtocolArgs),
    /// Evaluate the plug-in stability bound.
    Bound(BoundArgs),
}

#[derive(Debug, Args)]
pub struct Source {
    /// GDVX or CSV gradient file.
    #[arg(long, conflicts_with = "preset")]
    pub input: Option<PathBuf>,
    /// Built-in gradient set (`paper-example`).
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct Output {
    /// Output CSV; a manifest is written next to it. Without it the CSV goes
    /// to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat `key = value` file with flag defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Scale on the target in the matching objective.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.0)]
    pub ridge: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    OneStep,
    Tv,
    Kmm,
    DatamodelUniform,
    DatamodelCs,
    GradexFs,
    GradexRe,
    Random,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// l1 penalty (penalized KMM).
    #[arg(long, conflicts_with = "k_budget")]
    pub gamma: Option<f64>,
    /// l1 budget (constrained KMM); `inf` for no budget.
    #[arg(long)]
    pub k_budget: Option<f64>,
    /// Use cosine similarity for one-step scores.
    #[arg(long)]
    pub cosine: bool,
    /// KMM on unit-normalized gradients.
    #[arg(long, conflicts_with = "curvature")]
    pub normalized: bool,
    /// Diagonal curvature values, one per gradient coordinate.
    #[arg(long)]
    pub curvature: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Design rows or ensemble subsets (default 10 N).
    #[arg(long)]
    pub rows: Option<usize>,
    /// DataModel l1 penalty.
    #[arg(long, default_value_t = 1e-4)]
    pub alpha: f64,
    /// Inclusion fraction for sampled subsets.
    #[arg(long, default_value_t = 0.5)]
    pub rho: f64,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SelectArgs {
    /// `name,score` CSV.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub k_grid: Vec<usize>,
    /// Softmax mixing over the selection instead of uniform.
    #[arg(long)]
    pub softmax_temp: Option<f64>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4])]
    pub k_grid: Vec<usize>,
    /// Updates per budget.
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    /// Probability of a target batch at each update.
    #[arg(long, default_value_t = 0.5)]
    pub rho: f64,
    /// Trainer step size.
    #[arg(long, default_value_t = 0.01)]
    pub eta: f64,
    /// Isotropic curvature of the target loss.
    #[arg(long, default_value_t = 1.0)]
    pub curvature_lambda: f64,
    /// Per-coordinate noise of sampled examples.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Examples per dataset.
    #[arg(long, default_value_t = 64)]
    pub examples: usize,
    #[arg(long)]
    pub softmax_temp: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub source: Source,
    /// Score CSVs, labelled by file stem.
    #[arg(long, value_delimiter = ',', required = true)]
    pub scores: Vec<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct GramDumpArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, conflicts_with = "curvature")]
    pub normalized: bool,
    #[arg(long)]
    pub curvature: Option<PathBuf>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct StabilityArgs {
    /// `default` or `quick`; explicit flags override it.
    #[arg(long, default_value = "default")]
    pub preset: String,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    /// Per-example gradient norm cap.
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub m_grid: Option<Vec<usize>>,
    #[arg(long)]
    pub replicas: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub store_size: Option<usize>,
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct WorldArgs {
    /// `paper-example`, or a redundancy pattern such as `independent`,
    /// `duplicate(0->1)`, `clustered(3)`. Also accepted as `--preset`.
    #[arg(long, visible_alias = "preset", default_value = "independent")]
    pub world: String,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub d: usize,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct FaithfulnessArgs {
    #[command(flatten)]
    pub world: WorldArgs,
    /// Subset size.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub curvature_lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ProtocolArgs {
    #[command(flatten)]
    pub world: WorldArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// l1 budget for the KMM method (default: largest k).
    #[arg(long)]
    pub k_budget: Option<f64>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct BoundArgs {
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 100)]
    pub d: usize,
    #[arg(long, default_value_t = 3.0)]
    pub k: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
    #[arg(long, default_value_t = 0.5)]
    pub mu: f64,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    #[arg(long, default_value_t = 1024)]
    pub m: usize,
    #[command(flatten)]
    pub output: Output,
}
