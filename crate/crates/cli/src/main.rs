//! `gcnpromo`: train a graph recommender, craft item-promotion perturbations
//! and evaluate them.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gcnpromo::eval::{AttackMethod, Protocol};

#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "gcnpromo", version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run config; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "GCNPROMO_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    /// Global seed, split into per-component seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-community train/test split.
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint with its epoch log.
    Train(TrainArgs),
    /// Craft one perturbation for one target item.
    Attack(AttackArgs),
    /// Run an evaluation protocol and write CSV and JSON reports.
    Eval(EvalArgs),
    /// Repeat an evaluation over a grid of budgets or masking thresholds.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 1500)]
    pub users: usize,
    #[arg(long, default_value_t = 2000)]
    pub items: usize,
    #[arg(long, default_value_t = 2)]
    pub communities: usize,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Training interactions, one `user item item ...` line per user.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out interactions in the same format.
    #[arg(long)]
    pub test: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Where to write the checkpoint (default `<out-dir>/model.ckpt`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct AttackParams {
    /// Maximum number of added edges.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub budget: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Recommendation-list length inside the attack objective.
    #[arg(long)]
    pub attack_k: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct AttackArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodArg::Proposed)]
    pub method: MethodArg,
    #[arg(long)]
    pub target: usize,
    #[command(flatten)]
    pub params: AttackParams,
    /// Perturbation file (default `<out-dir>/perturbation-<method>-<target>.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the target-column gradient as CSV (proposed method only).
    #[arg(long)]
    pub saliency: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Source model: attacked directly, substitute for blackbox, template for retrain.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub protocol: Option<ProtocolArg>,
    /// Attack methods; repeatable.
    #[arg(long = "method", value_enum)]
    pub methods: Vec<MethodArg>,
    /// Degree percentile of the target items.
    #[arg(long, value_parser = ["10", "30", "50"])]
    pub item_set: Option<String>,
    /// Number of sampled target items.
    #[arg(long)]
    pub items: Option<usize>,
    /// Explicit target items instead of sampling; repeatable.
    #[arg(long = "target")]
    pub targets: Vec<usize>,
    /// Budget from degrees: 1 = deg(Q65) - deg(Qs), 2 = mean degree - deg(Qs).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub budget_variant: Option<u8>,
    #[command(flatten)]
    pub params: AttackParams,
    /// Reported list lengths; repeatable.
    #[arg(long = "k", value_parser = clap::value_parser!(u64).range(1..))]
    pub ks: Vec<u64>,
    /// Victim checkpoints for the blackbox protocol; repeatable.
    #[arg(long = "victim")]
    pub victims: Vec<PathBuf>,
    /// Precomputed perturbation files to evaluate instead of crafting; repeatable.
    #[arg(long = "perturbation")]
    pub perturbations: Vec<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Grid points, comma separated. Defaults: gamma 0.05..0.95 step 0.10,
    /// budget 1..=--max-budget.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
    #[arg(long)]
    pub max_budget: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Proposed,
    Randfilter,
    Iufilter,
    Rufilter,
    All,
}

impl MethodArg {
    pub fn expand(self) -> Vec<AttackMethod> {
        match self {
            MethodArg::Proposed => vec![AttackMethod::Proposed],
            MethodArg::Randfilter => vec![AttackMethod::RandFilter],
            MethodArg::Iufilter => vec![AttackMethod::IuFilter],
            MethodArg::Rufilter => vec![AttackMethod::RuFilter],
            MethodArg::All => AttackMethod::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Whitebox,
    Blackbox,
    Retrain,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Whitebox => Protocol::Whitebox,
            ProtocolArg::Blackbox => Protocol::Blackbox,
            ProtocolArg::Retrain => Protocol::Retrain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Budget,
    Gamma,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&cli.common, &a),
        Command::Train(a) => commands::train(&cli.common, &a),
        Command::Attack(a) => commands::attack(&cli.common, &a),
        Command::Eval(a) => commands::eval(&cli.common, &a),
        Command::Sweep(a) => commands::sweep(&cli.common, &a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
