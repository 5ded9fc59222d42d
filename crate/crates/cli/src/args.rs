use std::path::PathBuf;

use attrank::experiment::{Backend, Procedure};
use attrank::{RankingMode, TestMode};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "attr", version, about = "Feature attributions with verified top-K rankings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fixed-budget estimate followed by rank verification.
    Retro(Opts),
    /// Adaptive Shapley Sampling until the top K ranks are verified.
    Rankshap(Opts),
    /// Sequential probability ratio tests on a growing sample.
    Sprt(Opts),
    /// LIME feature selection with significance-driven pool growth.
    Slime(Opts),
    /// Global importance from local attributions.
    Global(Opts),
    /// Repeated runs of one procedure scored against exact Shapley values.
    Experiment(Opts),
    /// Write a built-in fixture as CSV files plus a model file.
    Synth(SynthOpts),
}

#[derive(Args, Debug, Clone)]
pub struct SynthOpts {
    /// Fixture name (linear8, mlp12, planted6, mixture6, null3).
    #[arg(long)]
    pub fixture: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Inference,
    Reproducibility,
}

impl From<ModeArg> for TestMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Inference => TestMode::Inference,
            ModeArg::Reproducibility => TestMode::Reproducibility,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    Sampling,
    Kernelshap,
}

impl From<EstimatorArg> for Backend {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Sampling => Backend::Sampling,
            EstimatorArg::Kernelshap => Backend::Kernelshap,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProcedureArg {
    Retro,
    Rankshap,
    Sprt,
    Slime,
    Global,
}

impl From<ProcedureArg> for Procedure {
    fn from(p: ProcedureArg) -> Self {
        match p {
            ProcedureArg::Retro => Procedure::Retro,
            ProcedureArg::Rankshap => Procedure::Rankshap,
            ProcedureArg::Sprt => Procedure::Sprt,
            ProcedureArg::Slime => Procedure::Slime,
            ProcedureArg::Global => Procedure::Global,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    /// Verify the attributions as given, without drawing more inputs.
    Retro,
    Resample,
    Sprt,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum EstimandArg {
    Exact,
    Sampled,
    Abs,
}

#[derive(Args, Debug, Clone)]
pub struct Opts {
    /// CSV of inputs with a header row; also the background unless
    /// --background is given.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub background: Option<PathBuf>,
    /// The last dataset column is a label, not a feature.
    #[arg(long)]
    pub has_label: bool,
    /// Model description file (linear or mlp text format).
    #[arg(long, conflicts_with = "bridge_cmd")]
    pub model: Option<PathBuf>,
    /// Shell command of an external model server speaking the line protocol.
    #[arg(long)]
    pub bridge_cmd: Option<String>,
    /// Built-in fixture used instead of --dataset/--model.
    #[arg(long, conflicts_with_all = ["dataset", "model", "bridge_cmd"])]
    pub fixture: Option<String>,

    /// Row of the dataset to explain.
    #[arg(long, default_value_t = 0)]
    pub input: usize,
    /// Rows explained by `experiment` (default: all).
    #[arg(long, value_delimiter = ',')]
    pub inputs: Vec<usize>,

    /// Ranks to verify; `experiment` accepts a list.
    #[arg(long, value_delimiter = ',', default_values_t = [2])]
    pub k: Vec<usize>,
    /// Significance levels; `experiment` accepts a list.
    #[arg(long, value_delimiter = ',', default_values_t = [0.1])]
    pub alpha: Vec<f64>,
    #[arg(long, value_enum, default_value_t = ModeArg::Inference)]
    pub mode: ModeArg,
    /// Rank by absolute value.
    #[arg(long)]
    pub abs: bool,

    #[arg(long, value_enum, default_value_t = EstimatorArg::Sampling)]
    pub estimator: EstimatorArg,
    /// Fixed budget for `retro`: permutations per feature, or coalitions
    /// for KernelSHAP (default 2d+2048).
    #[arg(long)]
    pub n: Option<usize>,
    /// Initial sample size (default 100 permutations; 1000 LIME perturbations).
    #[arg(long)]
    pub n0: Option<usize>,
    /// Sample cap (default 10000 permutations; 100000 LIME perturbations).
    #[arg(long)]
    pub max_n: Option<usize>,
    #[arg(long, default_value_t = 1.1)]
    pub buffer: f64,
    #[arg(long, default_value_t = 500)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.2)]
    pub beta: f64,
    #[arg(long, default_value_t = 50_000)]
    pub max_total: u64,
    #[arg(long, default_value_t = 250)]
    pub bootstrap: usize,
    /// Background rows averaged per value-function evaluation.
    #[arg(long, default_value_t = 10)]
    pub m: usize,
    /// S-LIME: normalized gap treated as a tie.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,

    /// Global: local attribution CSV (`input_id,feature_0,...`).
    #[arg(long)]
    pub psi: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = StrategyArg::Retro)]
    pub strategy: StrategyArg,
    #[arg(long, value_enum, default_value_t = EstimandArg::Exact)]
    pub estimand: EstimandArg,
    /// Global experiment: inputs drawn per repetition.
    #[arg(long, default_value_t = 100)]
    pub global_n: usize,

    /// Experiment: the procedure to repeat.
    #[arg(long, value_enum, default_value_t = ProcedureArg::Retro)]
    pub procedure: ProcedureArg,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value_t = 0.75)]
    pub na_threshold: f64,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for report.json, table.txt and CSV series. Without
    /// it the JSON report goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Opts {
    pub fn ranking(&self) -> RankingMode {
        if self.abs {
            RankingMode::Absolute
        } else {
            RankingMode::Signed
        }
    }

    pub fn first_k(&self) -> usize {
        self.k[0]
    }

    pub fn first_alpha(&self) -> f64 {
        self.alpha[0]
    }
}
