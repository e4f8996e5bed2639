use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Clone, Parser)]
#[command(name = "sof", version, about = "Policy-gradient design of static output feedback gains")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// System description (JSON with fields A, B, C, Q, R, X0).
    #[arg(long, global = true, value_name = "PATH")]
    pub system: Option<PathBuf>,

    /// Use a bundled system instead of --system.
    #[arg(long, global = true, value_enum)]
    pub example: Option<Example>,

    /// vanilla, natural or gauss_newton.
    #[arg(long, global = true, value_name = "NAME")]
    pub method: Option<String>,

    /// Step size, or `auto` for the admissible bound kappa/L.
    #[arg(long, global = true, value_name = "F|auto", allow_hyphen_values = true)]
    pub eta: Option<String>,

    #[arg(long, global = true, value_name = "F")]
    pub epsilon: Option<f64>,

    #[arg(long = "max-iters", global = true, value_name = "N")]
    pub max_iters: Option<usize>,

    /// Comma-separated seeds (default 0..9 where seeds apply).
    #[arg(long = "seed-list", global = true, value_name = "CSV")]
    pub seed_list: Option<String>,

    /// Output directory for CSV/JSON artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Gain entries, comma separated, row-major.
    #[arg(long, global = true, value_name = "CSV", allow_hyphen_values = true)]
    pub gain: Option<String>,

    /// Number of trajectories per estimate.
    #[arg(long, global = true)]
    pub z: Option<usize>,

    /// Rollout length.
    #[arg(long, global = true)]
    pub l: Option<usize>,

    /// Perturbation radius.
    #[arg(long, global = true)]
    pub r: Option<f64>,

    /// Sublevel value; defaults to J of the gain.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,

    /// Scalar-gain grid `lo:hi:count`.
    #[arg(long, global = true, value_name = "LO:HI:N", allow_hyphen_values = true)]
    pub grid: Option<String>,

    /// Number of sampled gains per certificate.
    #[arg(long, global = true)]
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Check dimensions, definiteness, rank, controllability and observability.
    Validate,
    /// Cost, stability margin and gradient norm at a gain.
    Eval,
    /// Compare the analytic gradient with central finite differences.
    GradCheck,
    /// Model-based policy gradient run.
    Optimize,
    /// Zeroth-order (model-free) policy gradient runs, one per seed.
    Modelfree,
    /// Landscape constants and sampled bound certificates.
    Landscape,
    /// Cost, gradient norm and spectral radius on a scalar gain grid.
    Sweep,
    /// Regenerate the learning-curve data for a bundled example.
    Reproduce,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Eval => "eval",
            Command::GradCheck => "grad-check",
            Command::Optimize => "optimize",
            Command::Modelfree => "modelfree",
            Command::Landscape => "landscape",
            Command::Sweep => "sweep",
            Command::Reproduce => "reproduce",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Example {
    One,
    Two,
}
