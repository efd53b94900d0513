mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Train a byte-level toy transformer, sparsify its linear-layer inputs,
/// compensate with spontaneous neurons and evaluate the result.
#[derive(Debug, Parser)]
#[command(name = "spon", version)]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (falls back to the config, then SPON_SEED).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for artifacts [default: current directory].
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the dense model on a UTF-8 corpus.
    Train(TrainArgs),
    /// Calibrate per-site magnitude thresholds.
    CalibrateSparsity(CalibrateSparsityArgs),
    /// Calibrate spontaneous neurons for a sparsity profile.
    CalibrateSpon(CalibrateSponArgs),
    /// Fold spontaneous neurons into bias vectors.
    Fold(FoldArgs),
    /// Perplexity, KL to dense and representation shift on the held-out split.
    Eval(EvalArgs),
    /// Compare injection-site sets.
    AblateSites(AblateArgs),
    /// Attach spontaneous neurons to one layer's down projection at a time.
    AblateLayers(AblateArgs),
    /// Hidden-state shift of sparse and compensated models, plus PCA coordinates.
    ReprShift(ReprShiftArgs),
    /// Breakpoint-counting demonstration for 1-D ReLU sums.
    TheoryDemo(TheoryArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Model file to write [default: <out-dir>/model.spon].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub block: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub context_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CalibrateSparsityArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Fraction of each site's inputs to zero, in [0, 1).
    #[arg(long)]
    pub target: Option<f64>,
    /// Site selectors [default: all].
    #[arg(long, num_args = 1..)]
    pub sites: Option<Vec<String>>,
    /// [default: <out-dir>/profile.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    KlDistill,
    ResidualMean,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub block: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CalibrateSponArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// [default: kl-distill]
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Injection sites [default: down_proj].
    #[arg(long, num_args = 1..)]
    pub sites: Option<Vec<String>>,
    #[command(flatten)]
    pub distill: DistillArgs,
    /// [default: <out-dir>/params.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FoldArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// [default: <out-dir>/model_folded.spon]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// [default: <out-dir>/params_folded.json]
    #[arg(long)]
    pub params_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Sparsity profile; without it the model runs dense.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Spontaneous parameters (unfolded, or the folded record from `fold`).
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Dense reference for KL and hidden-state shift [default: the model
    /// with all biases removed].
    #[arg(long)]
    pub dense: Option<PathBuf>,
    #[arg(long)]
    pub block: Option<usize>,
    /// [default: <out-dir>/eval.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Site-set labels to run (ablate-sites only) [default: all eight].
    #[arg(long, num_args = 1..)]
    pub sets: Option<Vec<String>>,
    #[command(flatten)]
    pub distill: DistillArgs,
    /// [default: <out-dir>/ablate_<kind>.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// [default: <out-dir>/ablate_<kind>.csv]
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReprShiftArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Unfolded spontaneous parameters to compare as well.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub prompts: usize,
    /// [default: <out-dir>/repr_shift.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// [default: <out-dir>/repr_pca.csv]
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[arg(long, default_value_t = 4)]
    pub m: usize,
    #[arg(long, default_value_t = 3)]
    pub m_prime: usize,
    /// [default: <out-dir>/theory.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, missing files, unusable data.
    Input(String),
    /// Unreadable or incompatible artifact.
    Artifact(String),
    /// NaN/inf or divergence during computation.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Artifact(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Artifact(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<spon_core::Error> for CliError {
    fn from(e: spon_core::Error) -> Self {
        use spon_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Format(_) | E::Checksum { .. } | E::SchemaVersion { .. } | E::Json(_) | E::AlreadyFolded => {
                CliError::Artifact(msg)
            }
            E::NonFinite { .. } | E::Diverged(_) | E::Autodiff(_) => CliError::Numeric(msg),
            _ => CliError::Input(msg),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            if let CliError::Numeric(_) = e {
                match commands::write_diagnostics(&cli, &e) {
                    Ok(path) => eprintln!("diagnostics written to {}", path.display()),
                    Err(d) => eprintln!("could not write diagnostics: {}", d.message()),
                }
            }
            ExitCode::from(e.exit_code())
        }
    }
}
