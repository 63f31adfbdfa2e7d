use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use facehop_core::active::Strategy;

#[derive(Debug, Parser)]
#[command(name = "facehop", version, about = "Low-resolution face verification with PixelHop++ features")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit transforms and classifiers on a pairs file and save the model.
    Train(TrainArgs),
    /// K-fold cross-validation on a pairs file.
    Eval(EvalArgs),
    /// Match probability for two face images.
    Verify(VerifyArgs),
    /// Rank gallery identities for a probe image.
    Identify(IdentifyArgs),
    /// Simulate pool-based active learning with a ground-truth oracle.
    Active(ActiveArgs),
    /// Print the parameter table of a model or of given node counts.
    Params(ParamsArgs),
    /// Write a synthetic face dataset with a pairs file.
    Synth(SynthArgs),
    /// Dump pair features as CSV.
    Features(FeaturesArgs),
    /// Run the annotation and verification HTTP API.
    Serve(ServeArgs),
}

/// Where the pairs come from and how images are normalized.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Root directory of the images named in the pairs file.
    #[arg(long)]
    pub data: PathBuf,
    /// Pairs file; relative paths are taken under --data.
    #[arg(long, default_value = "pairs.txt")]
    pub pairs: PathBuf,
    /// Side of the normalized face.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Simulate capture at this resolution before normalizing.
    #[arg(long)]
    pub low_res: Option<usize>,
    /// Crop the central square before resizing.
    #[arg(long)]
    pub center_crop: bool,
    /// Decoded images kept in memory.
    #[arg(long, default_value_t = facehop_core::dataio::DEFAULT_CACHE_CAPACITY)]
    pub cache: usize,
}

/// Classifier hyperparameters.
#[derive(Debug, Args)]
pub struct HyperArgs {
    /// L2 strength; defaults to 1/n.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

/// Transform hyperparameters.
#[derive(Debug, Args)]
pub struct FitArgs {
    /// Luma discard threshold E_C.
    #[arg(long, default_value_t = 0.0005)]
    pub ec: f64,
    /// Luma forward threshold E_F.
    #[arg(long, default_value_t = 0.0005)]
    pub ef: f64,
    /// Chroma discard threshold E_C.
    #[arg(long, default_value_t = 0.0004)]
    pub ec_crcb: f64,
    /// Chroma forward threshold E_F.
    #[arg(long, default_value_t = 0.0004)]
    pub ef_crcb: f64,
    /// Neighborhood window.
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    /// Share of patches used to fit each transform.
    #[arg(long, default_value_t = 1.0)]
    pub patch_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train on mirrored copies of every pair as well.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub augment: bool,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Leave this fold out of training and report accuracy on it.
    #[arg(long)]
    pub hold_out: Option<usize>,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Keep this model's transforms and retrain only the classifiers per fold.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Expected fold count; fails if the pairs file has a different one.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Write per-fold results here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    pub image_a: PathBuf,
    pub image_b: PathBuf,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory with one subdirectory of images per identity.
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub probe: PathBuf,
    /// Identities to list.
    #[arg(long, default_value_t = 5)]
    pub top: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OracleKind {
    /// Answer queries from the pairs file labels.
    GroundTruth,
}

#[derive(Debug, Args)]
pub struct ActiveArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Use this model's transforms instead of fitting them on the pool.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "entropy", value_parser = parse_strategy)]
    pub strategy: Strategy,
    /// Queries per round.
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    /// Total labels including the seed set; defaults to half the pool.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = OracleKind::GroundTruth)]
    pub oracle: OracleKind,
    /// Last folds held out for scoring; the rest is the pool.
    #[arg(long, default_value_t = 1)]
    pub test_folds: usize,
    /// Share of the pool labeled at random before the first query.
    #[arg(long, default_value_t = 0.05)]
    pub initial_fraction: f64,
    /// Learning-curve CSV to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: facehop_core::Error| e.to_string())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AccountingArg {
    /// Joint chroma kernels at their true length.
    Text,
    /// Every first-level kernel counted as 25 values.
    Table4,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Read node counts from a trained model.
    #[arg(long, conflicts_with_all = ["k1", "k2", "k3"])]
    pub model: Option<PathBuf>,
    /// Level-1 node counts as `Y,CrCb`.
    #[arg(long, value_parser = parse_pair, requires_all = ["k2", "k3"])]
    pub k1: Option<(usize, usize)>,
    #[arg(long, value_parser = parse_pair, requires_all = ["k1", "k3"])]
    pub k2: Option<(usize, usize)>,
    #[arg(long, value_parser = parse_pair, requires_all = ["k1", "k2"])]
    pub k3: Option<(usize, usize)>,
    #[arg(long, value_enum, default_value_t = AccountingArg::Text)]
    pub accounting: AccountingArg,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `Y,CrCb`, got {s:?}"))?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((n(a)?, n(b)?))
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub identities: usize,
    /// Images per identity.
    #[arg(long, default_value_t = 10)]
    pub images: usize,
    /// Per-pixel Gaussian noise σ on the 0..255 scale.
    #[arg(long, default_value_t = 8.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Matched pairs, and as many mismatched, over all folds; defaults to
    /// every matched combination up to 1000.
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    /// CSV to write; stdout if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "FACEHOP_BIND", default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Directory holding pairs files and images.
    #[arg(long, env = "FACEHOP_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "FACEHOP_MODEL")]
    pub model: Option<PathBuf>,
    /// Session store directory.
    #[arg(long, env = "FACEHOP_SESSIONS")]
    pub sessions: PathBuf,
    /// Bearer token required on every request.
    #[arg(long, env = "FACEHOP_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    #[arg(long, default_value_t = facehop_core::dataio::DEFAULT_CACHE_CAPACITY)]
    pub cache: usize,
}
