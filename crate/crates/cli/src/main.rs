//! `ub4d`: generate synthetic sequences, train, render, extract, evaluate
//! and run numerical self-checks.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, missing inputs or malformed configuration.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] ub4d::Error),
    /// Work finished but some checks failed.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Run(_) | Self::Failed(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ub4d", version, about = "Dynamic neural SDF reconstruction from monocular sequences")]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for every random choice of the verb.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Write a synthetic analytic sequence with ground truth.
    Generate(GenerateArgs),
    /// Train the fields on a dataset directory.
    Train(TrainArgs),
    /// Render one frame of a checkpoint from its dataset camera.
    Render(RenderArgs),
    /// March per-frame or canonical meshes from a checkpoint.
    Extract(ExtractArgs),
    /// Compare reconstructed meshes with ground truth.
    Evaluate(EvaluateArgs),
    /// Run the numerical self-checks and print a pass/fail table.
    Verify(VerifyArgs),
    /// Principal components of the learned per-frame latent codes.
    Pca(PcaArgs),
    /// Keep a random subset of proxy vertices.
    ProxyDecimate(DecimateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Family {
    Blob,
    BlobLarge,
    Sphere,
    Capsule,
    Cactus,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Scene description (the `scene.json` of an earlier run).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub family: Option<Family>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Ground-truth marching resolution.
    #[arg(long)]
    pub res: Option<usize>,
    /// Proxy vertices to write; 0 writes none.
    #[arg(long)]
    pub proxy_vertices: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    /// Full-size networks and schedule.
    Full,
    /// Small networks for single-machine runs.
    Compact,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training configuration JSON; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in defaults used when no configuration file is given.
    #[arg(long, value_enum, default_value = "full")]
    pub preset: Preset,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    /// Continue from a trainer checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset providing the camera.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    /// Output PNG; the mask goes next to it as PGM.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset whose cameras bound each frame's mesh.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Single frame; all frames when omitted.
    #[arg(long)]
    pub frame: Option<usize>,
    /// March the canonical SDF instead of frames.
    #[arg(long)]
    pub canonical: bool,
    #[arg(long, default_value_t = ub4d::extract::DEFAULT_RES)]
    pub res: usize,
    /// `h` for the cube `[-h, h]^3` or `x0,y0,z0,x1,y1,z1`.
    #[arg(long, default_value = "1")]
    pub bounds: String,
    /// Keep geometry outside the camera frustum.
    #[arg(long)]
    pub no_cull: bool,
    /// Mesh file (.ply or .obj) for one mesh, directory otherwise.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of `%04d.ply` reconstructions.
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset directory holding `gt_meshes/`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = ub4d::eval::DEFAULT_SAMPLES)]
    pub samples: usize,
    /// Skip rigid alignment before measuring.
    #[arg(long)]
    pub no_align: bool,
    /// JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Random directions per loss term in the gradient checks.
    #[arg(long, default_value_t = 50)]
    pub directions: usize,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub components: usize,
    /// JSON with projections and explained variance.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecimateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub vertices: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UB4D_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
