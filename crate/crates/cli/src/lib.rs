//! Command-line driver: dataset generation, training, rendering,
//! evaluation, ablations, feature analysis, benchmarks and a self-test.

pub mod checks;
mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{RunConfig, RESOLVED_CONFIG};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<dvsm::Error> for CliError {
    fn from(e: dvsm::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dvsm", about = "Decoder-only view synthesis with a KV-cache scene representation")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set model.D=64`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic scene dataset at `data.path`.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the dataset at `data.path`, writing into `output`.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        stop_after: Option<u64>,
        #[arg(long, default_value_t = 50)]
        log_every: u64,
    },
    /// Render one camera of a scene from its K-means context views.
    Render(RenderArgs),
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the ablation variants (a)–(l).
    Ablate {
        /// Only construct the variants and count parameters.
        #[arg(long)]
        dry: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer alignment of the two branches' attended features.
    AnalyzeFeatures(FeatureArgs),
    /// Reconstruction time and render rate versus context size.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 4, 8])]
        views: Vec<usize>,
        /// Scene id; defaults to the first test scene.
        #[arg(long)]
        scene: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient checks, cache equivalence and permutation invariance.
    Selftest,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A `scene_NNNN` directory inside a generated dataset.
    #[arg(long)]
    scene_dir: PathBuf,
    /// Frame index of the camera to render.
    #[arg(long, conflicts_with = "camera_json", required_unless_present = "camera_json")]
    camera: Option<usize>,
    /// World-frame camera as JSON.
    #[arg(long)]
    camera_json: Option<PathBuf>,
    /// Number of K-means context views; defaults to `eval.context_k`.
    #[arg(long)]
    context: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FeatureArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Checkpoint of a second (e.g. decoupled) model to compare against.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Scene id; defaults to the first test scene.
    #[arg(long)]
    scene: Option<usize>,
    /// Index into the context views.
    #[arg(long, default_value_t = 0)]
    view: usize,
    /// Also write PCA-to-RGB images per layer.
    #[arg(long)]
    pca: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Requested internal thread count from `DVSM_THREADS` (default 1).
pub fn requested_threads() -> usize {
    std::env::var("DVSM_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    eprint!("{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let explicit = cli.config.is_some();
    let base = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(&cli.sets)?.resolved();
    let ctx = commands::Context {
        cfg,
        explicit_model: explicit || cli.sets.iter().any(|s| s.starts_with("model.")),
        threads: requested_threads(),
    };
    match cli.command {
        Command::GenData { out } => commands::gen_data(&ctx, out),
        Command::Train { resume, stop_after, log_every } => commands::train(&ctx, resume, stop_after, log_every),
        Command::Render(a) => commands::render(
            &ctx,
            commands::RenderRequest {
                checkpoint: a.checkpoint,
                scene_dir: a.scene_dir,
                camera: a.camera,
                camera_json: a.camera_json,
                context: a.context,
                resolution: a.resolution,
                out: a.out,
            },
        ),
        Command::Eval { checkpoint, out } => commands::eval(&ctx, &checkpoint, out),
        Command::Ablate { dry, out } => commands::ablate(&ctx, dry, out),
        Command::AnalyzeFeatures(a) => commands::analyze_features(&ctx, &a.checkpoint, a.compare.as_deref(), a.scene, a.view, a.pca, a.out),
        Command::Bench { checkpoint, views, scene, out } => commands::bench(&ctx, &checkpoint, &views, scene, out),
        Command::Selftest => commands::selftest(),
    }
}
