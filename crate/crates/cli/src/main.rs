use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

/// Joint pose and shape estimation of objects from multi-view depth and masks.
#[derive(Debug, Parser)]
#[command(name = "bishape", version, about)]
struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON file with `train`, `optim`, `init`, `scene` and `pipeline`
    /// sections; fields left out keep their defaults, flags win over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a training corpus of superellipsoid instances.
    GenCorpus(GenCorpusArgs),
    /// Train the coarse and fine decoders on a corpus.
    Train(TrainArgs),
    /// Generate a random scene specification.
    GenScene(GenSceneArgs),
    /// Render depth and masks and sample labeled points for every object.
    Render(RenderArgs),
    /// Initial poses from masks: ellipse fits, dual quadric, pose recovery.
    Init(InitArgs),
    /// Joint pose and shape optimization from the initial poses.
    Optimize(OptimizeArgs),
    /// Extract world-frame meshes of the estimates.
    Mesh(MeshArgs),
    /// Compare estimates with the scene ground truth.
    Eval(EvalArgs),
    /// Run render, init, optimize, mesh and eval into one directory.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Output corpus file.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of instances.
    #[arg(long, default_value_t = 10)]
    pub instances: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output weights file.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Trained per-instance codes as JSON.
    #[arg(long)]
    pub codes: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenSceneArgs {
    /// Output scene JSON.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub objects: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    /// Depth noise standard deviation in meters.
    #[arg(long)]
    pub depth_noise: Option<f64>,
    /// Mask morphology radius in pixels (negative erodes).
    #[arg(long, allow_hyphen_values = true)]
    pub mask_radius: Option<i32>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Directory for depth maps, masks and point files.
    #[arg(long)]
    pub out: PathBuf,
}

/// Decoder weights, either `path` for every class or `class=path`.
#[derive(Debug, Args)]
pub struct WeightArgs {
    #[arg(long = "weights", required = true)]
    pub weights: Vec<String>,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// Scene JSON (with `--views`), or an ellipse fixture with `--ellipses`.
    #[arg(long, required_unless_present = "ellipses")]
    pub scene: Option<PathBuf>,
    /// Directory written by `render`.
    #[arg(long, requires = "scene")]
    pub views: Option<PathBuf>,
    /// JSON with `cameras`, `ellipses` and `semi_axes`; no weights needed.
    #[arg(long, conflicts_with_all = ["scene", "views"])]
    pub ellipses: Option<PathBuf>,
    #[arg(long = "weights")]
    pub weights: Vec<String>,
    /// Output JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Directory written by `render`.
    #[arg(long)]
    pub views: PathBuf,
    /// Output of `init`.
    #[arg(long)]
    pub init: PathBuf,
    #[command(flatten)]
    pub weights: WeightArgs,
    /// Output estimates JSON.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MeshArgs {
    #[arg(long)]
    pub estimates: PathBuf,
    #[command(flatten)]
    pub weights: WeightArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Grid samples per axis.
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long, value_parser = ["ply", "obj"], default_value = "ply")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub estimates: PathBuf,
    #[command(flatten)]
    pub weights: WeightArgs,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[command(flatten)]
    pub weights: WeightArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub resolution: Option<usize>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = config::FileConfig::load(cli.config.as_deref())?;
    let ctx = commands::Context {
        seed: cli.seed,
        jobs: cli.jobs.max(1),
        file,
    };
    match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(&ctx, &a),
        Command::Train(a) => commands::train(&ctx, &a),
        Command::GenScene(a) => commands::gen_scene(&ctx, &a),
        Command::Render(a) => commands::render(&ctx, &a),
        Command::Init(a) => commands::init(&ctx, &a),
        Command::Optimize(a) => commands::optimize(&ctx, &a),
        Command::Mesh(a) => commands::mesh(&ctx, &a),
        Command::Eval(a) => commands::eval(&ctx, &a),
        Command::Pipeline(a) => commands::pipeline(&ctx, &a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e
                .chain()
                .find_map(|c| c.downcast_ref::<bishape::Error>())
                .is_some_and(bishape::Error::is_numerical);
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}
