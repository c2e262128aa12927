//! Experiment runner: every subcommand reads one TOML config, derives all
//! randomness from its seed, and writes results only under the configured
//! output directory. Report bodies are deterministic; timing goes to a
//! sidecar file.

pub mod commands;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ncl_core::config::ExperimentConfig;
use ncl_core::NclError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG_ERROR: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "ncl",
    about = "Non-negative contrastive learning experiments on exact latent-class models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Path to the experiment config (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override the config's output directory (also: NCL_OUTPUT_DIR).
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Override the config's global seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the model and write its exact matrices as CSV.
    Generate(CommonArgs),
    /// Train the configured encoder; write a checkpoint and a trace.
    Train(CommonArgs),
    /// Evaluate the requested metrics into an experiment report.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to evaluate; defaults to <output_dir>/checkpoint.ckpt
        /// when present, otherwise the closed-form optimal features.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the theorem verification suite; nonzero exit on any failure.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// Training / factorization restarts for the uniqueness check.
        #[arg(long, default_value_t = 5)]
        restarts: usize,
    },
    /// Expected-activation feature selection: all vs random-n vs top-n.
    Select {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of dimensions to keep; defaults to the class count.
        #[arg(long)]
        keep: Option<usize>,
        /// Random-selection draws to average over.
        #[arg(long, default_value_t = 20)]
        random_seeds: usize,
    },
    /// Paired unconstrained-vs-non-negative comparison over shared seeds.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of paired seeds.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
}

/// Config plus resolved overrides, shared by every subcommand.
pub struct RunContext {
    pub config: ExperimentConfig,
    pub config_text: String,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl RunContext {
    pub fn load(common: &CommonArgs) -> Result<Self, NclError> {
        let config_text = std::fs::read_to_string(&common.config)?;
        let mut config = ExperimentConfig::from_toml(&config_text)?;
        if let Some(seed) = common.seed {
            config.seed = seed;
        }
        let output_dir = common
            .output_dir
            .clone()
            .or_else(|| std::env::var_os("NCL_OUTPUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(&config.output_dir));
        std::fs::create_dir_all(&output_dir)?;
        let seed = config.seed;
        Ok(Self {
            config,
            config_text,
            output_dir,
            seed,
        })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

/// Run a parsed command, translating errors into the documented exit codes.
pub fn run(cli: Cli) -> i32 {
    let outcome = match &cli.command {
        Command::Generate(common) => with_context(common, commands::generate::run),
        Command::Train(common) => with_context(common, commands::train::run),
        Command::Evaluate { common, checkpoint } => with_context(common, |ctx| {
            commands::evaluate::run(ctx, checkpoint.as_deref())
        }),
        Command::Verify { common, restarts } => {
            with_context(common, |ctx| commands::verify::run(ctx, *restarts))
        }
        Command::Select {
            common,
            keep,
            random_seeds,
        } => with_context(common, |ctx| {
            commands::select::run(ctx, *keep, *random_seeds)
        }),
        Command::Compare { common, seeds } => {
            with_context(common, |ctx| commands::compare::run(ctx, *seeds))
        }
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            classify_error(&err)
        }
    }
}

fn with_context(
    common: &CommonArgs,
    body: impl FnOnce(&RunContext) -> Result<i32, NclError>,
) -> Result<i32, NclError> {
    let ctx = RunContext::load(common)?;
    body(&ctx)
}

fn classify_error(err: &NclError) -> i32 {
    match err {
        NclError::ConfigInvalid(_)
        | NclError::UnknownMetric(_)
        | NclError::LabelMapMismatch(_)
        | NclError::NonStochastic { .. }
        | NclError::ZeroMarginal { .. }
        | NclError::DimensionMismatch(_)
        | NclError::Io(_) => EXIT_CONFIG_ERROR,
        _ => EXIT_VERIFY_FAILED,
    }
}

/// Write the report body and its timing sidecar.
pub fn write_report(
    ctx: &RunContext,
    name: &str,
    report: &ncl_core::report::ExperimentReport,
    started: std::time::Instant,
    started_unix_ms: u128,
) -> Result<(), NclError> {
    std::fs::write(ctx.out(name), report.to_json()?)?;
    let sidecar = ncl_core::report::TimingSidecar {
        started_unix_ms,
        wall_clock_ms: started.elapsed().as_secs_f64() * 1e3,
        phases: Vec::new(),
    };
    let sidecar_name = format!(
        "{}.timing.json",
        name.strip_suffix(".json").unwrap_or(name)
    );
    std::fs::write(
        ctx.out(&sidecar_name),
        serde_json::to_string_pretty(&sidecar)
            .map_err(|e| NclError::ConfigInvalid(e.to_string()))?,
    )?;
    Ok(())
}

pub fn unix_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Write a small CSV table: header row then rows of stringified cells.
pub fn write_csv_table(
    path: &Path,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<(), NclError> {
    use std::io::Write;
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{}", header.join(","))?;
    for row in rows {
        writeln!(file, "{}", row.join(","))?;
    }
    Ok(())
}
