use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vac_cli::commands;
use vac_cli::{CliError, CliResult, DataSource, ExperimentConfig, Overrides, Preset};

#[derive(Parser)]
#[command(name = "vac", version, about = "Train, attack and inspect beta-variational classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration; unset fields take preset defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Dataset (overrides `data.source`).
    #[arg(long, global = true, value_enum)]
    source: Option<DataSource>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint.vacb and train_log.csv.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Attack the test split and the detector-fit split at every epsilon.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fit and evaluate reconstruction-error detectors from attack shards.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train, attack and detect over the capacity and l1 grids.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Dump clean / adversarial / reconstruction triplets for
    /// misclassified adversarial inputs.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Finite-difference checks of every op and of the objective.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train { common }
            | Command::Attack { common, .. }
            | Command::Detect { common, .. }
            | Command::Sweep { common }
            | Command::Reconstruct { common, .. }
            | Command::Gradcheck { common, .. } => common,
        }
    }
}

fn resolve(common: &Common) -> CliResult<ExperimentConfig> {
    ExperimentConfig::resolve(
        common.config.as_deref(),
        &Overrides {
            preset: common.preset,
            source: common.source,
            seed: common.seed,
            out: common.out.clone(),
        },
    )
}

fn run(cli: Cli) -> CliResult<()> {
    let common = cli.command.common();
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Validation("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Train { common } => commands::cmd_train(&resolve(common)?).map(drop),
        Command::Attack { common, checkpoint } => commands::cmd_attack(&resolve(common)?, checkpoint.as_deref()).map(drop),
        Command::Detect { common, checkpoint } => commands::cmd_detect(&resolve(common)?, checkpoint.as_deref()).map(drop),
        Command::Sweep { common } => commands::cmd_sweep(&resolve(common)?),
        Command::Reconstruct {
            common,
            checkpoint,
            epsilon,
        } => commands::cmd_reconstruct(&resolve(common)?, checkpoint.as_deref(), *epsilon).map(drop),
        Command::Gradcheck { common, cases } => {
            if *cases == 0 {
                return Err(CliError::Validation("--cases must be at least 1".into()));
            }
            commands::cmd_gradcheck(common.seed.unwrap_or(0), *cases).map(drop)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
