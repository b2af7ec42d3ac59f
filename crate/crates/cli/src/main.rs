use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dfg_cli::commands::{parse_grid, parse_seeds};
use dfg_cli::{cmd_export, cmd_pretrain, cmd_sweep, cmd_train, CliError, ExportKind, Result, RunConfig};
use dfg_core::train::TrainMode;

#[derive(Parser)]
#[command(name = "dfg", version, about = "Discriminative feature generation for imbalanced classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Original,
    Finetune,
    Dfg,
}

impl From<Mode> for TrainMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Original => TrainMode::Original,
            Mode::Finetune => TrainMode::Finetune,
            Mode::Dfg => TrainMode::Dfg,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Features,
    FilterWeights,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Request bit-reproducible execution. Kernels are sequential, so
    /// results are reproducible either way; the flag is recorded in
    /// run_meta.json.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source extractor and classifier.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Overrides `source.pretrain.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on the target data.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides `train.mode`.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from `<out>/checkpoint.ckpt` (dfg mode).
        #[arg(long)]
        resume: bool,
    },
    /// Write features or filter weights from a saved model.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        what: What,
        /// Generated samples in the features export; overrides `export.n_fake`.
        #[arg(long)]
        n_fake: Option<usize>,
        /// Output file; defaults to `<out>/features.csv` or `<out>/filter_weights.csv`.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// DFG runs over a grid of blend weights and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated blend weights, e.g. `0,0.25,0.5,0.75,1`.
        #[arg(long)]
        rho_grid: String,
        /// Comma-separated seeds or a range such as `0..3`.
        #[arg(long, default_value = "0")]
        seeds: String,
        /// Concurrent runs; capped by DFG_NUM_THREADS.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let cfg = RunConfig::load(&common.config)?;
    match &common.out {
        Some(dir) => cfg.with_output_dir(dir),
        None => {
            let dir = cfg.output_dir.clone();
            cfg.with_output_dir(&dir)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, seed } => {
            let mut cfg = load(&common)?;
            if let Some(s) = seed {
                cfg.source.pretrain.seed = s;
            }
            let r = cmd_pretrain(&cfg, common.deterministic)?;
            println!("source accuracy {:.4}", r.overall_accuracy);
        }
        Command::Train {
            common,
            mode,
            seed,
            resume,
        } => {
            let mut cfg = load(&common)?;
            if let Some(m) = mode {
                cfg.train.mode = m.into();
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let r = cmd_train(&cfg, resume, common.deterministic)?;
            println!("test accuracy {:.4}", r.overall_accuracy);
        }
        Command::Export {
            common,
            checkpoint,
            what,
            n_fake,
            file,
        } => {
            let cfg = load(&common)?;
            let (kind, name) = match what {
                What::Features => (ExportKind::Features, "features.csv"),
                What::FilterWeights => (ExportKind::FilterWeights, "filter_weights.csv"),
            };
            let file = file.unwrap_or_else(|| cfg.output_dir.join(name));
            cmd_export(&cfg, &checkpoint, kind, &file, n_fake)?;
            println!("wrote {}", file.display());
        }
        Command::Sweep {
            common,
            rho_grid,
            seeds,
            jobs,
        } => {
            let cfg = load(&common)?;
            let grid = parse_grid(&rho_grid)?;
            let seeds = parse_seeds(&seeds)?;
            let outcome = cmd_sweep(&cfg, &grid, &seeds, jobs)?;
            for row in &outcome.rows {
                println!(
                    "rho {}: accuracy {:.4} +- {:.4} over {} runs",
                    row.rho, row.accuracy.mean, row.accuracy.std, row.accuracy.k
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            let code = e.exit_code();
            drop::<CliError>(e);
            ExitCode::from(code as u8)
        }
    }
}
