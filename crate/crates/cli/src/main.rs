mod commands;
mod config;
mod dataset;
mod error;
mod provenance;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "qsr", version, about = "Q-space angular super-resolution with SH-guided diffusion")]
struct Cli {
    /// Worker threads for voxel-parallel stages (default: available cores).
    #[arg(long, global = true, env = "QSR_THREADS")]
    threads: Option<usize>,
    /// Directory that relative output paths resolve against.
    #[arg(long, global = true, env = "QSR_OUTPUT_ROOT", default_value = ".")]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// Experiment config JSON; omitted fields take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `--set model.dim=32`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Output directory (default: the config's `output_dir`).
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test phantom splits with gradient tables and
    /// ground-truth tensors.
    Phantom {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Masked-denoising pretraining on a phantom dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory written by `phantom`.
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this iteration is reached. The mask-ratio ramp still
        /// spans `train.iterations`, so a later `--resume` continues the same run.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Reconstruct HAR volumes from an LAR input with the guided sampler.
    SuperResolve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// LAR volume stack (`.f32` with JSON sidecar).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        input_bvals: PathBuf,
        #[arg(long)]
        input_bvecs: PathBuf,
        #[arg(long)]
        target_bvals: PathBuf,
        #[arg(long)]
        target_bvecs: PathBuf,
    },
    /// Score a reconstruction against ground truth, including DTI maps.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        bvals: PathBuf,
        #[arg(long)]
        bvecs: PathBuf,
        /// Observed-direction mask (`mask.json`); if given, only missing
        /// directions are scored.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Select guidance weights on validation slices.
    Gridsearch {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides)
    }

    fn output_dir(&self, root: &std::path::Path, cfg: &ExperimentConfig) -> PathBuf {
        let p = self.output.clone().unwrap_or_else(|| cfg.output_dir.clone());
        if p.is_absolute() {
            p
        } else {
            root.join(p)
        }
    }
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    pool.build_global().map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let root = cli.output_root;
    match cli.command {
        Command::Phantom { cfg } => {
            let config = cfg.load()?;
            commands::phantom(&config, &cfg.output_dir(&root, &config))
        }
        Command::Train { cfg, data, resume, stop_after } => {
            let config = cfg.load()?;
            commands::train(&config, &data, resume.as_deref(), stop_after, &cfg.output_dir(&root, &config))
        }
        Command::SuperResolve {
            cfg,
            checkpoint,
            input,
            input_bvals,
            input_bvecs,
            target_bvals,
            target_bvecs,
        } => {
            let config = cfg.load()?;
            let io = commands::SuperResolveInputs {
                checkpoint: &checkpoint,
                input: &input,
                input_table: (&input_bvals, &input_bvecs),
                target_table: (&target_bvals, &target_bvecs),
            };
            commands::super_resolve(&config, &io, &cfg.output_dir(&root, &config))
        }
        Command::Eval {
            cfg,
            truth,
            recon,
            bvals,
            bvecs,
            mask,
        } => {
            let config = cfg.load()?;
            let io = commands::EvalInputs {
                truth: &truth,
                recon: &recon,
                table: (&bvals, &bvecs),
                mask: mask.as_deref(),
            };
            commands::eval(&config, &io, &cfg.output_dir(&root, &config))
        }
        Command::Gridsearch { cfg, checkpoint, data } => {
            let config = cfg.load()?;
            commands::gridsearch(&config, &checkpoint, &data, &cfg.output_dir(&root, &config))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("qsr: {e}");
            e.exit_code()
        }
    }
}
