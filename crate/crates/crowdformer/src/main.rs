use clap::{Args, Parser, Subcommand};
use crowdformer::config::RunConfig;
use crowdformer::data;
use crowdformer::run::{self, RunError};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "crowdformer", about = "Transformer crowd counting at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set adam.lr=1e-5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, RunError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| RunError::Io {
                    path: path.display().to_string(),
                    source: e,
                })?;
                RunConfig::from_toml(&text).map_err(RunError::Config)?
            }
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| RunError::Config(format!("expected KEY=VALUE, got `{kv}`")))?;
            cfg = cfg.with_override(key, value).map_err(RunError::Config)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: u64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints and a JSON-lines loss log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: u64,
        /// Training dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Optional validation dataset directory (enables best.ckpt).
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run a checkpoint on one image and export the density map.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output base path; writes <out>.pgm and <out>.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks for every primitive and the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn dispatch(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::GenData { config, seed, out } => {
            let mut cfg = config.load()?;
            cfg.seed = seed;
            let n = run::gen_data(&cfg, seed, &out)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Train { config, seed, data, val } => {
            let mut cfg = config.load()?;
            cfg.seed = seed;
            let train_samples = data::read_dataset(&data)?;
            let val_samples = val.as_deref().map(data::read_dataset).transpose()?;
            let report = run::train(&cfg, &train_samples, val_samples.as_deref())?;
            println!(
                "trained {} steps; final loss {:.4}; train MAE {:.3}",
                report.steps, report.final_loss, report.train_mae
            );
            if let Some(mae) = report.best_val_mae {
                println!("best val MAE {mae:.3}");
            }
            println!("checkpoints in {}; loss log at {}", cfg.checkpoint_dir, cfg.log_path);
        }
        Command::Eval { checkpoint, data } => {
            let report = run::evaluate(&checkpoint, &data)?;
            for row in &report.rows {
                println!("{}  pred {:8.3}  gt {:6.1}", row.id, row.pred, row.gt);
            }
            println!(
                "n {}  MAE {:.3}  MSE {:.3}  NAE {:.4}{}",
                report.rows.len(),
                report.mae,
                report.mse,
                report.nae,
                if report.nae_excluded > 0 {
                    format!("  ({} zero-count images excluded from NAE)", report.nae_excluded)
                } else {
                    String::new()
                }
            );
        }
        Command::Infer { checkpoint, image, out } => {
            let sidecar = run::infer(&checkpoint, &image, &out)?;
            println!(
                "count {:.3}  map {}x{}  scale {:.3}  -> {}.pgm / .json",
                sidecar.count,
                sidecar.w_d,
                sidecar.h_d,
                sidecar.scale,
                out.display()
            );
        }
        Command::Gradcheck { seed } => {
            let rows = run::gradcheck_report(seed);
            let mut failed = 0;
            for row in &rows {
                let status = if row.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{status}  {:<40}  max rel err {:.3e}  (threshold {:.0e})",
                    row.name, row.max_rel_err, row.threshold
                );
                if !row.passed() {
                    failed += 1;
                }
            }
            println!("{} checks, {} failed", rows.len(), failed);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
