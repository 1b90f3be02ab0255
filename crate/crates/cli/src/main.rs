use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsformer_cli::{files, CliResult, RunConfig};

#[derive(Parser)]
#[command(
    name = "tsformer",
    version,
    about = "Bucket classification of time series with a transformer encoder"
)]
struct Cli {
    /// Suppress per-epoch progress on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults reproduce the base synthetic case.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration entry, e.g. `--set model.num_blocks=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replace every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an OU trajectory and write `hidden,observed` CSV.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of steps; defaults to `data.points`.
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build datasets, train, evaluate and write the run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Overrides `output.dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured data.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `output.dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Convert a `date,close` file into log and squared returns.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the test-split pointwise table (h, q_j, t_j) of a checkpoint.
    Plotdata {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let progress = !cli.quiet;
    match cli.command {
        Command::Simulate { cfg, points, out } => {
            let cfg = cfg.load()?;
            tsformer_cli::run_simulate(&cfg, points.unwrap_or(cfg.data.points), &out)?;
        }
        Command::Train { cfg, out_dir } => {
            let mut cfg = cfg.load()?;
            if let Some(dir) = out_dir {
                cfg.output.dir = dir;
            }
            let outcome = tsformer_cli::run_train(&cfg, progress)?;
            if progress {
                for r in &outcome.evaluation.reports {
                    eprintln!(
                        "{:>10}: H(P,Q) {:.4}, accuracy {:.2}% over {}",
                        r.split,
                        r.mean_hpq,
                        100.0 * r.accuracy,
                        r.n
                    );
                }
                eprintln!("wrote {}", outcome.out_dir.join(files::EVAL).display());
            }
        }
        Command::Evaluate {
            cfg,
            checkpoint,
            out_dir,
        } => {
            let cfg = cfg.load()?;
            let dir = out_dir.unwrap_or_else(|| cfg.output.dir.clone());
            let eval = tsformer_cli::run_evaluate(&cfg, &checkpoint, &dir)?;
            for r in &eval.reports {
                println!("{}", r.to_json()?);
            }
        }
        Command::Ingest { input, out } => {
            let n = tsformer_cli::run_ingest(&input, &out)?;
            if progress {
                eprintln!(
                    "{n} closes, {} returns written to {}",
                    n.saturating_sub(1),
                    out.display()
                );
            }
        }
        Command::Plotdata {
            cfg,
            checkpoint,
            out,
        } => {
            let cfg = cfg.load()?;
            let n = tsformer_cli::run_plotdata(&cfg, &checkpoint, &out)?;
            if progress {
                eprintln!("{n} rows written to {}", out.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
