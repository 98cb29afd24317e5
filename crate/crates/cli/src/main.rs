//! Command-line harness around the control library. Every failure maps to a
//! coarse exit code: 2 config, 3 runtime, 4 numerical.

use clap::{Parser, Subcommand, ValueEnum};
use dmctl_core::config::ExperimentConfig;
use dmctl_core::error::{Error, ErrorCategory};
use dmctl_core::{experiment, report};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dmctl", version, about = "Adaptive deformable-mirror control harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorChoice {
    Dense,
    Factored,
}

impl EstimatorChoice {
    fn name(self) -> &'static str {
        match self {
            EstimatorChoice::Dense => "dense",
            EstimatorChoice::Factored => "factored",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one adaptive experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to output_dir from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the experiment seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Switch::Off)]
        plots: Switch,
        /// Overrides the estimator variant from the config.
        #[arg(long, value_enum)]
        estimator: Option<EstimatorChoice>,
    },
    /// Repeat the run across basis sizes and tabulate the results.
    SweepN {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Switch::Off)]
        plots: Switch,
        #[arg(long, value_enum)]
        estimator: Option<EstimatorChoice>,
        /// Comma-separated basis sizes, e.g. 10,21,36,66.
        #[arg(long = "n-list", value_delimiter = ',', required = true)]
        n_list: Vec<usize>,
    },
    /// Run the non-adapting baseline: identify once, never update.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Switch::Off)]
        plots: Switch,
    },
    /// Render plots and a text digest for a finished run directory.
    Report {
        /// Directory holding config.toml, iterations.csv and summary.json.
        run_dir: PathBuf,
    },
}

fn resolve_out(flag: Option<&Path>, cfg: &ExperimentConfig) -> dmctl_core::Result<PathBuf> {
    match (flag, &cfg.output_dir) {
        (Some(p), _) => Ok(p.to_path_buf()),
        (None, Some(p)) => Ok(p.clone()),
        (None, None) => Err(Error::Config {
            path: "output_dir".into(),
            message: "not set; pass --out or add output_dir to the config".into(),
        }),
    }
}

fn dispatch(cli: Cli) -> dmctl_core::Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            plots,
            estimator,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out_dir = resolve_out(out.as_deref(), &cfg)?;
            let opts = experiment::RunOptions {
                estimator_override: estimator.map(|e| e.name().to_string()),
                seed_override: seed,
                plots: plots == Switch::On,
            };
            let art = experiment::run_experiment(&cfg, &out_dir, &opts)?;
            println!(
                "run complete: best k {}, rms central {:.4e} um, artifacts in {}",
                art.summary.best_k,
                art.summary.best_rms_central_um,
                out_dir.display()
            );
            Ok(())
        }
        Command::SweepN {
            config,
            out,
            seed,
            plots,
            estimator,
            n_list,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out_dir = resolve_out(out.as_deref(), &cfg)?;
            let opts = experiment::RunOptions {
                estimator_override: estimator.map(|e| e.name().to_string()),
                seed_override: seed,
                plots: plots == Switch::On,
            };
            let rows = experiment::run_sweep(&cfg, &n_list, &out_dir, &opts)?;
            for r in &rows {
                match r.best_rms_central {
                    Some(rms) => println!("n {:>4}  rms central {:.4e} um", r.n_modes, rms),
                    None => println!("n {:>4}  {}", r.n_modes, r.status),
                }
            }
            println!("sweep table in {}", out_dir.join("sweep.csv").display());
            Ok(())
        }
        Command::Baseline {
            config,
            out,
            seed,
            plots,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out_dir = resolve_out(out.as_deref(), &cfg)?;
            let opts = experiment::RunOptions {
                estimator_override: None,
                seed_override: seed,
                plots: plots == Switch::On,
            };
            let art = experiment::run_baseline(&cfg, &out_dir, &opts)?;
            println!(
                "baseline complete: best k {}, rms central {:.4e} um, artifacts in {}",
                art.summary.best_k,
                art.summary.best_rms_central_um,
                out_dir.display()
            );
            Ok(())
        }
        Command::Report { run_dir } => {
            let files = report::render_run(&run_dir)?;
            for f in &files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Runtime => 3,
                ErrorCategory::Numerical => 4,
            };
            ExitCode::from(code)
        }
    }
}
