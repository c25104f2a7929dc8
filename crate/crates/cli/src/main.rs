use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cgsur_cli::commands::{self, FULL_UQ, QUICK_UQ};
use cgsur_cli::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "cgsur", about = "Physics-constrained probabilistic surrogate for a 2D elliptic PDE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the root seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled, unlabeled, query and validation sets.
    Gen(Common),
    /// Train on the generated sets.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the stored checkpoint up to the configured iteration count.
        #[arg(long)]
        resume: bool,
    },
    /// Score the trained model on the validation set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Retrain on resampled data N times and average; N defaults to the config value.
        #[arg(long, num_args = 0..=1, default_missing_value = "0")]
        repeats: Option<usize>,
        /// Train under each of the scenarios A-D and score under each.
        #[arg(long)]
        cross_bc: bool,
    },
    /// Propagate input uncertainty to the solution value at the domain center.
    Uq {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "full")]
        quick: bool,
        #[arg(long)]
        full: bool,
    },
}

fn setup(c: &Common) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(w) = c.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let out = commands::output_dir(&cfg, c.out.as_deref());
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(c) => {
            let (cfg, out) = setup(&c)?;
            let m = commands::cmd_gen(&cfg, &out)?;
            println!("wrote {} files to {}", m.files.len(), out.display());
        }
        Command::Train { common, resume } => {
            let (cfg, out) = setup(&common)?;
            let m = commands::cmd_train(&cfg, &out, resume)?;
            println!("{}", serde_json::to_string(&m.sections["train"])?);
        }
        Command::Eval { common, repeats, cross_bc } => {
            let (cfg, out) = setup(&common)?;
            if cross_bc {
                commands::cmd_cross_bc(&cfg, &out)?;
                println!("wrote {}", out.join("cross_bc.csv").display());
            }
            match repeats {
                Some(n) => {
                    let n = if n == 0 { cfg.eval.repeats } else { n };
                    commands::cmd_eval_repeats(&cfg, &out, n)?;
                    println!("wrote {}", out.join("eval_repeats.json").display());
                }
                None if !cross_bc => {
                    let e = commands::cmd_eval(&cfg, &out)?;
                    println!("R2 {:.6} LS {:.6} N_v {} K {}", e.r2, e.ls, e.n_v, e.k);
                }
                None => {}
            }
        }
        Command::Uq { common, quick, full } => {
            let (cfg, out) = setup(&common)?;
            let count = if full {
                FULL_UQ
            } else if quick {
                QUICK_UQ
            } else {
                cfg.uq.count
            };
            let r = commands::cmd_uq(&cfg, &out, count)?;
            println!("{r}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
