use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slotmixer_core::manifest::RunManifest;
use slotmixer_core::pipeline;
use slotmixer_core::{Error, ErrorKind, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "slotmixer", version, about = "Train, tune and evaluate slotmixer forecasters")]
struct Cli {
    /// Worker threads for search trials and fitness sweeps (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run manifest (`section.key = value` lines).
    #[arg(long)]
    manifest: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and loss log.
    Train(RunArgs),
    /// Tune the dropout rate with the structure fixed.
    Tune(RunArgs),
    /// Random search over structural hyperparameters.
    Search {
        #[command(flatten)]
        run: RunArgs,
        /// Tune the winner's dropout rate afterwards.
        #[arg(long)]
        two_phase: bool,
    },
    /// Score a checkpoint on the test split per horizon.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated horizons; defaults to 96,192,336,720 where they fit.
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
        /// Report errors in original units instead of standardized ones.
        #[arg(long)]
        raw_units: bool,
    },
    /// Forecast from one raw-unit window of exactly L rows.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV with a header row and L data rows.
        #[arg(long)]
        input: PathBuf,
        /// Write the forecast here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(args: &RunArgs) -> Result<RunManifest> {
    let mut m = RunManifest::load(&args.manifest)?;
    if let Some(seed) = args.seed {
        m.seed = seed;
    }
    if let Some(out) = &args.out {
        m.out = out.clone();
    }
    Ok(m)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let m = load(&args)?;
            let o = pipeline::cmd_train(&m)?;
            println!(
                "epochs {} best_epoch {} val_mse {} test_mse {}",
                o.report.epochs(),
                o.report.best_epoch,
                o.report.best_val_loss,
                o.test_mse
            );
            println!("checkpoint {}", m.out.join(pipeline::CHECKPOINT_FILE).display());
        }
        Command::Tune(args) => {
            let m = load(&args)?;
            let o = pipeline::cmd_tune(&m)?;
            println!("dropout_rate {} val_mse {}", o.rate, o.result.best_fitness);
            println!("manifest {}", m.out.join(pipeline::TUNED_MANIFEST_FILE).display());
        }
        Command::Search { run, two_phase } => {
            let m = load(&run)?;
            let o = pipeline::cmd_search(&m, two_phase)?;
            print!("{}", slotmixer_core::search::leaderboard_csv(&o.outcome.leaderboard));
            for (i, cause) in &o.outcome.failures {
                eprintln!("trial {i} failed: {cause}");
            }
            let file = if two_phase {
                pipeline::TUNED_MANIFEST_FILE
            } else {
                pipeline::BEST_MANIFEST_FILE
            };
            println!("manifest {}", m.out.join(file).display());
        }
        Command::Eval {
            run,
            checkpoint,
            horizons,
            raw_units,
        } => {
            let m = load(&run)?;
            let rows = pipeline::cmd_eval(&checkpoint, &m, horizons.as_deref(), raw_units)?;
            print!("{}", slotmixer_core::metrics::results_csv(&rows));
        }
        Command::Forecast {
            checkpoint,
            input,
            out,
        } => {
            let f = pipeline::cmd_forecast(&checkpoint, &input)?;
            write_or_print(out.as_deref(), &f.to_csv())?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Runtime => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot start {jobs} worker threads: {e}");
            return ExitCode::from(4);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
