use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use copr_core::trainer::Method;

mod bench;
mod fsutil;
mod report;
mod run;

/// Continual preference-alignment experiments: benchmark generation,
/// training, evaluation and reporting.
#[derive(Debug, Parser)]
#[command(name = "copr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic benchmark directory.
    GenBench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Preset used when no config file is given.
        #[arg(long, value_enum, default_value_t = Preset::Til)]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `bench.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train one method over a benchmark and populate a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Preset::Til)]
        preset: Preset,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.method`.
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Re-evaluate a run's checkpoints and recompute its metrics.
    Eval {
        run: PathBuf,
        /// Benchmark directory; defaults to the one recorded in the run.
        #[arg(long)]
        bench: Option<PathBuf>,
    },
    /// Cross-run summary table and learning-curve plot.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Print an annotated configuration file.
    ExampleConfig {
        /// Print a preset instead of the annotated defaults.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Til,
    Dil,
}

impl Preset {
    fn config(self) -> copr_core::RunConfig {
        match self {
            Preset::Til => copr_core::RunConfig::til(),
            Preset::Dil => copr_core::RunConfig::dil(),
        }
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: copr_core::CoprError| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenBench {
            config,
            preset,
            out,
            seed,
            overwrite,
        } => bench::gen_bench(config.as_deref(), preset, &out, seed, overwrite),
        Command::Train {
            config,
            preset,
            bench,
            out,
            method,
            seed,
            overwrite,
        } => run::train(&run::TrainArgs {
            config,
            preset,
            bench,
            out,
            method,
            seed,
            overwrite,
        }),
        Command::Eval { run, bench } => run::eval(&run, bench.as_deref()),
        Command::Report {
            runs,
            config,
            out,
            overwrite,
        } => report::report(&runs, config.as_deref(), &out, overwrite),
        Command::ExampleConfig {
            preset,
            out,
            overwrite,
        } => bench::example_config(preset, out.as_deref(), overwrite),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
