use std::path::PathBuf;

use clap::{ArgAction, Parser, Subcommand};

use omniest::cli::{
    cmd_estimate, cmd_report, cmd_simulate, EstimateOptions, ReportOptions, SimulateOptions,
};

#[derive(Parser)]
#[command(
    name = "omniest",
    version,
    about = "Profile least squares for hospital-clustered longitudinal outcomes truncated by death"
)]
struct Cli {
    /// Print progress to standard error (repeat for more detail).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo scenario and write its report files
    Simulate {
        /// Scenario config (JSON)
        #[arg(long)]
        config: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Override the configured replicate count
        #[arg(long)]
        replicates: Option<usize>,
        /// Override the configured seed
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (OMNIEST_THREADS overrides)
        #[arg(long)]
        threads: Option<usize>,
        /// Compare plain and k-means-stabilized inference on the same
        /// replicates
        #[arg(long)]
        paired: bool,
    },
    /// Fit the estimators to a longitudinal CSV dataset
    Estimate {
        /// Long-format dataset CSV
        #[arg(long)]
        data: PathBuf,
        /// Analysis config (JSON)
        #[arg(long)]
        config: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (OMNIEST_THREADS overrides)
        #[arg(long)]
        threads: Option<usize>,
        /// Process strata concurrently instead of one at a time
        #[arg(long)]
        parallel_strata: bool,
    },
    /// Merge coefficient tables into one side-by-side comparison
    Report {
        /// Output file; a .csv extension selects CSV, anything else text
        #[arg(long)]
        out: PathBuf,
        /// Coefficient tables to merge
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let verbosity = cli.verbose;
    let result = match cli.command {
        Command::Simulate {
            config,
            out,
            replicates,
            seed,
            threads,
            paired,
        } => cmd_simulate(&SimulateOptions {
            config,
            out,
            replicates,
            seed,
            threads,
            paired,
            verbosity,
        }),
        Command::Estimate {
            data,
            config,
            out,
            threads,
            parallel_strata,
        } => cmd_estimate(&EstimateOptions {
            data,
            config,
            out,
            threads,
            parallel_strata,
            verbosity,
        }),
        Command::Report { out, inputs } => cmd_report(&ReportOptions { out, inputs }),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
