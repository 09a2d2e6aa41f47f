use std::path::PathBuf;

use clap::{Parser, Subcommand};
use foliated_cli::CliOptions;

/// Reproducible experiment runner for slow-fast jump diffusions on foliated
/// spaces: simulation, averaged-drift estimation, mixing profiles,
/// convergence-rate studies, error decompositions, and comparison bounds.
/// Every run writes its artifacts plus a manifest with content hashes.
#[derive(Parser)]
#[command(name = "foliated", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file (sectioned `key = value`); documented defaults
    /// apply for every omitted key, and with no file at all.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for artifacts and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads; overrides FOLIATED_THREADS, which overrides the
    /// physical-core default. Results are identical at any thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override for the number of paths per eps in the rate experiment.
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Comma-separated override for the experiment eps grid.
    #[arg(long, global = true, value_delimiter = ',')]
    eps: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one perturbed realization and write its node table.
    Simulate,
    /// Tabulate the averaged drift over the configured transversal grid.
    EstimateQ,
    /// Estimate the decay profile of leafwise time averages.
    Eta0,
    /// Run the eps-grid convergence experiment and fit the rate.
    Rate {
        /// Skip simulation: feed the fitter an exact power law with this
        /// exponent and report what it recovers.
        #[arg(long)]
        synthetic_lambda: Option<f64>,
    },
    /// Decompose the averaging error into its three block terms.
    Decompose,
    /// Sweep the comparison bound and verify dominance.
    Bihari,
    /// Check the moment conditions of both jump drivers.
    Validate,
}

fn main() {
    let cli = Cli::parse();
    let (subcommand, synthetic_lambda) = match cli.command {
        Command::Simulate => (foliated_cli::Subcommand::Simulate, None),
        Command::EstimateQ => (foliated_cli::Subcommand::EstimateQ, None),
        Command::Eta0 => (foliated_cli::Subcommand::Eta0, None),
        Command::Rate { synthetic_lambda } => (foliated_cli::Subcommand::Rate, synthetic_lambda),
        Command::Decompose => (foliated_cli::Subcommand::Decompose, None),
        Command::Bihari => (foliated_cli::Subcommand::Bihari, None),
        Command::Validate => (foliated_cli::Subcommand::Validate, None),
    };
    let opts = CliOptions {
        subcommand,
        config_path: cli.config,
        seed: cli.seed,
        out_dir: cli.out,
        threads: cli.threads,
        paths: cli.paths,
        eps: cli.eps,
        synthetic_lambda,
    };
    if let Err(e) = foliated_cli::run(&opts) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
