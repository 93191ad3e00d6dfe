use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedavg::config::{parse_config, DataSource, LearningRates, DATA_DIR_ENV};
use fedavg::experiment::{format_f64, run_experiment, run_figure1, ENVELOPE};
use fedavg::harness::format_speedup;

/// Federated averaging experiments from config files.
#[derive(Parser)]
#[command(name = "fedavg", version, after_help = format!(
    "Set {DATA_DIR_ENV} to override the MNIST directory named in a config."
))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the learning-rate grid and write curves, summary and metadata.
    Run { config: PathBuf },
    /// Train the two model pairs and write the parameter interpolation table.
    Figure1 { config: PathBuf },
    /// Parse and check a config without running it.
    Validate { config: PathBuf },
}

const EXIT_ERROR: u8 = 1;
const EXIT_ALL_DIVERGED: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn dispatch(command: Command) -> fedavg::Result<ExitCode> {
    match command {
        Command::Validate { config } => {
            let cfg = parse_config(&config)?;
            let rates = cfg.learning_rates.values()?;
            println!("{}: ok", config.display());
            match &cfg.data {
                DataSource::Mnist { dir } => println!("  data: mnist in {}", dir.display()),
                DataSource::Synthetic { train, test, .. } => {
                    println!("  data: synthetic, {train} train / {test} test")
                }
            }
            println!(
                "  model: {:?} ({} parameters)",
                cfg.model,
                cfg.model.param_count()
            );
            println!("  partition: {:?}", cfg.partition);
            let rates: Vec<String> = rates.into_iter().map(format_f64).collect();
            let kind = match cfg.learning_rates {
                LearningRates::Fixed { .. } => "fixed",
                LearningRates::Grid { .. } => "grid",
            };
            println!("  learning rates ({kind}): {}", rates.join(", "));
            println!("  output: {}", cfg.output_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { config } => {
            let cfg = parse_config(&config)?;
            let bundle = run_experiment(&cfg)?;
            for d in &bundle.meta.diverged {
                eprintln!(
                    "warning: eta {} diverged in round {} (client {})",
                    d.eta, d.at.round, d.at.client
                );
            }
            for w in &bundle.meta.warnings {
                eprintln!("warning: {w}");
            }
            for row in bundle.summary.iter().filter(|r| r.eta.is_none()) {
                let rounds = row
                    .rounds_to_target
                    .map_or_else(|| "not reached".to_string(), format_f64);
                println!("{ENVELOPE} target {}: {rounds}", row.target);
            }
            for row in &bundle.speedups {
                println!("speedup at {}: {}", row.target, format_speedup(row.speedup));
            }
            println!("wrote results to {}", cfg.output_dir.display());
            if bundle.all_diverged() {
                eprintln!("error: every learning rate diverged");
                return Ok(ExitCode::from(EXIT_ALL_DIVERGED));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Figure1 { config } => {
            let cfg = parse_config(&config)?;
            let table = run_figure1(&cfg)?;
            for (name, p) in [
                ("shared", table.shared_parents),
                ("independent", table.independent_parents),
            ] {
                println!(
                    "{name} init: parents {} / {}, average {}",
                    p.w, p.w2, p.midpoint
                );
            }
            println!(
                "wrote {} rows to {}",
                table.rows.len(),
                cfg.output_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
