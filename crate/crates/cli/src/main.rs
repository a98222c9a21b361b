use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sarnas_cli::commands;
use sarnas_cli::config::{RunConfig, SEED_ENV};

#[derive(Parser)]
#[command(name = "sarnas", version, about = "Architecture search for skeleton action classifiers")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set layers=6`; later overrides win.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into out_dir.
    Synth,
    /// Search an architecture on data_dir.
    Search,
    /// Train the network of a genotype on data_dir.
    Train {
        #[arg(long)]
        genotype: PathBuf,
    },
    /// Report top-1 and top-5 accuracy on data_dir.
    Eval {
        #[arg(long)]
        genotype: PathBuf,
        /// Weights to load; a freshly initialized network when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write DOT graphs of a genotype or an architecture checkpoint.
    ExportDot {
        #[arg(long)]
        input: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = match RunConfig::resolve(cli.config.as_deref(), &cli.overrides, env_seed.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let mut out = std::io::stdout();
    let result = match &cli.command {
        Command::Synth => commands::synth(&cfg, &mut out),
        Command::Search => commands::search(&cfg, &mut out).map(|_| ()),
        Command::Train { genotype } => commands::train(&cfg, genotype, &mut out).map(|_| ()),
        Command::Eval { genotype, checkpoint } => {
            commands::eval(&cfg, genotype, checkpoint.as_deref(), &mut out).map(|_| ())
        }
        Command::ExportDot { input } => commands::export_dot(&cfg, input, &mut out),
        Command::Gradcheck => match commands::gradcheck(&cfg, &mut out) {
            Ok(reports) => {
                let failed = reports.iter().filter(|r| !r.passed()).count();
                if failed > 0 {
                    eprintln!("{failed} of {} gradient checks failed", reports.len());
                    return ExitCode::FAILURE;
                }
                Ok(())
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
