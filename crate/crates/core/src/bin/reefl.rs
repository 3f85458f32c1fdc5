use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use reefl::cli::{cmd_attention, cmd_gen_data, cmd_inspect, cmd_partition, cmd_run, exit_code};
use reefl::experiment::load_config;
use reefl::Result;

#[derive(Parser)]
#[command(name = "reefl", about = "Federated early-exit transformer simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides such as --train.lr0=0.01, applied after the file
    #[arg(value_name = "--KEY=VALUE", trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment, writing metrics.csv, config.resolved and final.ckpt
    Run(ConfigArgs),
    /// Dump x/m/c attention maps for dataset samples as CSV
    Attention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated sample indices
        #[arg(long, value_delimiter = ',', required = true)]
        samples: Vec<usize>,
        /// Output file (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a checkpoint's header and tensor list
    InspectCheckpoint { path: PathBuf },
    /// Write the configured dataset in the binary dataset format
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the client partition manifest CSV
    Partition {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn sink(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = load_config(args.config.as_deref(), &args.overrides)?;
            cmd_run(&cfg, io::stderr())
        }
        Command::Attention {
            checkpoint,
            dataset,
            samples,
            out,
        } => cmd_attention(&checkpoint, &dataset, &samples, sink(out.as_ref())?),
        Command::InspectCheckpoint { path } => cmd_inspect(&path, io::stdout().lock()),
        Command::GenData { config, out } => {
            let cfg = load_config(config.config.as_deref(), &config.overrides)?;
            let ds = cmd_gen_data(&cfg, &out)?;
            eprintln!("wrote {} examples to {}", ds.examples.len(), out.display());
            Ok(())
        }
        Command::Partition { config, out } => {
            let cfg = load_config(config.config.as_deref(), &config.overrides)?;
            cmd_partition(&cfg, sink(out.as_ref())?).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
