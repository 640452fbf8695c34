use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tnaf_cli::{commands, CliError};
use tnaf_core::data::Format;
use tnaf_core::flow::HeadType;

#[derive(Parser)]
#[command(name = "tnaf", version, about = "Transformer neural autoregressive flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        #[arg(short = 'c', long)]
        config: PathBuf,
        #[arg(short = 'o', long)]
        out: PathBuf,
    },
    /// Mean test log-likelihood of a data file (default: the run's test split).
    Eval {
        #[arg(short = 'm', long)]
        model: PathBuf,
        #[arg(short = 'd', long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: Format,
    },
    /// Draw samples in raw data space.
    Sample {
        #[arg(short = 'm', long)]
        model: PathBuf,
        #[arg(short = 'n', long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short = 'o', long)]
        out: PathBuf,
    },
    /// Map base-space points back to data space.
    Invert {
        #[arg(short = 'm', long)]
        model: PathBuf,
        #[arg(short = 'i', long)]
        input: PathBuf,
        #[arg(short = 'o', long)]
        out: PathBuf,
    },
    /// Run the numerical oracles on a checkpoint or a fresh model.
    Check {
        #[arg(short = 'm', long, conflicts_with = "config")]
        model: Option<PathBuf>,
        #[arg(short = 'c', long)]
        config: Option<PathBuf>,
    },
    /// Print the parameter manifest and count.
    Inspect {
        #[arg(short = 'm', long, conflicts_with = "config")]
        model: Option<PathBuf>,
        #[arg(short = 'c', long)]
        config: Option<PathBuf>,
        #[arg(long)]
        count_with_psi: bool,
    },
    /// Train a grid of head types and depths and print a comparison table.
    Ablate {
        #[arg(short = 'c', long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "cdf,shared_cdf,spline")]
        head_types: Vec<HeadType>,
        #[arg(long, value_delimiter = ',', default_value = "3,5")]
        layers: Vec<usize>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Train { config, out: ckpt } => commands::train(&config, &ckpt, &mut out),
        Command::Eval { model, data, format } => commands::eval(&model, data.as_deref(), format, &mut out),
        Command::Sample { model, n, seed, out: csv } => commands::sample(&model, n, seed, &csv),
        Command::Invert { model, input, out: csv } => commands::invert(&model, &input, &csv),
        Command::Check { model, config } => commands::check(model.as_deref(), config.as_deref(), &mut out),
        Command::Inspect {
            model,
            config,
            count_with_psi,
        } => commands::inspect(model.as_deref(), config.as_deref(), count_with_psi, &mut out),
        Command::Ablate {
            config,
            head_types,
            layers,
        } => commands::ablate(&config, &head_types, &layers, &mut out).map(|_| ()),
    }?;
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
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
