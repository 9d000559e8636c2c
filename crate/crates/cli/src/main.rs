use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pnp_upscale::{load_config, run_pipeline, Command, PipelineError, PipelineOptions};
use tracing_subscriber::EnvFilter;

#[derive(Parser, Debug)]
#[command(name = "pnp-upscale", version, about = "Homogenized Poisson-Nernst-Planck toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug)]
struct Global {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (a file path for `upscale` and `validate`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent solves (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Solve the cell problems; write corrector dumps and tensors.
    Cell(Global),
    /// Compute the effective tensors only.
    Upscale(Global),
    /// Time-step the upscaled system.
    Macro {
        #[command(flatten)]
        global: Global,
        /// Tensors from a previous `upscale` run.
        #[arg(long)]
        tensors: Option<PathBuf>,
    },
    /// Direct simulation of the microscopic system for every configured s.
    Micro(Global),
    /// Full cell -> macro -> DNS -> compare sweep.
    Validate(Global),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, global, tensors) = match cli.command {
        Cmd::Cell(g) => (Command::Cell, g, None),
        Cmd::Upscale(g) => (Command::Upscale, g, None),
        Cmd::Macro { global, tensors } => (Command::Macro, global, tensors),
        Cmd::Micro(g) => (Command::Micro, g, None),
        Cmd::Validate(g) => (Command::Validate, g, None),
    };

    let default = if global.verbose { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default)))
        .with_writer(std::io::stderr)
        .init();

    if let Some(n) = global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            tracing::warn!("could not size thread pool: {e}");
        }
    }

    let result = load_config(&global.config)
        .map_err(PipelineError::from)
        .and_then(|cfg| run_pipeline(&cfg, cmd, &PipelineOptions { out: global.out, tensors }));
    match result {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
