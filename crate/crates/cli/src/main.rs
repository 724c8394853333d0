use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hstmixer_cli::{
    cmd_bench, cmd_eval, cmd_gradcheck, cmd_synth, cmd_train, CliResult, RunConfig, SynthArgs,
};

#[derive(Parser)]
#[command(name = "hstmixer", version, about = "Hierarchical all-MLP traffic forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic regional traffic dataset plus label and adjacency sidecars.
    Synth {
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        regions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// AR(1) innovation standard deviation, data units.
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 15)]
        interval: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with early stopping; writes the log and best checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference gradient check of the full model at the tiny preset.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Forward plus backward timing across node counts.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated node counts, at least three.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        node_list: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
}

fn run(cmd: Command) -> CliResult<Vec<String>> {
    match cmd {
        Command::Synth {
            nodes,
            steps,
            regions,
            seed,
            sigma,
            interval,
            out,
        } => cmd_synth(&SynthArgs {
            nodes,
            steps,
            regions,
            seed,
            sigma,
            interval_minutes: interval,
            out,
        })
        .map(|l| vec![l]),
        Command::Train { config } => cmd_train(&RunConfig::load(&config)?),
        Command::Eval {
            config,
            checkpoint,
            split,
        } => cmd_eval(&RunConfig::load(&config)?, &checkpoint, &split).map(|l| vec![l]),
        Command::Gradcheck { config } => {
            let cfg = config.as_deref().map(RunConfig::load).transpose()?;
            cmd_gradcheck(cfg.as_ref()).map(|l| vec![l])
        }
        Command::Bench {
            config,
            node_list,
            batch,
            repeats,
        } => cmd_bench(&RunConfig::load(&config)?, &node_list, batch, repeats),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

