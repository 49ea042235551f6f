//! `gae`: toy sweeps, adaptation, diagnostics, evaluation and verification.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use gae_core::verify::Fault;

use crate::commands::{Context, Outcome};
use crate::config::{Inputs, Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "gae", version, about = "Geometry-adaptive explainers")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Comma-separated severities in [0, 1].
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',')]
    severities: Option<Vec<f64>>,
    #[arg(long, global = true)]
    rank: Option<usize>,
    #[arg(long, global = true)]
    lambda_geom: Option<f64>,
    #[arg(long, global = true)]
    lambda_pres: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    n_fit: Option<usize>,
    /// Comma-separated ablation budgets.
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',')]
    budgets: Option<Vec<usize>>,
    #[arg(long, global = true)]
    m_star: Option<usize>,
    #[arg(long, global = true, value_name = "PATH")]
    dictionary: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    activations: Option<PathBuf>,
    /// ID activations or second moment.
    #[arg(long, global = true, value_name = "PATH")]
    id: Option<PathBuf>,
    /// OOD activations or second moment.
    #[arg(long, global = true, value_name = "PATH")]
    ood: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    head: Option<PathBuf>,
    /// Target token per activation row, one per line.
    #[arg(long, global = true, value_name = "PATH")]
    targets: Option<PathBuf>,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an ID explainer on the toy model and sweep severities.
    ToySweep {
        /// Also write the dictionary, head and ID/OOD activations.
        #[arg(long)]
        export: bool,
    },
    /// Adapt a dictionary to OOD activations.
    Adapt,
    /// Gap, loss decomposition and bound checks between two moments.
    Diagnose,
    /// Ablation metrics of a dictionary through a logit head.
    Eval,
    /// Randomized property suites.
    Verify {
        #[arg(long)]
        trials: Option<usize>,
        /// Break one computation on purpose (transposed-rotation, flipped-penalty-sign).
        #[arg(long, value_name = "FAULT")]
        inject_fault: Option<Fault>,
    },
}

impl GlobalArgs {
    fn overrides(&self, trials: Option<usize>) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            severities: self.severities.clone(),
            rank: self.rank,
            lambda_geom: self.lambda_geom,
            lambda_pres: self.lambda_pres,
            alpha: self.alpha,
            n_fit: self.n_fit,
            budgets: self.budgets.clone(),
            m_star: self.m_star,
            trials,
            inputs: Inputs {
                dictionary: self.dictionary.clone(),
                activations: self.activations.clone(),
                id: self.id.clone(),
                ood: self.ood.clone(),
                head: self.head.clone(),
                targets: self.targets.clone(),
            },
        }
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    let trials = match &cli.command {
        Command::Verify { trials, .. } => *trials,
        _ => None,
    };
    let mut cfg = RunConfig::load(cli.global.config.as_deref())?;
    cfg.apply(&cli.global.overrides(trials));
    if let Command::Verify { inject_fault, .. } = &cli.command {
        if inject_fault.is_some() {
            cfg.verify.fault = *inject_fault;
        }
    }
    if cli.global.print_config {
        cfg.validate()?;
        print!("{}", cfg.to_toml()?);
        return Ok(Outcome::Clean);
    }
    let ctx = Context::new(cfg)?;
    match cli.command {
        Command::ToySweep { export } => commands::toy_sweep(&ctx, export),
        Command::Adapt => commands::adapt_cmd(&ctx),
        Command::Diagnose => commands::diagnose_cmd(&ctx),
        Command::Eval => commands::eval_cmd(&ctx),
        Command::Verify { .. } => commands::verify_cmd(&ctx, &ctx.cfg.verify.clone()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(Outcome::Clean) => ExitCode::SUCCESS,
        Ok(Outcome::Violations(n)) => {
            eprintln!("{n} suite(s) reported violations");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
