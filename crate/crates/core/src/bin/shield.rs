use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shield_core::cli::{cmd_compile, cmd_eval, cmd_report, cmd_traces, cmd_train, cmd_tvla, Stage};
use shield_core::config::ExperimentConfig;
use shield_core::Result;

#[derive(Parser)]
#[command(name = "shield", version, about = "Train, compile and assess side-channel hardened MLPs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Store and evaluate int8 parameters (overrides `quantized`).
    #[arg(long, global = true)]
    quantized: Option<bool>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline and the configured defended bundle.
    Train,
    /// Lower a bundle to a branch-free graph and validate it.
    Compile {
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Accuracy of a bundle on the test set.
    Eval {
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Random selections per test sample (overrides `eval_trials`).
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Simulate fixed-vs-random traces for the three conditions.
    Traces,
    /// Welch t-tests and t-evolution over the trace sets.
    Tvla,
    /// Summarize all outputs into report.md.
    Report,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(q) = common.quantized {
        cfg.quantized = q;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let stage = Stage::new(&cfg);
    let default_bundle = || stage.bundle_path(cfg.selection_mode().expect("validated"));
    match cli.command {
        Command::Train => print!("{}", cmd_train(&stage)?),
        Command::Compile { bundle } => {
            let bundle = bundle.unwrap_or_else(default_bundle);
            println!("{}", cmd_compile(&bundle, &stage.out)?);
        }
        Command::Eval { bundle, trials } => {
            let bundle = bundle.unwrap_or_else(default_bundle);
            print!("{}", cmd_eval(&stage, &bundle, trials.unwrap_or(cfg.eval_trials))?);
        }
        Command::Traces => print!("{}", cmd_traces(&stage)?),
        Command::Tvla => {
            println!("{:>9} {:>12} {:>6} {:>8}", "condition", "max|t|", "leaky", "growth");
            for s in cmd_tvla(&stage)? {
                println!(
                    "{:>9} {:>12.2} {:>6} {:>8.3}",
                    s.condition.label(),
                    s.max_abs_t,
                    s.leaky_points,
                    s.growth_ratio
                );
            }
        }
        Command::Report => println!("{}", cmd_report(&stage)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
