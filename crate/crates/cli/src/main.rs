//! `mola`: dataset generation, training, adaptation, evaluation and
//! analysis for Mixture-of-LoRA forecasting, driven by a TOML run config.
//!
//! Exit codes: 0 success, 1 usage, configuration or missing-artifact
//! error, 2 internal invariant violation.

mod commands;
mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mola_core::data::SplitKind;

use crate::commands::ParamArgs;
use crate::config::RunConfig;
use crate::error::CliResult;
use crate::run::RunDir;

#[derive(Debug, Parser)]
#[command(
    name = "mola",
    version,
    about = "Mixture-of-LoRA time-series forecasting experiments"
)]
struct Cli {
    /// TOML run config. Without one, built-in defaults are used.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory. Defaults to `output.run_dir`, else
    /// `$MOLA_RUN_ROOT/<config stem>`, else `runs/<config stem>`.
    #[arg(long, global = true, value_name = "PATH")]
    run_dir: Option<PathBuf>,
    /// Overrides `train.seed` and the synthetic data seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config override such as `paradigm.rank=8`; repeatable, applied in order.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Refuse to overwrite existing outputs instead of warning.
    #[arg(long, global = true)]
    fail_if_exists: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured synthetic dataset as CSV plus a manifest.
    Synth {
        /// Regenerate from a manifest written by an earlier `synth`.
        #[arg(long, value_name = "PATH")]
        from_manifest: Option<PathBuf>,
    },
    /// Pre-train the foundation model on the first T/K steps.
    Pretrain,
    /// Adapt the frozen foundation to every segment of the horizon.
    Adapt,
    /// Train the recursive (ar-f) or multi-output (mt-f) baseline.
    TrainBaseline {
        #[arg(long, value_enum)]
        paradigm: Option<Baseline>,
    },
    /// Score a trained paradigm per step, per horizon and on average.
    Eval {
        /// Defaults to the configured paradigm.
        #[arg(long, value_enum)]
        paradigm: Option<ParadigmArg>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Run one analysis and write its report.
    Analyze {
        #[command(subcommand)]
        kind: Analysis,
    },
    /// Train all three paradigms on identical windows and tabulate them.
    Compare,
}

#[derive(Debug, Subcommand)]
enum Analysis {
    /// Minimum attainable error of a trained multi-output head.
    Bottleneck {
        /// Defaults to the run's mt-f checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Adapter versus backbone parameter counts.
    Params {
        #[arg(long, default_value_t = 2)]
        n_layers: u64,
        #[arg(long, default_value_t = 512)]
        d_model: u64,
        #[arg(long, default_value_t = 1024)]
        d_ff: u64,
        #[arg(long, default_value_t = 8)]
        rank: u64,
        #[arg(long, default_value_t = 4)]
        experts: u64,
        #[arg(long, default_value_t = 6)]
        segments: u64,
    },
    /// Variance decomposition of per-step test losses.
    Variance,
    /// Representation disparity between per-step models.
    Probe,
    /// Same as the top-level `compare`.
    Compare,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    #[value(name = "ar-f")]
    Arf,
    #[value(name = "mt-f")]
    Mtf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ParadigmArg {
    #[value(name = "ar-f")]
    Arf,
    #[value(name = "mt-f")]
    Mtf,
    Mola,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl Baseline {
    fn name(self) -> &'static str {
        match self {
            Baseline::Arf => "ar-f",
            Baseline::Mtf => "mt-f",
        }
    }
}

impl ParadigmArg {
    fn name(self) -> &'static str {
        match self {
            ParadigmArg::Arf => "ar-f",
            ParadigmArg::Mtf => "mt-f",
            ParadigmArg::Mola => "mola",
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    let root = RunDir::resolve(cli.run_dir.as_deref(), &cfg, cli.config.as_deref());
    let mut rd = RunDir::open(root, &cfg, cli.fail_if_exists)?;
    let name = match &cli.command {
        Command::Synth { from_manifest } => {
            commands::synth(&cfg, &mut rd, from_manifest.as_deref())?;
            "synth"
        }
        Command::Pretrain => {
            commands::pretrain_cmd(&cfg, &mut rd)?;
            "pretrain"
        }
        Command::Adapt => {
            commands::adapt(&cfg, &mut rd)?;
            "adapt"
        }
        Command::TrainBaseline { paradigm } => {
            commands::train_baseline(&cfg, &mut rd, paradigm.map(Baseline::name))?;
            "train-baseline"
        }
        Command::Eval { paradigm, split } => {
            let kind = match split {
                SplitArg::Train => SplitKind::Train,
                SplitArg::Val => SplitKind::Val,
                SplitArg::Test => SplitKind::Test,
            };
            commands::eval(&cfg, &mut rd, paradigm.map(ParadigmArg::name), kind)?;
            "eval"
        }
        Command::Analyze { kind } => match kind {
            Analysis::Bottleneck { checkpoint } => {
                commands::analyze_bottleneck(&cfg, &mut rd, checkpoint.as_deref())?;
                "analyze.bottleneck"
            }
            &Analysis::Params {
                n_layers,
                d_model,
                d_ff,
                rank,
                experts,
                segments,
            } => {
                let args = ParamArgs {
                    n_layers,
                    d_model,
                    d_ff,
                    rank,
                    experts,
                    segments,
                };
                commands::analyze_params(&mut rd, args)?;
                "analyze.params"
            }
            Analysis::Variance => {
                commands::analyze_variance(&cfg, &mut rd)?;
                "analyze.variance"
            }
            Analysis::Probe => {
                commands::analyze_probe(&cfg, &mut rd)?;
                "analyze.probe"
            }
            Analysis::Compare => {
                commands::compare(&cfg, &mut rd)?;
                "compare"
            }
        },
        Command::Compare => {
            commands::compare(&cfg, &mut rd)?;
            "compare"
        }
    };
    rd.finish(name)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version go to stdout with status 0; usage errors are
            // user errors.
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
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
