// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vcm_core::video::Split;

use commands::{BdArgs, EvalArgs, EvalCodec};
use config::{parse_list, RunConfig};
use error::CliError;

/// Learned preprocessing for machine vision under video compression.
///
/// Commands that take `--config` also accept `--section.key value`
/// overrides, e.g. `--train.lr 2e-4`.
#[derive(Parser, Debug)]
#[command(name = "vcm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic labeled dataset as Y4M clips plus manifest.csv.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Pretrain the analyzer on clean clips ([analyzer] section).
    PretrainAnalyzer {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the preprocessor or the fine-tuned analyzer baseline ([train]).
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Measure anchor and trained pipelines and report BD-Rates ([eval]).
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// h264, h265 or virtual.
        #[arg(long)]
        codec: Option<String>,
        /// Comma-separated qp (or virtual f_q) grid; default 30,35,40,45,50.
        #[arg(long)]
        qps: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// BD-Rate (percent) of one ra_points.csv curve against another.
    Bdrate {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "top1")]
        metric: String,
        #[arg(long)]
        codec: Option<String>,
        #[arg(long)]
        anchor_method: Option<String>,
        #[arg(long)]
        test_method: Option<String>,
    },
}

/// Splits `--section.key value` and `--section.key=value` overrides from
/// the arguments clap parses.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !name.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| CliError::usage(format!("--{name} needs a value")))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}

fn load_config(path: Option<&PathBuf>, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<(), CliError> {
    let no_overrides = || match overrides.first() {
        Some((k, _)) => Err(CliError::usage(format!("--{k}: this command takes no config overrides"))),
        None => Ok(()),
    };
    match cli.command {
        Command::Synth { out, count, seed, split } => {
            no_overrides()?;
            commands::synth(&out, count, seed, split.into())
        }
        Command::PretrainAnalyzer { config } => commands::pretrain_analyzer(&load_config(Some(&config), &overrides)?),
        Command::Train { config } => commands::train(&load_config(Some(&config), &overrides)?),
        Command::Eval {
            config,
            checkpoint,
            codec,
            qps,
            out,
        } => {
            let cfg = load_config(config.as_ref(), &overrides)?;
            let codec = codec.map(|c| c.parse::<EvalCodec>()).transpose().map_err(CliError::Usage)?;
            let qps = qps
                .map(|q| parse_list(&q))
                .transpose()
                .map_err(|e| CliError::usage(format!("--qps: {e}")))?;
            commands::eval(
                &cfg,
                EvalArgs {
                    checkpoint,
                    codec,
                    qps,
                    out,
                },
            )
        }
        Command::Bdrate {
            anchor,
            test,
            metric,
            codec,
            anchor_method,
            test_method,
        } => {
            no_overrides()?;
            commands::bdrate(&BdArgs {
                anchor,
                test,
                metric,
                codec,
                anchor_method,
                test_method,
            })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
