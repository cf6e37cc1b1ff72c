//! `foley`: synthetic data generation, training, staged generation,
//! evaluation and gradient checks for the flow-matching foley model.
//!
//! Exit codes: 0 success, 2 usage error, 3 validation error, 4 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use foley_core::error::Error;
use foley_core::flowmatch::EditOp;

use commands::{EditTarget, Source, Split};
use config::{parse_override, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
}

#[derive(Debug, Parser)]
#[command(
    name = "foley",
    version,
    about = "Flow-matching foley generation on synthetic worlds"
)]
struct Cli {
    /// JSON run configuration, merged over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the command: world seed for gen-data, training seed for
    /// train, sampling seed for sample/stage*/eval, gradcheck seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override a config value by dotted path, e.g. train.steps=100.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render, quality-filter and label a synthetic dataset.
    GenData,
    /// Train on the train split of a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint with its .ffos optimizer sidecar.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample with a record's stored conditions.
    Sample {
        #[command(flatten)]
        src: Source,
        /// Number of samples (seeds seed, seed + 1, ...); more than one
        /// writes a [count, len, dim] tensor.
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Foley generation from video, caption and CoT conditions.
    Stage1 {
        #[command(flatten)]
        src: Source,
    },
    /// ROI refinement of a stage1 output.
    Stage2 {
        #[command(flatten)]
        src: Source,
        #[arg(long)]
        context: Option<PathBuf>,
        /// Event whose region is selected.
        #[arg(long)]
        event: Option<usize>,
    },
    /// Editing of an earlier stage's output.
    Stage3 {
        #[command(flatten)]
        src: Source,
        #[arg(long)]
        context: Option<PathBuf>,
        #[arg(long, value_parser = parse_op)]
        op: EditOp,
        #[arg(long)]
        event: Option<usize>,
        /// Frames START:END to regenerate (inpaint).
        #[arg(long, value_parser = parse_span)]
        span: Option<(usize, usize)>,
        /// Leading frames to keep (extend).
        #[arg(long)]
        keep: Option<usize>,
    },
    /// Sample one clip per record and score it against the references.
    Eval {
        /// Omit to score the references against themselves.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Finite-difference check of every primitive and the full model.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn parse_op(s: &str) -> Result<EditOp, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_span(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("expected START:END")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v}: {e}"));
    Ok((p(a)?, p(b)?))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<CliError>() {
            return match c {
                CliError::Usage(_) => 2,
                CliError::Numeric(_) => 4,
            };
        }
        if let Some(c) = cause.downcast_ref::<Error>() {
            return if c.is_numeric() { 4 } else { 3 };
        }
    }
    3
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mut overrides = cli
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = cli.seed {
        let key = match cli.command {
            Command::GenData => "data.world.seed",
            Command::Train { .. } => "train.seed",
            Command::Gradcheck { .. } => "gradcheck.seed",
            _ => "sample.seed",
        };
        overrides.push((key.to_string(), seed.into()));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let out = cli.out.as_deref();
    match cli.command {
        Command::GenData => commands::gen_data(&cfg, out),
        Command::Train { data, resume } => commands::train(&cfg, out, &data, resume.as_deref()),
        Command::Sample { src, count } => commands::sample_cmd(&cfg, out, &src, count),
        Command::Stage1 { src } => commands::stage1(&cfg, out, &src),
        Command::Stage2 { src, context, event } => commands::stage2(&cfg, out, &src, context.as_deref(), event),
        Command::Stage3 {
            src,
            context,
            op,
            event,
            span,
            keep,
        } => commands::stage3(
            &cfg,
            out,
            &src,
            context.as_deref(),
            op,
            &EditTarget { event, span, keep },
        ),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => commands::eval(&cfg, out, checkpoint.as_deref(), &data, split),
        Command::Gradcheck { corrupt } => {
            let report = commands::gradcheck(&cfg, out, corrupt)?;
            let failed: Vec<&str> = report
                .entries
                .iter()
                .filter(|e| !e.passed)
                .map(|e| e.name.as_str())
                .collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Numeric(format!("gradient check failed for {}", failed.join(", "))).into())
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kinds() {
        let usage: anyhow::Error = CliError::Usage("x".into()).into();
        assert_eq!(exit_code(&usage), 2);
        let bad: anyhow::Error = Error::config("k", "m").into();
        assert_eq!(exit_code(&bad.context("while loading")), 3);
        let nan: anyhow::Error = Error::NonFinite("loss".into()).into();
        assert_eq!(exit_code(&nan), 4);
    }

    #[test]
    fn spans_parse() {
        assert_eq!(parse_span("2:5").unwrap(), (2, 5));
        assert!(parse_span("25").is_err());
        assert!(parse_op("remove").is_ok());
        assert!(parse_op("delete").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
