//! Command-line surface: `densehybrid [--config FILE] <synth|train|score|eval|toy> [--key=value ...]`.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{cmd_eval, cmd_score, cmd_synth, cmd_toy, cmd_train, eval_rows};
pub use config::{load, parse_overrides, write_resolved, RunConfig};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "densehybrid",
    version,
    about = "Dense hybrid anomaly scoring and open-set segmentation"
)]
struct Cli {
    /// TOML config with [synth], [train], [score], [eval] and [toy] sections.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic scene dataset, negatives and toy points.
    Synth(Overrides),
    /// Train on mixed-content crops and write a checkpoint plus loss log.
    Train(Overrides),
    /// Export score rasters, closed predictions and optional open-set label maps.
    Score(Overrides),
    /// Compute AP, FPR95, AUROC, closed and two-fold open mIoU and distance bins.
    Eval(Overrides),
    /// Run the 2-D toy benchmark over several seeds.
    Toy(Overrides),
}

#[derive(Debug, clap::Args)]
struct Overrides {
    /// Config overrides as --key=value or --section.key=value.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) => EXIT_CONFIG,
        Error::NonFinite(_) => EXIT_NUMERIC,
        Error::Shape { .. }
        | Error::Format { .. }
        | Error::Data(_)
        | Error::Undefined(_)
        | Error::Io(_)
        | Error::Csv(_) => EXIT_DATA,
    }
}

fn dispatch(config: Option<PathBuf>, command: Command) -> crate::Result<()> {
    let (name, raw) = match &command {
        Command::Synth(o) => ("synth", &o.overrides),
        Command::Train(o) => ("train", &o.overrides),
        Command::Score(o) => ("score", &o.overrides),
        Command::Eval(o) => ("eval", &o.overrides),
        Command::Toy(o) => ("toy", &o.overrides),
    };
    let mut overrides = parse_overrides(raw)?;
    // `--config` may also follow the subcommand.
    let mut config = config;
    if let Some(i) = overrides.iter().position(|(k, _)| k == "config") {
        config = Some(PathBuf::from(overrides.remove(i).1));
    }
    let cfg = load(config.as_deref(), name, &overrides)?;
    let out = match name {
        "synth" => &cfg.synth.out,
        "train" => &cfg.train.out,
        "score" => &cfg.score.out,
        "eval" => &cfg.eval.out,
        _ => &cfg.toy.out,
    };
    match name {
        "synth" => cmd_synth(&cfg.synth)?,
        "train" => cmd_train(&cfg.train)?,
        "score" => cmd_score(&cfg.score)?,
        "eval" => cmd_eval(&cfg.eval)?,
        _ => cmd_toy(&cfg.toy)?,
    }
    let hash = write_resolved(out, name, &cfg)?;
    log::info!("resolved config written to {} (sha256 {hash})", out.display());
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.config, cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
