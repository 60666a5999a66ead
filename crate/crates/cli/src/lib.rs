//! The `crfgan` command line: every subcommand resolves a config (file
//! plus flag overrides), validates it before doing work, writes its
//! artifacts and a run manifest, and reports failures as one JSON line
//! with a class-specific exit code.

pub mod commands;
pub mod error;
pub mod manifest;
pub mod util;

use std::ffi::OsString;
use std::io::Write;

use clap::{Parser, Subcommand};

use commands::{bench, evaluate, generate, phantoms, preprocess, report, rerun, serve, train};
pub use error::{CliError, ErrorKind, Result};
pub use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "crfgan", version, about = "3D GAN pipeline with a CRF embedding critic")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write procedural chest phantoms (HU) as MetaImage volumes.
    Phantoms(phantoms::Args),
    /// Window, resize and split HU volumes into a training dataset.
    Preprocess(preprocess::Args),
    /// Train a model on a preprocessed dataset.
    Train(train::Args),
    /// Measure peak training memory and throughput.
    Bench(bench::Args),
    /// Sample volumes from a checkpoint.
    Generate(generate::Args),
    /// Score generated volumes against real ones (FID, MMD).
    Evaluate(evaluate::Args),
    /// Run the rating study HTTP service.
    Serve(serve::Args),
    /// Compute study statistics from a study event log.
    Report(report::Args),
    /// Re-execute a command from its run manifest.
    Rerun(rerun::Args),
}

/// Parses `args` (including the program name) and runs the command.
/// Help and version requests print to `out` and succeed.
pub fn main_with<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                let _ = write!(out, "{e}");
                return Ok(());
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return Err(CliError::usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    dispatch(cli.command, out).map(|_| ())
}

pub fn dispatch(command: Command, out: &mut dyn Write) -> Result<Option<RunManifest>> {
    Ok(Some(match command {
        Command::Phantoms(a) => phantoms::execute(a.resolve()?, out)?,
        Command::Preprocess(a) => preprocess::execute(a.resolve()?, out)?,
        Command::Train(a) => train::execute(a.resolve()?, out)?,
        Command::Bench(a) => bench::execute(a.resolve()?, out)?,
        Command::Generate(a) => generate::execute(a.resolve()?, out)?,
        Command::Evaluate(a) => evaluate::execute(a.resolve()?, out)?,
        Command::Serve(a) => serve::execute(a.resolve()?, out)?,
        Command::Report(a) => report::execute(a.resolve()?, out)?,
        Command::Rerun(a) => rerun::execute(a, out)?,
    }))
}
