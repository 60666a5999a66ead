use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use super::{bench, evaluate, generate, phantoms, preprocess, report, train};
use crate::error::{CliError, ErrorKind, Result};
use crate::manifest::{read_run_manifest, RunManifest, RUN_MANIFEST};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// A run manifest, or the directory holding one.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write the rerun here instead of over the original outputs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn config<C: DeserializeOwned>(table: toml::Table) -> Result<C> {
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::data(format!("manifest config: {}", e.message())))
}

/// Files whose content depends on wall-clock time and are not compared.
fn is_timing_dependent(command: &str, path: &str) -> bool {
    command == "bench" && path == bench::REPORT_FILE
}

/// Runs the recorded command with its recorded config and checks that every
/// recorded output is reproduced byte for byte.
pub fn execute(args: Args, out: &mut dyn Write) -> Result<RunManifest> {
    let path = if args.manifest.is_dir() {
        args.manifest.join(RUN_MANIFEST)
    } else {
        args.manifest.clone()
    };
    let original = read_run_manifest(&path)?;
    let mut table = original.config.clone();
    if let Some(dir) = &args.out {
        table.insert("out".into(), toml::Value::String(dir.to_string_lossy().into_owned()));
    }
    let mut sink = std::io::sink();
    let rerun = match original.command.as_str() {
        "phantoms" => phantoms::execute(config(table)?, &mut sink)?,
        "preprocess" => preprocess::execute(config(table)?, &mut sink)?,
        "train" => train::execute(config(table)?, &mut sink)?,
        "bench" => bench::execute(config(table)?, &mut sink)?,
        "generate" => generate::execute(config(table)?, &mut sink)?,
        "evaluate" => evaluate::execute(config(table)?, &mut sink)?,
        "report" => report::execute(config(table)?, &mut sink)?,
        other => return Err(CliError::usage(format!("command {other:?} cannot be rerun"))),
    };
    let mut mismatches = Vec::new();
    for rec in &original.outputs {
        if is_timing_dependent(&original.command, &rec.path) {
            continue;
        }
        match rerun.outputs.iter().find(|r| r.path == rec.path) {
            Some(r) if r.sha256 == rec.sha256 => {}
            Some(_) => mismatches.push(format!("{} differs", rec.path)),
            None => mismatches.push(format!("{} missing", rec.path)),
        }
    }
    if rerun.config_sha256 != original.config_sha256 && args.out.is_none() {
        mismatches.push("config hash differs".into());
    }
    if !mismatches.is_empty() {
        return Err(CliError::new(
            ErrorKind::Data,
            format!("rerun of {} did not reproduce: {}", display(&path), mismatches.join(", ")),
        ));
    }
    let _ = writeln!(
        out,
        "reproduced {} outputs of {} ({})",
        original.outputs.len(),
        original.command,
        display(&path)
    );
    Ok(rerun)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
