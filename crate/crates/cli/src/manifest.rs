//! Per-directory run manifest: the resolved config plus hashes of every
//! artifact, enough to rerun the command and check the result.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crfgan_core::Precision;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const RUN_MANIFEST: &str = "run.toml";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputRecord {
    /// Relative to the artifact directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub outputs: Vec<OutputRecord>,
    pub config: toml::Table,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

pub fn config_table<C: Serialize>(config: &C) -> Result<(toml::Table, String)> {
    let text = toml::to_string(config).map_err(|e| CliError::new(crate::error::ErrorKind::Internal, e.to_string()))?;
    let table: toml::Table = toml::from_str(&text).expect("serialized config parses");
    Ok((table, hex::encode(Sha256::digest(text.as_bytes()))))
}

pub struct ManifestBuilder {
    pub command: &'static str,
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub started_unix_ms: u64,
}

impl ManifestBuilder {
    pub fn start(command: &'static str, seed: Option<u64>, precision: Option<Precision>) -> Self {
        ManifestBuilder {
            command,
            seed,
            precision,
            started_unix_ms: now_ms(),
        }
    }

    /// Hashes `outputs` and writes `dir/run.toml`.
    pub fn finish<C: Serialize>(self, dir: &Path, config: &C, outputs: &[PathBuf]) -> Result<RunManifest> {
        let (table, config_sha256) = config_table(config)?;
        let mut records = Vec::with_capacity(outputs.len());
        for p in outputs {
            let (sha256, bytes) = sha256_file(p)?;
            let rel = p.strip_prefix(dir).unwrap_or(p);
            records.push(OutputRecord {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256,
                bytes,
            });
        }
        records.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            command: self.command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256,
            seed: self.seed,
            precision: self.precision,
            started_unix_ms: self.started_unix_ms,
            finished_unix_ms: now_ms(),
            outputs: records,
            config: table,
        };
        let text = toml::to_string(&manifest).map_err(|e| CliError::new(crate::error::ErrorKind::Internal, e.to_string()))?;
        let path = dir.join(RUN_MANIFEST);
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}

pub fn read_run_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::data(format!("{}: {}", path.display(), e.message())))
}
