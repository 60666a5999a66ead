//! Config loading, input path resolution and volume directory I/O.

use std::path::{Path, PathBuf};

use crfgan_core::data::{read_metaimage, write_metaimage, ElementType, Volume};
use serde::de::DeserializeOwned;

use crate::error::{CliError, Result};

/// Relative input paths are resolved against this directory when set.
pub const DATA_ROOT_ENV: &str = "CRFGAN_DATA_ROOT";

pub fn resolve_input(p: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

/// Parses a TOML config file, or returns the default when `path` is None.
pub fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))
}

/// Errors with the missing-input class unless `dir` is an existing directory.
pub fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::missing(format!("{} is not a directory", dir.display())))
    }
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// `*.mhd` files of `dir`, sorted by name.
pub fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "mhd") {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(CliError::missing(format!("no .mhd volumes in {}", dir.display())));
    }
    Ok(out)
}

pub fn read_volumes(dir: &Path) -> Result<Vec<(String, Volume)>> {
    list_volumes(dir)?
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok((stem, read_metaimage(&p)?))
        })
        .collect()
}

/// Writes `name.mhd` and `name.raw`; returns both paths.
pub fn write_volume(dir: &Path, name: &str, vol: &Volume, element: ElementType) -> Result<[PathBuf; 2]> {
    let mhd = dir.join(format!("{name}.mhd"));
    let raw = write_metaimage(vol, &mhd, element)?;
    Ok([mhd, raw])
}
