pub mod bench;
pub mod evaluate;
pub mod generate;
pub mod phantoms;
pub mod preprocess;
pub mod report;
pub mod rerun;
pub mod serve;
pub mod train;

use std::path::Path;

use crfgan_core::{ModelConfig, Precision, Variant};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// A named preset (`desk_32`, `desk_64`) or a full model table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Custom(Box<ModelConfig>),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Preset("desk_32".into())
    }
}

impl ModelSpec {
    /// A preset name, or a path to a model TOML file.
    pub fn from_flag(s: &str) -> Result<Self> {
        if s.ends_with(".toml") {
            let path = crate::util::resolve_input(Path::new(s));
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            Ok(ModelSpec::Custom(Box::new(ModelConfig::from_toml(&text)?)))
        } else {
            Ok(ModelSpec::Preset(s.to_string()))
        }
    }

    pub fn resolve(&self) -> Result<ModelConfig> {
        let cfg = match self {
            ModelSpec::Preset(name) => match name.as_str() {
                "desk_32" => ModelConfig::desk_32(),
                "desk_64" => ModelConfig::desk_64(),
                other => return Err(CliError::config(format!("unknown model preset {other:?} (desk_32, desk_64)"))),
            },
            ModelSpec::Custom(c) => (**c).clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum VariantArg {
    #[value(name = "crf-gan")]
    CrfGan,
    #[value(name = "hagan-lite")]
    HaganLite,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::CrfGan => Variant::CrfGan,
            VariantArg::HaganLite => Variant::HaGanLite,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

/// Writes a pretty JSON report and returns its path.
pub fn write_json<S: Serialize>(dir: &Path, name: &str, value: &S) -> Result<std::path::PathBuf> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::new(crate::error::ErrorKind::Internal, e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

pub fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::new(crate::error::ErrorKind::Internal, e.to_string())
}
