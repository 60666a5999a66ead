use std::io::Write;
use std::path::PathBuf;

use crfgan_core::data::{preprocess, DatasetManifest, ElementType, PreprocessConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::manifest::{ManifestBuilder, RunManifest};
use crate::util::{create_dir, load_config, read_volumes, resolve_input, write_volume};

pub const DATASET_FILE: &str = "dataset.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Directory of HU MetaImage volumes.
    pub input: PathBuf,
    pub out: PathBuf,
    pub preprocess: PreprocessConfig,
    pub train_frac: f64,
    pub split_seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            input: "phantoms".into(),
            out: "data".into(),
            preprocess: PreprocessConfig::default(),
            train_frac: 0.9,
            split_seed: 0,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(CliError::config(format!("train_frac must be in (0, 1), got {}", self.train_frac)));
        }
        Ok(())
    }
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output cube edge.
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
}

impl Args {
    pub fn resolve(self) -> Result<Config> {
        let mut c: Config = load_config(self.config.as_deref())?;
        if let Some(v) = self.input {
            c.input = v;
        }
        if let Some(v) = self.out {
            c.out = v;
        }
        if self.target.is_some() {
            c.preprocess.target = self.target;
        }
        if let Some(v) = self.train_frac {
            c.train_frac = v;
        }
        if let Some(v) = self.split_seed {
            c.split_seed = v;
        }
        Ok(c)
    }
}

/// Writes normalized float volumes plus `dataset.toml` with the split.
pub fn execute(cfg: Config, out: &mut dyn Write) -> Result<RunManifest> {
    cfg.validate()?;
    let input = resolve_input(&cfg.input);
    let volumes = read_volumes(&input)?;
    if volumes.len() < 2 {
        return Err(CliError::data("need at least two volumes to split"));
    }
    let mb = ManifestBuilder::start("preprocess", Some(cfg.split_seed), None);
    create_dir(&cfg.out)?;
    let mut outputs = Vec::new();
    let mut items = Vec::new();
    for (name, vol) in &volumes {
        let v = preprocess(vol, &cfg.preprocess)?;
        let files = write_volume(&cfg.out, name, &v, ElementType::Float)?;
        items.push((name.clone(), format!("{name}.mhd")));
        outputs.extend(files);
    }
    let manifest = DatasetManifest::build(&items, cfg.train_frac, cfg.split_seed)?;
    let path = cfg.out.join(DATASET_FILE);
    std::fs::write(&path, manifest.to_toml()).map_err(|e| CliError::io(&path, e))?;
    outputs.push(path);
    let m = mb.finish(&cfg.out, &cfg, &outputs)?;
    let train = manifest.of(crfgan_core::data::Split::Train).count();
    let _ = writeln!(
        out,
        "preprocessed {} volumes into {} ({} train / {} val)",
        volumes.len(),
        cfg.out.display(),
        train,
        volumes.len() - train
    );
    Ok(m)
}
