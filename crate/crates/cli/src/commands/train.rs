use std::io::Write;
use std::path::{Path, PathBuf};

use crfgan_core::data::{read_metaimage, DatasetManifest, IntensityDomain, Split};
use crfgan_core::training::{TrainConfig, Trainer, VolumePool};
use crfgan_core::{ModelBundle, ModelConfig, Precision, Scalar, Variant};
use serde::{Deserialize, Serialize};

use super::{internal, ModelSpec, PrecisionArg, VariantArg};
use crate::commands::preprocess::DATASET_FILE;
use crate::error::{CliError, Result};
use crate::manifest::{ManifestBuilder, RunManifest};
use crate::util::{create_dir, load_config, resolve_input};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const HISTORY_FILE: &str = "history.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Preprocessed dataset directory (with `dataset.toml`).
    pub data: PathBuf,
    pub out: PathBuf,
    pub variant: Variant,
    /// Save a checkpoint every this many steps (and always at the end).
    pub checkpoint_every: Option<u64>,
    /// Continue from this checkpoint; `train.steps` is the total.
    pub resume: Option<PathBuf>,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            data: "data".into(),
            out: "runs/train".into(),
            variant: Variant::CrfGan,
            checkpoint_every: None,
            resume: None,
            model: ModelSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<ModelConfig> {
        let model = self.model.resolve()?;
        self.train.validate()?;
        if self.checkpoint_every == Some(0) {
            return Err(CliError::config("checkpoint_every must be positive"));
        }
        Ok(model)
    }
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Preset name (desk_32, desk_64) or a model TOML file.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Seeds both weight initialization and training.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

impl Args {
    pub fn resolve(self) -> Result<Config> {
        let mut c: Config = load_config(self.config.as_deref())?;
        if let Some(v) = self.data {
            c.data = v;
        }
        if let Some(v) = self.out {
            c.out = v;
        }
        if let Some(v) = self.variant {
            c.variant = v.into();
        }
        if let Some(v) = self.model {
            c.model = ModelSpec::from_flag(&v)?;
        }
        if let Some(v) = self.steps {
            c.train.steps = v;
        }
        if let Some(v) = self.seed {
            c.train.seed = v;
            let mut m = c.model.resolve()?;
            m.seed = v;
            c.model = ModelSpec::Custom(Box::new(m));
        }
        if let Some(v) = self.batch {
            c.train.batch_size = v;
        }
        if let Some(v) = self.precision {
            c.train.precision = v.into();
        }
        if self.checkpoint_every.is_some() {
            c.checkpoint_every = self.checkpoint_every;
        }
        if self.resume.is_some() {
            c.resume = self.resume;
        }
        Ok(c)
    }
}

/// Loads the training split of a preprocessed dataset.
fn load_train_pool<T: Scalar>(data: &Path, resolution: usize) -> Result<VolumePool<T>> {
    let path = data.join(DATASET_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let manifest = DatasetManifest::from_toml(&text)?;
    let mut tensors = Vec::new();
    for entry in manifest.of(Split::Train) {
        let v = read_metaimage(&data.join(&entry.path))?;
        if v.domain != IntensityDomain::Normalized {
            return Err(CliError::data(format!("{} is not normalized; run preprocess", entry.path)));
        }
        if v.shape != [resolution; 3] {
            return Err(CliError::config(format!(
                "{} has shape {:?} but the model expects {resolution}^3",
                entry.path, v.shape
            )));
        }
        tensors.push(v.to_tensor::<T>());
    }
    Ok(VolumePool::new(tensors)?)
}

fn run<T: Scalar>(cfg: &Config, model: ModelConfig, out: &mut dyn Write) -> Result<Vec<PathBuf>> {
    let mut pool = load_train_pool::<T>(&resolve_input(&cfg.data), model.resolution)?;
    let mut trainer = match &cfg.resume {
        Some(dir) => {
            let t = Trainer::<T>::load_checkpoint(&resolve_input(dir))?;
            if t.bundle.variant != cfg.variant || t.bundle.config != model {
                return Err(CliError::config("resume checkpoint does not match the configured model"));
            }
            t
        }
        None => Trainer::new(ModelBundle::<T>::new(model, cfg.variant)?, cfg.train.clone())?,
    };
    create_dir(&cfg.out)?;
    let ckpt = cfg.out.join(CHECKPOINT_DIR);
    let history_path = cfg.out.join(HISTORY_FILE);
    let mut history = String::new();
    let chunk = cfg.checkpoint_every.unwrap_or(u64::MAX);
    let mut failure = None;
    while trainer.step < cfg.train.steps {
        let n = chunk.min(cfg.train.steps - trainer.step);
        let before = trainer.history.len();
        let result = trainer.run(&mut pool, n);
        for h in &trainer.history[before..] {
            history.push_str(&serde_json::to_string(h).map_err(internal)?);
            history.push('\n');
        }
        if let Err(e) = result {
            failure = Some(e);
            break;
        }
        trainer.save_checkpoint(&ckpt)?;
        if let Some(h) = trainer.history.last() {
            let _ = writeln!(
                out,
                "step {} l_gan {:.4} l_crf {:.4} l_rec {:.4}",
                trainer.step, h.l_gan, h.l_crf, h.l_reconstruction
            );
        }
    }
    std::fs::write(&history_path, &history).map_err(|e| CliError::io(&history_path, e))?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    if !ckpt.exists() {
        trainer.save_checkpoint(&ckpt)?;
    }
    Ok(vec![
        history_path,
        ckpt.join(crfgan_core::training::checkpoint::MANIFEST_FILE),
        ckpt.join(crfgan_core::training::checkpoint::PARAMS_FILE),
    ])
}

pub fn execute(cfg: Config, out: &mut dyn Write) -> Result<RunManifest> {
    let model = cfg.validate()?;
    let mb = ManifestBuilder::start("train", Some(cfg.train.seed), Some(cfg.train.precision));
    let outputs = match cfg.train.precision {
        Precision::F32 => run::<f32>(&cfg, model, out)?,
        Precision::F64 => run::<f64>(&cfg, model, out)?,
    };
    let m = mb.finish(&cfg.out, &cfg, &outputs)?;
    let _ = writeln!(out, "trained to step {} in {}", cfg.train.steps, cfg.out.display());
    Ok(m)
}
