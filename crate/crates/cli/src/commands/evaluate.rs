use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crfgan_core::data::{read_metaimage, DatasetManifest, IntensityDomain, Split, Volume};
use crfgan_core::metrics::{
    evaluate_models, Bandwidth, EncoderExtractor, Estimator, EvaluationReport, FeatureExtractor, IntensityExtractor,
    KernelSpec, NamedSet,
};
use crfgan_core::training::checkpoint::{load_bundle, read_manifest};
use crfgan_core::Precision;
use serde::{Deserialize, Serialize};

use super::preprocess::DATASET_FILE;
use super::write_json;
use crate::error::{CliError, Result};
use crate::manifest::{ManifestBuilder, RunManifest};
use crate::util::{create_dir, load_config, read_volumes, require_dir, resolve_input};

pub const REPORT_FILE: &str = "evaluation.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ExtractorConfig {
    Intensity { grid: usize, bins: usize },
    /// Encoder features of a trained checkpoint.
    Encoder { checkpoint: PathBuf },
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        let d = IntensityExtractor::default();
        ExtractorConfig::Intensity { grid: d.grid, bins: d.bins }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// A volume directory, or a preprocessed dataset when `real_split` is set.
    pub real: PathBuf,
    pub real_split: Option<Split>,
    /// Model name to directory of generated volumes.
    pub generated: BTreeMap<String, PathBuf>,
    pub out: PathBuf,
    pub n: usize,
    pub extractor: ExtractorConfig,
    pub estimator: Estimator,
    pub bandwidth: Bandwidth,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            real: "data/processed".into(),
            real_split: None,
            generated: BTreeMap::new(),
            out: "runs/eval".into(),
            n: 8,
            extractor: ExtractorConfig::default(),
            estimator: Estimator::Unbiased,
            bandwidth: Bandwidth::Median,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ExtractorArg {
    Intensity,
    Encoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EstimatorArg {
    Biased,
    Unbiased,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub real: Option<PathBuf>,
    /// Use only this split of the dataset in `--real`.
    #[arg(long, value_parser = parse_split)]
    pub real_split: Option<Split>,
    /// Repeatable `NAME=DIR`.
    #[arg(long = "generated", value_parser = parse_named)]
    pub generated: Vec<(String, PathBuf)>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_enum)]
    pub extractor: Option<ExtractorArg>,
    /// Checkpoint for the encoder extractor.
    #[arg(long)]
    pub encoder_checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub estimator: Option<EstimatorArg>,
    /// A positive number or `median`.
    #[arg(long, value_parser = parse_bandwidth)]
    pub bandwidth: Option<Bandwidth>,
}

fn parse_named(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, dir)) if !name.is_empty() && !dir.is_empty() => Ok((name.to_string(), dir.into())),
        _ => Err(format!("expected NAME=DIR, got {s:?}")),
    }
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        _ => Err(format!("expected train or val, got {s:?}")),
    }
}

fn parse_bandwidth(s: &str) -> std::result::Result<Bandwidth, String> {
    if s == "median" {
        return Ok(Bandwidth::Median);
    }
    s.parse::<f64>()
        .map(Bandwidth::Fixed)
        .map_err(|_| format!("expected a number or median, got {s:?}"))
}

impl Args {
    pub fn resolve(self) -> Result<Config> {
        let mut c: Config = load_config(self.config.as_deref())?;
        if let Some(v) = self.real {
            c.real = v;
        }
        if self.real_split.is_some() {
            c.real_split = self.real_split;
        }
        if !self.generated.is_empty() {
            c.generated = self.generated.into_iter().collect();
        }
        if let Some(v) = self.out {
            c.out = v;
        }
        if let Some(v) = self.n {
            c.n = v;
        }
        match (self.extractor, self.encoder_checkpoint) {
            (Some(ExtractorArg::Encoder), Some(p)) | (None, Some(p)) => {
                c.extractor = ExtractorConfig::Encoder { checkpoint: p };
            }
            (Some(ExtractorArg::Encoder), None) => {
                if !matches!(c.extractor, ExtractorConfig::Encoder { .. }) {
                    return Err(CliError::usage("--extractor encoder requires --encoder-checkpoint"));
                }
            }
            (Some(ExtractorArg::Intensity), Some(_)) => {
                return Err(CliError::usage("--encoder-checkpoint conflicts with --extractor intensity"));
            }
            (Some(ExtractorArg::Intensity), None) => {
                if !matches!(c.extractor, ExtractorConfig::Intensity { .. }) {
                    c.extractor = ExtractorConfig::default();
                }
            }
            (None, None) => {}
        }
        if let Some(v) = self.estimator {
            c.estimator = match v {
                EstimatorArg::Biased => Estimator::Biased,
                EstimatorArg::Unbiased => Estimator::Unbiased,
            };
        }
        if let Some(v) = self.bandwidth {
            c.bandwidth = v;
        }
        Ok(c)
    }
}

impl Config {
    fn validate(&self) -> Result<()> {
        if self.generated.is_empty() {
            return Err(CliError::config("at least one generated set is required"));
        }
        if self.n < 2 {
            return Err(CliError::config("n must be at least 2"));
        }
        if let Bandwidth::Fixed(s) = self.bandwidth {
            if !(s > 0.0 && s.is_finite()) {
                return Err(CliError::config("bandwidth must be positive"));
            }
        }
        if let ExtractorConfig::Intensity { grid, bins } = self.extractor {
            if grid == 0 || bins == 0 {
                return Err(CliError::config("extractor grid and bins must be positive"));
            }
        }
        Ok(())
    }
}

fn check_normalized(name: &str, v: &Volume) -> Result<()> {
    if v.domain != IntensityDomain::Normalized {
        return Err(CliError::data(format!("{name} is not normalized; run preprocess")));
    }
    Ok(())
}

fn read_set(dir: &Path) -> Result<Vec<Volume>> {
    read_volumes(dir)?
        .into_iter()
        .map(|(name, v)| check_normalized(&name, &v).map(|_| v))
        .collect()
}

fn read_real(cfg: &Config) -> Result<Vec<Volume>> {
    let dir = resolve_input(&cfg.real);
    let Some(split) = cfg.real_split else {
        return read_set(&dir);
    };
    let path = dir.join(DATASET_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let manifest = DatasetManifest::from_toml(&text)?;
    manifest
        .of(split)
        .map(|e| {
            let v = read_metaimage(&dir.join(&e.path))?;
            check_normalized(&e.path, &v).map(|_| v)
        })
        .collect()
}

fn build_extractor(cfg: &ExtractorConfig) -> Result<Box<dyn FeatureExtractor>> {
    Ok(match cfg {
        ExtractorConfig::Intensity { grid, bins } => Box::new(IntensityExtractor { grid: *grid, bins: *bins }),
        ExtractorConfig::Encoder { checkpoint } => {
            let dir = resolve_input(checkpoint);
            require_dir(&dir)?;
            match read_manifest(&dir)?.precision {
                Precision::F32 => Box::new(EncoderExtractor::new(load_bundle::<f32>(&dir)?)),
                Precision::F64 => Box::new(EncoderExtractor::new(load_bundle::<f64>(&dir)?)),
            }
        }
    })
}

pub fn execute(cfg: Config, out: &mut dyn Write) -> Result<RunManifest> {
    cfg.validate()?;
    let mb = ManifestBuilder::start("evaluate", None, None);
    let extractor = build_extractor(&cfg.extractor)?;
    let real = read_real(&cfg)?;
    let mut sets = Vec::with_capacity(cfg.generated.len());
    for (name, dir) in &cfg.generated {
        sets.push(NamedSet {
            name: name.clone(),
            volumes: read_set(&resolve_input(dir))?,
        });
    }
    let report: EvaluationReport = evaluate_models(
        &real,
        &sets,
        extractor.as_ref(),
        cfg.n,
        KernelSpec { bandwidth: cfg.bandwidth },
        cfg.estimator,
    )?;
    create_dir(&cfg.out)?;
    let path = write_json(&cfg.out, REPORT_FILE, &report)?;
    for m in &report.models {
        let _ = writeln!(out, "{:<16} fid {:.6} mmd2 {:.6}", m.name, m.fid, m.mmd2);
    }
    mb.finish(&cfg.out, &cfg, &[path])
}
