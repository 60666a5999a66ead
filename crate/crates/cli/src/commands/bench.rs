use std::io::Write;
use std::path::PathBuf;

use crfgan_core::data::{make_phantom, preprocess, PhantomSpec, PreprocessConfig};
use crfgan_core::training::measure::{measure_peak_memory, measure_throughput};
use crfgan_core::training::{TrainConfig, Trainer, VolumePool};
use crfgan_core::{ModelBundle, ModelConfig, Precision, Scalar, Variant};
use serde::{Deserialize, Serialize};

use super::{write_json, ModelSpec, VariantArg};
use crate::error::{CliError, Result};
use crate::manifest::{ManifestBuilder, RunManifest};
use crate::util::{create_dir, load_config};

pub const REPORT_FILE: &str = "bench.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub out: PathBuf,
    pub variants: Vec<Variant>,
    pub batch_sizes: Vec<usize>,
    /// Slab counts to compare; empty means the model's own.
    pub slab_counts: Vec<usize>,
    /// Runs whose peak exceeds this are reported as exceeding memory.
    pub memory_budget_mb: f64,
    pub memory_steps: u64,
    pub warmup_steps: u64,
    /// 0 skips throughput timing.
    pub timed_steps: u64,
    pub chunks: usize,
    /// Phantoms synthesized at the model resolution as training data.
    pub pool_size: usize,
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            out: "runs/bench".into(),
            variants: vec![Variant::CrfGan, Variant::HaGanLite],
            batch_sizes: vec![2, 4],
            slab_counts: Vec::new(),
            memory_budget_mb: 64.0,
            memory_steps: 2,
            warmup_steps: 2,
            timed_steps: 20,
            chunks: 4,
            pool_size: 8,
            seed: 0,
            precision: Precision::F32,
            model: ModelSpec::Preset("desk_64".into()),
            train: TrainConfig::default(),
        }
    }
}

impl Config {
    fn validate(&self) -> Result<ModelConfig> {
        let model = self.model.resolve()?;
        if self.variants.is_empty() || self.batch_sizes.is_empty() {
            return Err(CliError::config("variants and batch_sizes must be non-empty"));
        }
        if self.batch_sizes.contains(&0) {
            return Err(CliError::config("batch sizes must be positive"));
        }
        if !(self.memory_budget_mb > 0.0) {
            return Err(CliError::config("memory_budget_mb must be positive"));
        }
        if self.memory_steps == 0 || self.pool_size == 0 {
            return Err(CliError::config("memory_steps and pool_size must be positive"));
        }
        if self.timed_steps > 0 && (self.chunks == 0 || self.timed_steps % self.chunks as u64 != 0) {
            return Err(CliError::config("timed_steps must be a multiple of chunks"));
        }
        for &s in &self.slab_counts {
            ModelConfig { slab_count: s, ..model.clone() }.validate()?;
        }
        self.train.validate()?;
        Ok(model)
    }
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Repeatable; defaults to both variants.
    #[arg(long = "variant", value_enum)]
    pub variants: Vec<VariantArg>,
    /// Repeatable batch size.
    #[arg(long = "batch")]
    pub batches: Vec<usize>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub memory_budget_mb: Option<f64>,
    #[arg(long)]
    pub timed_steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Args {
    pub fn resolve(self) -> Result<Config> {
        let mut c: Config = load_config(self.config.as_deref())?;
        if let Some(v) = self.out {
            c.out = v;
        }
        if !self.variants.is_empty() {
            c.variants = self.variants.into_iter().map(Into::into).collect();
        }
        if !self.batches.is_empty() {
            c.batch_sizes = self.batches;
        }
        if let Some(v) = self.model {
            c.model = ModelSpec::from_flag(&v)?;
        }
        if let Some(v) = self.memory_budget_mb {
            c.memory_budget_mb = v;
        }
        if let Some(v) = self.timed_steps {
            c.timed_steps = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    ExceedsMemory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: Variant,
    pub batch_size: usize,
    pub slab_count: usize,
    pub parameters: usize,
    pub param_bytes: usize,
    pub peak_bytes: usize,
    pub status: RunStatus,
    pub iters_per_sec: Option<f64>,
    pub iters_per_sec_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub resolution: usize,
    pub precision: Precision,
    pub memory_budget_bytes: usize,
    pub rows: Vec<BenchRow>,
}

fn rows<T: Scalar>(cfg: &Config, model: &ModelConfig) -> Result<Vec<BenchRow>> {
    let r = model.resolution;
    let mut vols = Vec::with_capacity(cfg.pool_size);
    for i in 0..cfg.pool_size {
        let spec = PhantomSpec {
            seed: cfg.seed.wrapping_add(i as u64),
            resolution: r,
            ..PhantomSpec::default()
        };
        vols.push(preprocess(&make_phantom(&spec)?.volume, &PreprocessConfig::default())?.to_tensor::<T>());
    }
    let budget = (cfg.memory_budget_mb * 1024.0 * 1024.0) as usize;
    let slabs = if cfg.slab_counts.is_empty() {
        vec![model.slab_count]
    } else {
        cfg.slab_counts.clone()
    };
    let mut out = Vec::new();
    for &variant in &cfg.variants {
        for &slab_count in &slabs {
            let m = ModelConfig {
                slab_count,
                ..model.clone()
            };
            let parameters = ModelBundle::<T>::new(m.clone(), variant)?.count_parameters().total;
            for &batch_size in &cfg.batch_sizes {
                let train = TrainConfig {
                    batch_size,
                    seed: cfg.seed,
                    precision: T::PRECISION,
                    ..cfg.train.clone()
                };
                let mem = measure_peak_memory::<T, _>(&m, variant, &train, &mut VolumePool::new(vols.clone())?, cfg.memory_steps)?;
                let status = if mem.peak_bytes > budget {
                    RunStatus::ExceedsMemory
                } else {
                    RunStatus::Ok
                };
                let (mut ips, mut ips_std) = (None, None);
                if status == RunStatus::Ok && cfg.timed_steps > 0 {
                    let mut trainer = Trainer::new(ModelBundle::<T>::new(m.clone(), variant)?, train)?;
                    let t = measure_throughput(
                        &mut trainer,
                        &mut VolumePool::new(vols.clone())?,
                        cfg.warmup_steps,
                        cfg.timed_steps,
                        cfg.chunks,
                    )?;
                    ips = Some(t.iters_per_sec);
                    ips_std = Some(t.iters_per_sec_std);
                }
                out.push(BenchRow {
                    variant,
                    batch_size,
                    slab_count,
                    parameters,
                    param_bytes: mem.param_bytes,
                    peak_bytes: mem.peak_bytes,
                    status,
                    iters_per_sec: ips,
                    iters_per_sec_std: ips_std,
                });
            }
        }
    }
    Ok(out)
}

pub fn execute(cfg: Config, out: &mut dyn Write) -> Result<RunManifest> {
    let model = cfg.validate()?;
    let mb = ManifestBuilder::start("bench", Some(cfg.seed), Some(cfg.precision));
    let rows = match cfg.precision {
        Precision::F32 => rows::<f32>(&cfg, &model)?,
        Precision::F64 => rows::<f64>(&cfg, &model)?,
    };
    let report = BenchReport {
        resolution: model.resolution,
        precision: cfg.precision,
        memory_budget_bytes: (cfg.memory_budget_mb * 1024.0 * 1024.0) as usize,
        rows,
    };
    create_dir(&cfg.out)?;
    let path = write_json(&cfg.out, REPORT_FILE, &report)?;
    for row in &report.rows {
        let speed = match (row.status, row.iters_per_sec) {
            (RunStatus::ExceedsMemory, _) => "exceeds memory".to_string(),
            (_, Some(v)) => format!("{v:.2} it/s"),
            (_, None) => "-".to_string(),
        };
        let _ = writeln!(
            out,
            "{:<10} batch {} slabs {} params {} peak {:.2} MB {}",
            row.variant.label(),
            row.batch_size,
            row.slab_count,
            row.parameters,
            row.peak_bytes as f64 / (1024.0 * 1024.0),
            speed
        );
    }
    mb.finish(&cfg.out, &cfg, &[path])
}
