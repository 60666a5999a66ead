use std::io::Write;
use std::path::{Path, PathBuf};

use crfgan_core::data::{ElementType, IntensityDomain, Volume};
use crfgan_core::training::checkpoint::{load_bundle, read_manifest};
use crfgan_core::{Precision, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::manifest::{ManifestBuilder, RunManifest};
use crate::util::{create_dir, load_config, require_dir, resolve_input, write_volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub n: usize,
    pub seed: u64,
    /// Decode the embedding slab by slab instead of in one pass.
    pub stitched: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            checkpoint: "runs/train/checkpoint".into(),
            out: "runs/generated".into(),
            n: 8,
            seed: 0,
            stitched: false,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub stitched: bool,
}

impl Args {
    pub fn resolve(self) -> Result<Config> {
        let mut c: Config = load_config(self.config.as_deref())?;
        if let Some(v) = self.checkpoint {
            c.checkpoint = v;
        }
        if let Some(v) = self.out {
            c.out = v;
        }
        if let Some(v) = self.n {
            c.n = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        c.stitched |= self.stitched;
        Ok(c)
    }
}

/// Volume `i` is decoded from the `i`-th latent drawn from one stream
/// seeded with `seed`.
fn run<T: Scalar>(cfg: &Config, ckpt: &Path) -> Result<Vec<PathBuf>> {
    let bundle = load_bundle::<T>(ckpt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut outputs = Vec::with_capacity(2 * cfg.n);
    for i in 0..cfg.n {
        let z = bundle.sample_latent(1, &mut rng);
        let t = if cfg.stitched {
            bundle.generate_stitched(&z)?
        } else {
            bundle.generate_full(&z)?
        };
        let v = Volume::from_tensor(&t, IntensityDomain::Normalized)?;
        outputs.extend(write_volume(&cfg.out, &format!("sample_{i:04}"), &v, ElementType::Float)?);
    }
    Ok(outputs)
}

pub fn execute(cfg: Config, out: &mut dyn Write) -> Result<RunManifest> {
    if cfg.n == 0 {
        return Err(CliError::config("n must be positive"));
    }
    let ckpt = resolve_input(&cfg.checkpoint);
    require_dir(&ckpt)?;
    let precision = read_manifest(&ckpt)?.precision;
    let mb = ManifestBuilder::start("generate", Some(cfg.seed), Some(precision));
    create_dir(&cfg.out)?;
    let outputs = match precision {
        Precision::F32 => run::<f32>(&cfg, &ckpt)?,
        Precision::F64 => run::<f64>(&cfg, &ckpt)?,
    };
    let m = mb.finish(&cfg.out, &cfg, &outputs)?;
    let _ = writeln!(out, "generated {} volumes in {}", cfg.n, cfg.out.display());
    Ok(m)
}
