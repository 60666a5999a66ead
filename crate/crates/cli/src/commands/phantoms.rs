use std::io::Write;
use std::path::PathBuf;

use crfgan_core::data::{make_phantom, ElementType, PhantomSpec, Volume};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::manifest::{ManifestBuilder, RunManifest};
use crate::util::{create_dir, load_config, write_volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub out: PathBuf,
    pub count: usize,
    /// Phantom `i` uses seed `seed + i`.
    pub seed: u64,
    /// Geometry and intensities; its `seed` field is ignored.
    pub phantom: PhantomSpec,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            out: "phantoms".into(),
            count: 200,
            seed: 0,
            phantom: PhantomSpec::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(CliError::config("count must be positive"));
        }
        make_phantom(&self.spec(0)).map(|_| ()).map_err(Into::into)
    }

    fn spec(&self, i: usize) -> PhantomSpec {
        PhantomSpec {
            seed: self.seed.wrapping_add(i as u64),
            ..self.phantom.clone()
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct Args {
    /// TOML config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub resolution: Option<usize>,
}

impl Args {
    pub fn resolve(self) -> Result<Config> {
        let mut c: Config = load_config(self.config.as_deref())?;
        if let Some(v) = self.out {
            c.out = v;
        }
        if let Some(v) = self.count {
            c.count = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.resolution {
            c.phantom.resolution = v;
        }
        Ok(c)
    }
}

/// HU values are rounded to integers and stored as 16-bit, like CT data.
pub fn execute(cfg: Config, out: &mut dyn Write) -> Result<RunManifest> {
    cfg.validate()?;
    let mb = ManifestBuilder::start("phantoms", Some(cfg.seed), None);
    create_dir(&cfg.out)?;
    let mut outputs = Vec::new();
    for i in 0..cfg.count {
        let p = make_phantom(&cfg.spec(i))?;
        let v = p.volume;
        let rounded = Volume::new(
            v.shape,
            v.spacing,
            v.domain,
            v.voxels.iter().map(|x| x.round().clamp(-32768.0, 32767.0)).collect(),
        )?;
        outputs.extend(write_volume(&cfg.out, &format!("phantom_{i:04}"), &rounded, ElementType::Short)?);
    }
    let m = mb.finish(&cfg.out, &cfg, &outputs)?;
    let _ = writeln!(out, "wrote {} phantoms to {}", cfg.count, cfg.out.display());
    Ok(m)
}
