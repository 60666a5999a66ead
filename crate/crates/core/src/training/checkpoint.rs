//! Checkpoint directories.
//!
//! A checkpoint is a directory holding:
//!
//! * `manifest.toml`: format version, precision, variant, training seed,
//!   generator word position, step count, optimizer step counters, and the
//!   full model and training configs. No timestamps, so identical state
//!   gives identical bytes.
//! * `params.bin`: a flat container. Layout (all integers little-endian):
//!
//!   ```text
//!   magic    4 bytes  "CRFG"
//!   version  u32      1
//!   count    u32      number of entries
//!   entry*:
//!     name_len u32, name (UTF-8)
//!     ndim     u32, dims (u64 each)
//!     nbytes   u64, payload (little-endian scalars of the manifest precision)
//!   ```
//!
//!   Entries are every stored tensor in registration order (parameters,
//!   running statistics, power-iteration vectors), followed by the Adam
//!   moments of each optimizer as `adam.<group>.m.<param>` and
//!   `adam.<group>.v.<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError, Trainer};
use crate::models::{ModelBundle, ModelConfig, Variant};
use crate::tensor::{Precision, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"CRFG";
const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerRecord {
    pub step: u64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub precision: Precision,
    pub variant: Variant,
    pub seed: u64,
    /// ChaCha word position, decimal (exceeds TOML's integer range).
    pub rng_word_pos: String,
    pub step: u64,
    pub optimizers: BTreeMap<String, OptimizerRecord>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn err(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

pub fn encode_entries<T: Scalar>(entries: &[(String, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&((t.numel() * T::BYTES) as u64).to_le_bytes());
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| err(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_entries<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>, TrainError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(err("bad magic in parameter container"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(err(format!("unsupported container version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| err("entry name is not UTF-8"))?
            .to_string();
        let ndim = c.u32()? as usize;
        let dims: Vec<usize> = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let nbytes = c.u64()? as usize;
        let numel: usize = dims.iter().product();
        if nbytes != numel * T::BYTES {
            return Err(err(format!(
                "entry {name}: payload of {nbytes} bytes does not match shape {dims:?} at {} bytes per scalar",
                T::BYTES
            )));
        }
        let payload = c.take(nbytes)?;
        let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
        out.push((name, Tensor::from_vec(&dims, data)?));
    }
    if c.pos != bytes.len() {
        return Err(err("trailing bytes after last entry"));
    }
    Ok(out)
}

fn adam_name(group: &str, moment: &str, param: &str) -> String {
    format!("adam.{group}.{moment}.{param}")
}

impl<T: Scalar> Trainer<T> {
    pub fn manifest(&self) -> CheckpointManifest {
        CheckpointManifest {
            format_version: VERSION,
            precision: T::PRECISION,
            variant: self.bundle.variant,
            seed: self.config.seed,
            rng_word_pos: self.rng.get_word_pos().to_string(),
            step: self.step,
            optimizers: self
                .optimizers
                .iter()
                .into_iter()
                .map(|(k, o)| (k.to_string(), OptimizerRecord { step: o.step, lr: o.lr }))
                .collect(),
            model: self.bundle.config.clone(),
            train: self.config.clone(),
        }
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        let store = &self.bundle.store;
        let mut entries: Vec<(String, &Tensor<T>)> = store.iter().map(|(_, p)| (p.name.clone(), &p.value)).collect();
        for (group, opt) in self.optimizers.iter() {
            for (k, &id) in opt.params.iter().enumerate() {
                let name = &store.get(id).name;
                entries.push((adam_name(group, "m", name), &opt.first_moment[k]));
                entries.push((adam_name(group, "v", name), &opt.second_moment[k]));
            }
        }
        let manifest = toml::to_string(&self.manifest()).map_err(|e| err(e.to_string()))?;
        fs::write(dir.join(PARAMS_FILE), encode_entries(&entries))?;
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self, TrainError> {
        let manifest = read_manifest(dir)?;
        check_precision::<T>(&manifest)?;
        let bundle = ModelBundle::new(manifest.model.clone(), manifest.variant)?;
        let mut trainer = Trainer::new(bundle, manifest.train.clone())?;
        let mut entries: BTreeMap<String, Tensor<T>> = read_entries(dir)?;
        let ids: Vec<_> = trainer.bundle.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = entries.remove(&name).ok_or_else(|| err(format!("missing entry {name}")))?;
            trainer.bundle.store.set(id, t)?;
        }
        let store = &trainer.bundle.store;
        for (group, opt) in trainer.optimizers.iter_mut() {
            let rec = manifest
                .optimizers
                .get(group)
                .ok_or_else(|| err(format!("manifest lacks optimizer {group}")))?;
            opt.step = rec.step;
            opt.lr = rec.lr;
            for k in 0..opt.params.len() {
                let name = &store.get(opt.params[k]).name;
                for (moment, slot) in [("m", &mut opt.first_moment[k]), ("v", &mut opt.second_moment[k])] {
                    let key = adam_name(group, moment, name);
                    let t = entries.remove(&key).ok_or_else(|| err(format!("missing entry {key}")))?;
                    if t.shape() != slot.shape() {
                        return Err(err(format!("entry {key} has shape {:?}, expected {:?}", t.shape(), slot.shape())));
                    }
                    *slot = t;
                }
            }
        }
        if let Some(extra) = entries.keys().next() {
            return Err(err(format!("unexpected entry {extra}")));
        }
        let pos: u128 = manifest
            .rng_word_pos
            .parse()
            .map_err(|_| err(format!("bad rng_word_pos {:?}", manifest.rng_word_pos)))?;
        trainer.rng = ChaCha8Rng::seed_from_u64(manifest.seed);
        trainer.rng.set_word_pos(pos);
        trainer.step = manifest.step;
        Ok(trainer)
    }
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest, TrainError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| err(format!("cannot read {}: {e}", path.display())))?;
    let manifest: CheckpointManifest =
        toml::from_str(&text).map_err(|e| err(format!("corrupt manifest {}: {}", path.display(), e.message())))?;
    if manifest.format_version != VERSION {
        return Err(err(format!("unsupported checkpoint version {}", manifest.format_version)));
    }
    manifest.model.validate()?;
    Ok(manifest)
}

fn check_precision<T: Scalar>(manifest: &CheckpointManifest) -> Result<(), TrainError> {
    if manifest.precision != T::PRECISION {
        return Err(err(format!(
            "checkpoint precision is {}, refusing to load as {}",
            manifest.precision,
            T::PRECISION
        )));
    }
    Ok(())
}

fn read_entries<T: Scalar>(dir: &Path) -> Result<BTreeMap<String, Tensor<T>>, TrainError> {
    let mut bytes = Vec::new();
    fs::File::open(dir.join(PARAMS_FILE))?.read_to_end(&mut bytes)?;
    let mut map = BTreeMap::new();
    for (name, t) in decode_entries::<T>(&bytes)? {
        if map.insert(name.clone(), t).is_some() {
            return Err(err(format!("duplicate entry {name}")));
        }
    }
    Ok(map)
}

/// Model parameters only (optimizer state ignored), for inference.
pub fn load_bundle<T: Scalar>(dir: &Path) -> Result<ModelBundle<T>, TrainError> {
    let manifest = read_manifest(dir)?;
    check_precision::<T>(&manifest)?;
    let mut bundle = ModelBundle::new(manifest.model.clone(), manifest.variant)?;
    let mut entries = read_entries::<T>(dir)?;
    let ids: Vec<_> = bundle.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let t = entries.remove(&name).ok_or_else(|| err(format!("missing entry {name}")))?;
        bundle.store.set(id, t)?;
    }
    Ok(bundle)
}
