//! Seeded train/validation splits and the dataset manifest.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Result};

/// Splits `items` after a seeded shuffle. The validation set gets
/// `floor(n (1 - train_frac))` items (888 at 0.9 gives 88), clamped so both
/// sides are non-empty.
pub fn split_dataset<T: Clone>(items: &[T], train_frac: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let n = items.len();
    if n < 2 {
        return Err(DataError::Invalid(format!("need at least 2 items to split, got {n}")));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(DataError::Invalid(format!("train_frac must be in (0, 1), got {train_frac}")));
    }
    // The epsilon absorbs representation error, e.g. 10 * (1 - 0.9) = 0.9999...
    let val = ((n as f64 * (1.0 - train_frac)) + 1e-9).floor() as usize;
    let val = val.clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = order[..n - val].iter().map(|&i| items[i].clone()).collect();
    let valid = order[n - val..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, valid))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Path of the `.mhd` header, relative to the manifest's directory.
    pub path: String,
    pub split: Split,
}

/// Lists the volumes of a dataset and their split assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub train_frac: f64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Assigns `(id, path)` pairs to splits with [`split_dataset`]; entries
    /// are listed in input order.
    pub fn build(items: &[(String, String)], train_frac: f64, seed: u64) -> Result<Self> {
        let ids: Vec<usize> = (0..items.len()).collect();
        let (_, val) = split_dataset(&ids, train_frac, seed)?;
        let entries = items
            .iter()
            .enumerate()
            .map(|(i, (id, path))| ManifestEntry {
                id: id.clone(),
                path: path.clone(),
                split: if val.contains(&i) { Split::Val } else { Split::Train },
            })
            .collect();
        Ok(DatasetManifest { seed, train_frac, entries })
    }

    pub fn of(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DataError::Format(format!("dataset manifest: {}", e.message())))
    }
}
