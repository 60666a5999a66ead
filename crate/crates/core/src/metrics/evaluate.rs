//! Scores generated sample sets against a real set.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::extract::{extract_features, FeatureExtractor};
use super::mmd::{median_bandwidth, mmd2, Bandwidth, Estimator, KernelSpec};
use super::{fid, fit_stats, MetricsError, Result};
use crate::data::Volume;

pub struct NamedSet {
    pub name: String,
    pub volumes: Vec<Volume>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorInfo {
    pub name: String,
    pub dim: usize,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub name: String,
    pub samples: usize,
    pub fid: f64,
    pub mmd2: f64,
    /// SHA-256 over the shapes and voxel values of the samples used.
    pub inputs_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub extractor: ExtractorInfo,
    pub real_samples: usize,
    pub real_sha256: String,
    pub estimator: Estimator,
    /// Bandwidth actually used; a median heuristic is resolved on the real
    /// features alone so every model is scored with the same kernel.
    pub bandwidth: f64,
    pub models: Vec<ModelScore>,
}

pub fn volumes_sha256(volumes: &[Volume]) -> String {
    let mut h = Sha256::new();
    for v in volumes {
        for &d in &v.shape {
            h.update((d as u64).to_le_bytes());
        }
        for x in &v.voxels {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn take(volumes: &[Volume], n: usize) -> Result<&[Volume]> {
    if volumes.len() < n {
        return Err(MetricsError::InsufficientSamples { need: n, got: volumes.len() });
    }
    Ok(&volumes[..n])
}

/// FID and MMD^2 of each model's first `n_samples` volumes against the
/// first `n_samples` real volumes.
pub fn evaluate_models(
    real: &[Volume],
    models: &[NamedSet],
    extractor: &dyn FeatureExtractor,
    n_samples: usize,
    kernel: KernelSpec,
    estimator: Estimator,
) -> Result<EvaluationReport> {
    if n_samples < 2 {
        return Err(MetricsError::InsufficientSamples { need: 2, got: n_samples });
    }
    let real = take(real, n_samples)?;
    let real_features = extract_features(real, extractor)?;
    let real_stats = fit_stats(&real_features)?;
    let bandwidth = match kernel.bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::Median => median_bandwidth(&real_features, &DMatrix::zeros(0, real_features.ncols()))?,
    };
    let mut scores = Vec::with_capacity(models.len());
    for m in models {
        let gen = take(&m.volumes, n_samples)?;
        let features = extract_features(gen, extractor)?;
        let stats = fit_stats(&features)?;
        scores.push(ModelScore {
            name: m.name.clone(),
            samples: n_samples,
            fid: fid(&real_stats, &stats)?,
            mmd2: mmd2(&real_features, &features, KernelSpec::gaussian(bandwidth), estimator)?,
            inputs_sha256: volumes_sha256(gen),
        });
    }
    Ok(EvaluationReport {
        extractor: ExtractorInfo {
            name: extractor.name().to_string(),
            dim: extractor.dim(),
            fingerprint: extractor.fingerprint(),
        },
        real_samples: n_samples,
        real_sha256: volumes_sha256(real),
        estimator,
        bandwidth,
        models: scores,
    })
}
