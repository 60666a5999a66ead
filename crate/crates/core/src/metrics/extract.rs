//! Frozen feature extractors mapping a normalized volume to a vector.

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use super::{MetricsError, Result};
use crate::data::Volume;
use crate::models::{ModelBundle, Network};
use crate::tensor::{Graph, Scalar};

pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, volume: &Volume) -> Result<Vec<f64>>;
    /// Hex SHA-256 identifying the extractor's definition and weights.
    fn fingerprint(&self) -> String;
}

/// Rows are `extractor.extract(volume)` in input order.
pub fn extract_features(volumes: &[Volume], extractor: &dyn FeatureExtractor) -> Result<DMatrix<f64>> {
    let f = extractor.dim();
    let mut data = Vec::with_capacity(volumes.len() * f);
    for v in volumes {
        let row = extractor.extract(v)?;
        if row.len() != f {
            return Err(MetricsError::DimensionMismatch(row.len(), f));
        }
        data.extend(row);
    }
    Ok(DMatrix::from_row_slice(volumes.len(), f, &data))
}

/// Hand-defined, weight-free descriptor:
///
/// * mean intensity in each cell of a `grid^3` partition (`grid^3` values),
/// * an intensity histogram over [-1, 1] with `bins` equal bins, as
///   fractions (`bins` values),
/// * mean absolute forward difference along each axis (3 values).
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityExtractor {
    pub grid: usize,
    pub bins: usize,
}

impl Default for IntensityExtractor {
    fn default() -> Self {
        IntensityExtractor { grid: 4, bins: 16 }
    }
}

impl FeatureExtractor for IntensityExtractor {
    fn name(&self) -> &str {
        "intensity"
    }

    fn dim(&self) -> usize {
        self.grid.pow(3) + self.bins + 3
    }

    fn extract(&self, v: &Volume) -> Result<Vec<f64>> {
        let [d, h, w] = v.shape;
        if d < self.grid || h < self.grid || w < self.grid {
            return Err(MetricsError::Extractor(format!(
                "volume {:?} is smaller than the {}^3 grid",
                v.shape, self.grid
            )));
        }
        let g = self.grid;
        let mut cells = vec![0.0; g * g * g];
        let mut counts = vec![0usize; g * g * g];
        let mut hist = vec![0.0; self.bins];
        let mut grad = [0.0; 3];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let val = v.get(z, y, x);
                    let c = ((z * g / d) * g + y * g / h) * g + x * g / w;
                    cells[c] += val;
                    counts[c] += 1;
                    let b = (((val.clamp(-1.0, 1.0) + 1.0) / 2.0) * self.bins as f64) as usize;
                    hist[b.min(self.bins - 1)] += 1.0;
                    if z + 1 < d {
                        grad[0] += (v.get(z + 1, y, x) - val).abs();
                    }
                    if y + 1 < h {
                        grad[1] += (v.get(z, y + 1, x) - val).abs();
                    }
                    if x + 1 < w {
                        grad[2] += (v.get(z, y, x + 1) - val).abs();
                    }
                }
            }
        }
        let n = (d * h * w) as f64;
        let mut out: Vec<f64> = cells.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
        out.extend(hist.iter().map(|c| c / n));
        let pairs = [(d - 1) * h * w, d * (h - 1) * w, d * h * (w - 1)];
        out.extend((0..3).map(|a| if pairs[a] > 0 { grad[a] / pairs[a] as f64 } else { 0.0 }));
        Ok(out)
    }

    fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(format!("intensity-v1 grid={} bins={}", self.grid, self.bins)))
    }
}

/// The half-encoder's first-block activations, average-pooled per channel
/// over a `2^3` partition of the half-resolution grid (`8 * C` values).
pub struct EncoderExtractor<T> {
    bundle: ModelBundle<T>,
    fingerprint: String,
}

impl<T: Scalar> EncoderExtractor<T> {
    pub fn new(bundle: ModelBundle<T>) -> Self {
        let mut h = Sha256::new();
        h.update(b"encoder-v1");
        h.update(T::PRECISION.to_string());
        for id in bundle.store.ids_with_prefix(Network::He.prefix()) {
            let p = bundle.store.get(id);
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        EncoderExtractor {
            fingerprint: hex::encode(h.finalize()),
            bundle,
        }
    }
}

impl<T: Scalar> FeatureExtractor for EncoderExtractor<T> {
    fn name(&self) -> &str {
        "encoder"
    }

    fn dim(&self) -> usize {
        8 * self.bundle.config.he_channels
    }

    fn extract(&self, v: &Volume) -> Result<Vec<f64>> {
        let r = self.bundle.config.resolution;
        if v.shape != [r, r, r] {
            return Err(MetricsError::Extractor(format!(
                "encoder expects a {r}^3 volume, got {:?}",
                v.shape
            )));
        }
        let mut g = Graph::new();
        let x = g.input(v.to_tensor::<T>().reshape(&[1, 1, r, r, r])?)?;
        let h = self.bundle.he.penultimate(&mut g, &self.bundle.store, x)?;
        let half = g.shape(h)[2];
        let pooled = g.avg_pool3d(h, [half / 2; 3])?;
        Ok(g.value(pooled).data().iter().map(|v| v.as_f64()).collect())
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}
