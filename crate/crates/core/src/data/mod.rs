//! CT volume ingestion, intensity preprocessing, procedural phantoms and
//! dataset splitting.

pub mod metaimage;
pub mod phantom;
pub mod preprocess;
pub mod split;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Scalar, Tensor, TensorError};

pub use metaimage::{read_metaimage, write_metaimage, ElementType};
pub use phantom::{make_phantom, Nodule, Phantom, PhantomSpec};
pub use preprocess::{hu_to_normalized, normalized_to_hu, preprocess, resize_trilinear, zero_blank_slices, PreprocessConfig};
pub use split::{split_dataset, DatasetManifest, ManifestEntry, Split};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("metaimage format error: {0}")]
    Format(String),
    #[error("raw payload size mismatch: header implies {expected} bytes, file has {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("empty volume")]
    Empty,
    #[error("invalid phantom spec: {0}")]
    Spec(String),
    #[error("expected a {expected} volume, got {actual}")]
    Domain { expected: IntensityDomain, actual: IntensityDomain },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntensityDomain {
    /// Hounsfield units.
    Hu,
    /// Windowed and mapped to [-1, 1].
    Normalized,
}

impl std::fmt::Display for IntensityDomain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IntensityDomain::Hu => "hu",
            IntensityDomain::Normalized => "normalized",
        })
    }
}

/// A 3-D scalar field stored depth-major: index `(d * h + y) * w + x` for
/// `shape = [d, h, w]`. Axis 0 is the axial (slice) axis. `spacing` is in
/// millimetres per voxel in the same axis order.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub domain: IntensityDomain,
    pub voxels: Vec<f64>,
}

impl Volume {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], domain: IntensityDomain, voxels: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n == 0 {
            return Err(DataError::Empty);
        }
        if voxels.len() != n {
            return Err(DataError::Invalid(format!(
                "{} voxels for shape {:?} ({n} expected)",
                voxels.len(),
                shape
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(DataError::Invalid(format!("spacing must be positive, got {spacing:?}")));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite voxel".into()));
        }
        Ok(Volume { shape, spacing, domain, voxels })
    }

    pub fn filled(shape: [usize; 3], domain: IntensityDomain, value: f64) -> Result<Self> {
        Volume::new(shape, [1.0; 3], domain, vec![value; shape.iter().product()])
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn index(&self, d: usize, y: usize, x: usize) -> usize {
        (d * self.shape[1] + y) * self.shape[2] + x
    }

    pub fn get(&self, d: usize, y: usize, x: usize) -> f64 {
        self.voxels[self.index(d, y, x)]
    }

    /// Voxels of axial slice `d`.
    pub fn slice(&self, d: usize) -> &[f64] {
        let plane = self.shape[1] * self.shape[2];
        &self.voxels[d * plane..(d + 1) * plane]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.voxels.iter().map(|&v| T::from_f64(v)).collect();
        Tensor::from_vec(&self.shape, data).expect("volume shape matches its voxel count")
    }

    /// Builds a normalized volume from a tensor whose last three axes are
    /// spatial and whose leading axes are all 1.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, domain: IntensityDomain) -> Result<Self> {
        let s = t.shape();
        if s.len() < 3 || s[..s.len() - 3].iter().any(|&d| d != 1) {
            return Err(DataError::Invalid(format!("tensor of shape {s:?} is not a single volume")));
        }
        let n = s.len();
        let shape = [s[n - 3], s[n - 2], s[n - 1]];
        Volume::new(shape, [1.0; 3], domain, t.data().iter().map(|v| v.as_f64()).collect())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.voxels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.voxels.iter().sum::<f64>() / self.voxels.len() as f64
    }
}
