//! Intensity windowing, blank-slice handling and trilinear resizing.

use serde::{Deserialize, Serialize};

use super::{DataError, IntensityDomain, Result, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// HU window `[low, high]` mapped onto [-1, 1].
    pub window: [f64; 2],
    /// An axial slice whose every voxel is strictly below this HU value is
    /// blank and replaced by 0 HU before windowing.
    pub blank_threshold: f64,
    /// Output cube edge; `None` keeps the input grid.
    pub target: Option<usize>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            window: [-1024.0, 600.0],
            blank_threshold: -1000.0,
            target: None,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.window;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(DataError::Invalid(format!("window must satisfy low < high, got {:?}", self.window)));
        }
        if let Some(t) = self.target {
            if t < 2 {
                return Err(DataError::Invalid(format!("target edge must be at least 2, got {t}")));
            }
        }
        Ok(())
    }
}

/// `2 (clip(v, lo, hi) - lo) / (hi - lo) - 1`.
pub fn hu_to_normalized(v: f64, window: [f64; 2]) -> f64 {
    let [lo, hi] = window;
    2.0 * (v.clamp(lo, hi) - lo) / (hi - lo) - 1.0
}

/// Inverse of [`hu_to_normalized`] on [-1, 1].
pub fn normalized_to_hu(v: f64, window: [f64; 2]) -> f64 {
    let [lo, hi] = window;
    (v + 1.0) * (hi - lo) / 2.0 + lo
}

/// Replaces every axial slice lying entirely below `threshold` with 0 HU.
/// Returns the indices of the replaced slices.
pub fn zero_blank_slices(vol: &mut Volume, threshold: f64) -> Vec<usize> {
    let plane = vol.shape[1] * vol.shape[2];
    let mut blanks = Vec::new();
    for d in 0..vol.shape[0] {
        let s = &mut vol.voxels[d * plane..(d + 1) * plane];
        if s.iter().all(|&v| v < threshold) {
            s.fill(0.0);
            blanks.push(d);
        }
    }
    blanks
}

/// Full pipeline: blank-slice zeroing in HU, windowing to [-1, 1], then an
/// optional trilinear resize to a cube.
pub fn preprocess(vol: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    cfg.validate()?;
    if vol.is_empty() {
        return Err(DataError::Empty);
    }
    if vol.domain != IntensityDomain::Hu {
        return Err(DataError::Domain {
            expected: IntensityDomain::Hu,
            actual: vol.domain,
        });
    }
    let mut v = vol.clone();
    zero_blank_slices(&mut v, cfg.blank_threshold);
    for x in &mut v.voxels {
        *x = hu_to_normalized(*x, cfg.window);
    }
    v.domain = IntensityDomain::Normalized;
    match cfg.target {
        Some(t) => resize_trilinear(&v, [t, t, t]),
        None => Ok(v),
    }
}

/// Source coordinate and weights for one output index, corners aligned:
/// output index `i` samples source position `i (S - 1) / (T - 1)`.
fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Trilinear interpolation with aligned corners: the eight corner voxels
/// of the output coincide with those of the input. Spacing is rescaled so
/// the physical extent between corner voxel centres is preserved.
pub fn resize_trilinear(vol: &Volume, target: [usize; 3]) -> Result<Volume> {
    if vol.is_empty() {
        return Err(DataError::Empty);
    }
    if target.iter().any(|&t| t < 2) {
        return Err(DataError::Invalid(format!("resize target dims must be at least 2, got {target:?}")));
    }
    if target == vol.shape {
        return Ok(vol.clone());
    }
    let wd = axis_weights(vol.shape[0], target[0]);
    let wh = axis_weights(vol.shape[1], target[1]);
    let ww = axis_weights(vol.shape[2], target[2]);
    let mut out = Vec::with_capacity(target.iter().product());
    for &(d0, d1, fd) in &wd {
        for &(h0, h1, fh) in &wh {
            for &(w0, w1, fw) in &ww {
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let plane = |d: usize| {
                    let row = |h: usize| lerp(vol.get(d, h, w0), vol.get(d, h, w1), fw);
                    lerp(row(h0), row(h1), fh)
                };
                out.push(lerp(plane(d0), plane(d1), fd));
            }
        }
    }
    let spacing = std::array::from_fn(|a| {
        if target[a] > 1 && vol.shape[a] > 1 {
            vol.spacing[a] * (vol.shape[a] - 1) as f64 / (target[a] - 1) as f64
        } else {
            vol.spacing[a]
        }
    });
    Volume::new(target, spacing, vol.domain, out)
}
