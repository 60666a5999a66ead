//! Volume store and 2D slice rendering to 8-bit grayscale PNG.

use std::collections::BTreeMap;
use std::path::Path;

use crfgan_core::data::{hu_to_normalized, read_metaimage, IntensityDomain, PreprocessConfig, Volume};

use crate::definition::{Plane, View};
use crate::error::{Result, StudyError};

/// Named volumes that study pairs refer to.
#[derive(Debug, Default, Clone)]
pub struct ImageLibrary {
    volumes: BTreeMap<String, Volume>,
}

impl ImageLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, volume: Volume) {
        self.volumes.insert(id.into(), volume);
    }

    pub fn get(&self, id: &str) -> Option<&Volume> {
        self.volumes.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.volumes.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    /// Loads every `*.mhd` file of `dir`, keyed by file stem.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|source| StudyError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut paths = Vec::new();
        for entry in entries {
            let path = entry
                .map_err(|source| StudyError::Io {
                    path: dir.to_path_buf(),
                    source,
                })?
                .path();
            if path.extension().is_some_and(|e| e == "mhd") {
                paths.push(path);
            }
        }
        paths.sort();
        let mut lib = ImageLibrary::new();
        for path in paths {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| StudyError::Library(format!("non-UTF-8 file name {}", path.display())))?
                .to_string();
            let vol = read_metaimage(&path).map_err(|e| StudyError::Library(e.to_string()))?;
            lib.insert(id, vol);
        }
        Ok(lib)
    }
}

/// Number of slices of `shape` along the axis `plane` cuts.
pub fn plane_extent(shape: [usize; 3], plane: Plane) -> usize {
    match plane {
        Plane::Axial => shape[0],
        Plane::Coronal => shape[1],
        Plane::Sagittal => shape[2],
    }
}

/// Row-major slice values and `(rows, cols)`. Axial slices are `(y, x)`,
/// coronal `(z, x)` and sagittal `(z, y)`.
pub fn extract_slice(vol: &Volume, view: View) -> Result<(Vec<f64>, usize, usize)> {
    let [d, h, w] = vol.shape;
    let extent = plane_extent(vol.shape, view.plane);
    if view.slice >= extent {
        return Err(StudyError::Validation(format!(
            "slice {} out of range for {:?} extent {extent}",
            view.slice, view.plane
        )));
    }
    let s = view.slice;
    let (rows, cols) = match view.plane {
        Plane::Axial => (h, w),
        Plane::Coronal => (d, w),
        Plane::Sagittal => (d, h),
    };
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(match view.plane {
                Plane::Axial => vol.get(s, r, c),
                Plane::Coronal => vol.get(r, s, c),
                Plane::Sagittal => vol.get(r, c, s),
            });
        }
    }
    Ok((out, rows, cols))
}

/// A slice is blank when all its voxels are equal.
pub fn is_blank(vol: &Volume, view: View) -> Result<bool> {
    let (v, _, _) = extract_slice(vol, view)?;
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    Ok(hi - lo <= 1e-12)
}

/// Gray level of a voxel: [-1, 1] maps linearly onto 0..=255. HU volumes
/// are windowed with the default preprocessing window first.
fn gray(v: f64, domain: IntensityDomain) -> u8 {
    let n = match domain {
        IntensityDomain::Normalized => v,
        IntensityDomain::Hu => hu_to_normalized(v, PreprocessConfig::default().window),
    };
    ((n.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// PNG (8-bit grayscale, no ancillary chunks) of one slice.
pub fn render_png(vol: &Volume, view: View) -> Result<Vec<u8>> {
    let (values, rows, cols) = extract_slice(vol, view)?;
    let pixels: Vec<u8> = values.iter().map(|&v| gray(v, vol.domain)).collect();
    let mut buf = Vec::new();
    let mut enc = png::Encoder::new(&mut buf, cols as u32, rows as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| StudyError::Image(e.to_string()))?;
    writer
        .write_image_data(&pixels)
        .map_err(|e| StudyError::Image(e.to_string()))?;
    writer.finish().map_err(|e| StudyError::Image(e.to_string()))?;
    Ok(buf)
}
