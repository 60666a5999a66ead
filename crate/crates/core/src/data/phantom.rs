//! Deterministic chest-like phantoms: two ellipsoidal lungs in soft
//! tissue, spherical nodules inside the lungs, and Gaussian noise.
//!
//! Geometry is expressed in fractions of the cube edge, so one spec scales
//! across resolutions. Each seed jitters the lung semi-axes and places the
//! nodules, giving a varied but reproducible population.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, IntensityDomain, Result, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    pub resolution: usize,
    /// Lung semi-axes `[d, h, w]` as fractions of the edge.
    pub lung_semi_axes: [f64; 3],
    /// Lung centres sit at `0.5 -/+ lung_offset` along the w axis.
    pub lung_offset: f64,
    /// Each semi-axis is scaled by a uniform factor in `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
    pub nodules: usize,
    /// Nodule radius range as fractions of the edge.
    pub nodule_radius: [f64; 2],
    pub tissue_hu: f64,
    pub lung_hu: f64,
    pub nodule_hu: f64,
    pub noise_std: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            resolution: 32,
            lung_semi_axes: [0.32, 0.3, 0.16],
            lung_offset: 0.22,
            jitter: 0.1,
            nodules: 2,
            nodule_radius: [0.03, 0.06],
            tissue_hu: 40.0,
            lung_hu: -800.0,
            nodule_hu: 0.0,
            noise_std: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    /// Centre and semi-axes in edge fractions, `[d, h, w]`.
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2)).sum()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nodule {
    pub center: [f64; 3],
    pub radius: f64,
    pub lung: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub lungs: [Ellipsoid; 2],
    pub nodules: Vec<Nodule>,
}

/// Voxel centre of index `i` on an edge of `n` voxels, as an edge fraction.
fn coord(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

impl Phantom {
    /// Voxels inside either lung ellipsoid (nodules included).
    pub fn lung_mask(&self) -> Vec<bool> {
        let [d, h, w] = self.volume.shape;
        let mut mask = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let p = [coord(z, d), coord(y, h), coord(x, w)];
                    mask.push(self.lungs.iter().any(|l| l.contains(p)));
                }
            }
        }
        mask
    }

    pub fn lung_mean_hu(&self) -> f64 {
        let mask = self.lung_mask();
        let (sum, n) = self
            .volume
            .voxels
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        sum / n as f64
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DataError::Spec(m));
        if self.resolution < 2 {
            return err(format!("resolution must be at least 2, got {}", self.resolution));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return err(format!("jitter must be in [0, 1), got {}", self.jitter));
        }
        if self.lung_semi_axes.iter().any(|&s| !(s > 0.0)) {
            return err("lung semi-axes must be positive".into());
        }
        let grow = 1.0 + self.jitter;
        let [sd, sh, sw] = self.lung_semi_axes.map(|s| s * grow);
        if sd > 0.5 || sh > 0.5 {
            return err("lungs exceed the volume along d or h".into());
        }
        if self.lung_offset + sw > 0.5 {
            return err(format!(
                "lungs exceed the volume along w: offset {} + semi-axis {sw} > 0.5",
                self.lung_offset
            ));
        }
        if sw >= self.lung_offset {
            return err("lungs overlap: w semi-axis must be below the offset".into());
        }
        let [rmin, rmax] = self.nodule_radius;
        if self.nodules > 0 {
            if !(rmin > 0.0 && rmin <= rmax) {
                return err(format!("nodule radius range {:?} is invalid", self.nodule_radius));
            }
            let smallest = self.lung_semi_axes.iter().cloned().fold(f64::INFINITY, f64::min) * (1.0 - self.jitter);
            if rmax >= smallest {
                return err(format!("nodule radius {rmax} does not fit in a lung of semi-axis {smallest}"));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return err("noise_std must be non-negative".into());
        }
        Ok(())
    }
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let j = spec.jitter;
    let mut lung = |side: f64| {
        let semi_axes = spec.lung_semi_axes.map(|s| s * rng.random_range(1.0 - j..=1.0 + j));
        Ellipsoid {
            center: [0.5, 0.5, 0.5 + side * spec.lung_offset],
            semi_axes,
        }
    };
    let lungs = [lung(-1.0), lung(1.0)];

    let mut nodules = Vec::with_capacity(spec.nodules);
    for _ in 0..spec.nodules {
        let which = rng.random_range(0..2usize);
        let l = lungs[which];
        let radius = rng.random_range(spec.nodule_radius[0]..=spec.nodule_radius[1]);
        // Shrinking the sampling ellipsoid by the radius keeps the sphere inside.
        let shrink: [f64; 3] = l.semi_axes.map(|s| (s - radius) / s);
        let unit = loop {
            let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            if p.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                break p;
            }
        };
        let center = std::array::from_fn(|a| l.center[a] + unit[a] * l.semi_axes[a] * shrink[a]);
        nodules.push(Nodule { center, radius, lung: which });
    }

    let n = spec.resolution;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| DataError::Spec(e.to_string()))?;
    let mut voxels = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = [coord(z, n), coord(y, n), coord(x, n)];
                let in_nodule = nodules.iter().any(|nd| {
                    (0..3).map(|a| (p[a] - nd.center[a]).powi(2)).sum::<f64>() <= nd.radius * nd.radius
                });
                let base = if in_nodule {
                    spec.nodule_hu
                } else if lungs.iter().any(|l| l.contains(p)) {
                    spec.lung_hu
                } else {
                    spec.tissue_hu
                };
                voxels.push(base + noise.sample(&mut rng));
            }
        }
    }
    let spacing = [1.0; 3];
    Ok(Phantom {
        volume: Volume::new([n, n, n], spacing, IntensityDomain::Hu, voxels)?,
        lungs,
        nodules,
    })
}
