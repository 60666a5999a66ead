//! Distribution distances between sets of volumes: Fréchet distance of
//! Gaussian feature fits and kernel maximum mean discrepancy.

pub mod evaluate;
pub mod extract;
pub mod mmd;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::tensor::TensorError;

pub use evaluate::{evaluate_models, volumes_sha256, EvaluationReport, ExtractorInfo, ModelScore, NamedSet};
pub use extract::{extract_features, EncoderExtractor, FeatureExtractor, IntensityExtractor};
pub use mmd::{median_bandwidth, mmd2, Bandwidth, Estimator, KernelSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("insufficient samples: need at least {need}, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("numerical error: {detail} (residual {residual:.3e})")]
    Numerical { detail: String, residual: f64 },
    #[error("kernel bandwidth must be positive, got {0}")]
    InvalidBandwidth(f64),
    #[error("non-finite feature value")]
    NonFinite,
    #[error("extractor: {0}")]
    Extractor(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Gaussian fit of a feature sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Mean and unbiased covariance (divisor `n - 1`) of the rows of
/// `features` ([n, F]). The covariance is symmetrized as `(S + S^T) / 2`.
pub fn fit_stats(features: &DMatrix<f64>) -> Result<FeatureStats> {
    let n = features.nrows();
    if n < 2 {
        return Err(MetricsError::InsufficientSamples { need: 2, got: n });
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let mu: DVector<f64> = features.row_mean().transpose();
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let s = centered.transpose() * &centered / (n - 1) as f64;
    let sigma = (&s + s.transpose()) * 0.5;
    Ok(FeatureStats { mu, sigma, n })
}

/// Matrix square-root routes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqrtMethod {
    Eigen,
    NewtonSchulz,
}

/// Relative size below which negative eigenvalues count as round-off.
const NEG_EIG_TOL: f64 = 1e-6;

/// Eigenvalues of a symmetric matrix with round-off negatives clamped to 0.
/// Negatives larger than `1e-6 * max|lambda|` are an error.
fn clamped_eigen(a: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(a.clone());
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -NEG_EIG_TOL * scale {
                return Err(MetricsError::Numerical {
                    detail: format!("matrix is not positive semidefinite (eigenvalue {v:.3e})"),
                    residual: -*v / scale.max(f64::MIN_POSITIVE),
                });
            }
            *v = 0.0;
        }
    }
    Ok(eig)
}

fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Principal square root of a symmetric PSD matrix by eigendecomposition.
pub fn sqrtm_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = clamped_eigen(&symmetrize(a))?;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(symmetrize(&(&eig.eigenvectors * d * eig.eigenvectors.transpose())))
}

/// Coupled Newton-Schulz iteration for the square root of a PSD matrix,
/// run on `A / ||A||_F`. Errors if the relative residual `||Y^2 - A|| /
/// ||A||` is above `tol` after `max_iter` iterations.
pub fn sqrtm_newton_schulz(a: &DMatrix<f64>, max_iter: usize, tol: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(MetricsError::DimensionMismatch(a.nrows(), a.ncols()));
    }
    let norm = a.norm();
    if norm == 0.0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let mut y = a / norm;
    let mut z = eye.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let t = (&eye * 3.0 - &z * &y) * 0.5;
        y = &y * &t;
        z = &t * &z;
        let root = &y * norm.sqrt();
        residual = (&root * &root - a).norm() / norm;
        if residual <= tol {
            return Ok(root);
        }
        if !residual.is_finite() {
            break;
        }
    }
    Err(MetricsError::Numerical {
        detail: format!("Newton-Schulz square root did not converge in {max_iter} iterations"),
        residual,
    })
}

/// `||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
pub fn fid(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    fid_with(a, b, SqrtMethod::Eigen)
}

/// FID with an explicit square-root route. `Tr((S_a S_b)^(1/2))` is taken
/// as `Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2))`, which has the same eigenvalues
/// and is symmetric PSD.
pub fn fid_with(a: &FeatureStats, b: &FeatureStats, method: SqrtMethod) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(MetricsError::DimensionMismatch(a.dim(), b.dim()));
    }
    let mean_term = (&a.mu - &b.mu).norm_squared();
    let sa = sqrtm_psd(&a.sigma)?;
    let m = symmetrize(&(&sa * &b.sigma * &sa));
    let tr_sqrt = match method {
        SqrtMethod::Eigen => clamped_eigen(&m)?.eigenvalues.iter().map(|v| v.sqrt()).sum::<f64>(),
        SqrtMethod::NewtonSchulz => sqrtm_newton_schulz(&m, 200, 1e-12)?.trace(),
    };
    let value = mean_term + a.sigma.trace() + b.sigma.trace() - 2.0 * tr_sqrt;
    let scale = mean_term + a.sigma.trace() + b.sigma.trace();
    if value < 0.0 {
        if value < -NEG_EIG_TOL * scale.max(1.0) {
            return Err(MetricsError::Numerical {
                detail: "negative Fréchet distance".into(),
                residual: -value,
            });
        }
        return Ok(0.0);
    }
    Ok(value)
}
