//! Spectral normalization by power iteration.
//!
//! A weight of shape `[out, ...]` is viewed as an `out x fan_in` matrix and
//! divided by the power-iteration estimate of its largest singular value.
//! The left singular vector estimate `u` persists across calls. When the
//! estimate falls below [`SIGMA_FLOOR`] (e.g. an all-zero weight) the divisor
//! is clamped to the floor, so a zero matrix comes back unchanged.

use super::{Result, Scalar, Tensor, TensorError};

pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct PowerEstimate<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
    pub sigma: T,
}

fn normalized<T: Scalar>(x: Vec<T>) -> Option<Vec<T>> {
    let norm = x.iter().map(|&a| a * a).sum::<T>().sqrt();
    if norm.as_f64() < SIGMA_FLOOR {
        None
    } else {
        Some(x.into_iter().map(|a| a / norm).collect())
    }
}

pub(crate) fn matrix_dims(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() < 2 || shape[0] == 0 {
        return Err(TensorError::InvalidShape {
            op: "spectral_normalize",
            detail: format!("weight must have rank >= 2, got {shape:?}"),
        });
    }
    Ok((shape[0], shape[1..].iter().product()))
}

/// Run `iters` rounds of power iteration on the `rows x cols` matrix `w`
/// starting from `u0`. A vector that collapses to zero keeps its previous
/// value so the state never degenerates permanently.
pub fn power_iteration<T: Scalar>(w: &[T], rows: usize, cols: usize, u0: &[T], iters: usize) -> PowerEstimate<T> {
    let mut u = u0.to_vec();
    let mut v = vec![T::zero(); cols];
    for _ in 0..iters {
        let mut wt_u = vec![T::zero(); cols];
        for r in 0..rows {
            let ur = u[r];
            for (acc, &wv) in wt_u.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *acc += wv * ur;
            }
        }
        if let Some(nv) = normalized(wt_u) {
            v = nv;
        }
        let wv: Vec<T> = (0..rows)
            .map(|r| w[r * cols..(r + 1) * cols].iter().zip(&v).map(|(&a, &b)| a * b).sum())
            .collect();
        if let Some(nu) = normalized(wv) {
            u = nu;
        }
    }
    let sigma = (0..rows)
        .map(|r| u[r] * w[r * cols..(r + 1) * cols].iter().zip(&v).map(|(&a, &b)| a * b).sum::<T>())
        .sum::<T>();
    PowerEstimate { u, v, sigma }
}

pub(crate) fn clamp_sigma<T: Scalar>(sigma: T) -> T {
    let floor = T::from_f64(SIGMA_FLOOR);
    if sigma < floor {
        floor
    } else {
        sigma
    }
}

/// Functional form: returns `weight / sigma` and advances `u` in place.
pub fn spectral_normalize<T: Scalar>(weight: &Tensor<T>, power_iters: usize, u: &mut Tensor<T>) -> Result<Tensor<T>> {
    if power_iters == 0 {
        return Err(TensorError::Config("spectral normalization needs at least one power iteration".into()));
    }
    let (rows, cols) = matrix_dims(weight.shape())?;
    if u.numel() != rows {
        return Err(TensorError::ShapeMismatch {
            op: "spectral_normalize",
            lhs: u.shape().to_vec(),
            rhs: vec![rows],
        });
    }
    let est = power_iteration(weight.data(), rows, cols, u.data(), power_iters);
    u.data_mut().copy_from_slice(&est.u);
    let sigma = clamp_sigma(est.sigma);
    Ok(weight.map(|x| x / sigma))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_scales_to_unit_norm() {
        let w = Tensor::<f64>::from_vec(&[2, 2], vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let mut u = Tensor::from_vec(&[2], vec![0.6, 0.8]).unwrap();
        let out = spectral_normalize(&w, 50, &mut u).unwrap();
        let expect = [1.0, 0.0, 0.0, 0.5];
        for (a, b) in out.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_matrix_is_returned_unchanged() {
        let w = Tensor::<f32>::zeros(&[3, 4]);
        let mut u = Tensor::from_vec(&[3], vec![1.0, 0.0, 0.0]).unwrap();
        let out = spectral_normalize(&w, 3, &mut u).unwrap();
        assert_eq!(out, w);
        // state kept rather than collapsing to zero
        assert_eq!(u.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_iterations_rejected() {
        let w = Tensor::<f32>::zeros(&[2, 2]);
        let mut u = Tensor::zeros(&[2]);
        assert!(spectral_normalize(&w, 0, &mut u).is_err());
    }
}
