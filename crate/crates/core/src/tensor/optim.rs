use thiserror::Error;

use super::{Gradients, ParamId, ParamStore, Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
    #[error("non-finite gradient for {name}: {bad} of {total} entries (first at index {first})")]
    NonFiniteGradient {
        name: String,
        bad: usize,
        total: usize,
        first: usize,
    },
    #[error("gradient shape {grad:?} does not match parameter {name} of shape {param:?}")]
    ShapeMismatch {
        name: String,
        grad: Vec<usize>,
        param: Vec<usize>,
    },
}

/// Adam with bias correction over a fixed group of parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub params: Vec<ParamId>,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, params: Vec<ParamId>, lr: f64) -> Result<Self, OptimError> {
        if !(lr > 0.0) {
            return Err(OptimError::InvalidLearningRate(lr));
        }
        let zeros = |id: &ParamId| Tensor::zeros(store.value(*id).shape());
        Ok(AdamState {
            first_moment: params.iter().map(zeros).collect(),
            second_moment: params.iter().map(zeros).collect(),
            params,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    /// Apply one update. Parameters without a gradient are left untouched.
    /// The whole update is rejected before any write if a gradient is
    /// non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<(), OptimError> {
        for &id in &self.params {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get(id);
            if g.shape() != p.value.shape() {
                return Err(OptimError::ShapeMismatch {
                    name: p.name.clone(),
                    grad: g.shape().to_vec(),
                    param: p.value.shape().to_vec(),
                });
            }
            let bad: Vec<usize> = g
                .data()
                .iter()
                .enumerate()
                .filter(|(_, v)| !v.is_finite())
                .map(|(i, _)| i)
                .collect();
            if !bad.is_empty() {
                return Err(OptimError::NonFiniteGradient {
                    name: p.name.clone(),
                    bad: bad.len(),
                    total: g.numel(),
                    first: bad[0],
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        for (k, &id) in self.params.iter().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let m = self.first_moment[k].data_mut();
            let v = self.second_moment[k].data_mut();
            let p = store.value_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
