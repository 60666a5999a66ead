//! Parameterized building blocks. Each layer owns [`ParamId`]s into a shared
//! [`ParamStore`] and emits graph ops on `forward`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::conv::ConvSpec;
use super::{Graph, ParamId, ParamStore, Result, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Gaussian init with standard deviation `1/sqrt(fan_in)`.
pub fn fan_in_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64(dist.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data agree")
}

fn unit_vector<T: Scalar, R: Rng + ?Sized>(len: usize, rng: &mut R) -> Tensor<T> {
    let raw: Vec<f64> = (0..len).map(|_| rand_distr::StandardNormal.sample(rng)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    Tensor::from_vec(&[len], raw.iter().map(|v| T::from_f64(v / norm)).collect()).expect("1-D")
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_trainable(
            &format!("{name}.weight"),
            fan_in_normal(&[out_features, in_features], in_features, rng),
        )?;
        let bias = if bias {
            Some(store.add_trainable(&format!("{name}.bias"), Tensor::zeros(&[out_features]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub kernel: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        spec: ConvSpec,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel.iter().product::<usize>();
        let weight = store.add_trainable(
            &format!("{name}.weight"),
            fan_in_normal(&[out_channels, in_channels, kernel[0], kernel[1], kernel[2]], fan_in, rng),
        )?;
        let bias = if bias {
            Some(store.add_trainable(&format!("{name}.bias"), Tensor::zeros(&[out_channels]))?)
        } else {
            None
        };
        Ok(Conv3d {
            weight,
            bias,
            spec,
            kernel,
            in_channels,
            out_channels,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv3d(x, w, b, self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub kernel: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvTranspose3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        spec: ConvSpec,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel.iter().product::<usize>();
        let weight = store.add_trainable(
            &format!("{name}.weight"),
            fan_in_normal(&[in_channels, out_channels, kernel[0], kernel[1], kernel[2]], fan_in, rng),
        )?;
        let bias = if bias {
            Some(store.add_trainable(&format!("{name}.bias"), Tensor::zeros(&[out_channels]))?)
        } else {
            None
        };
        Ok(ConvTranspose3d {
            weight,
            bias,
            spec,
            kernel,
            in_channels,
            out_channels,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv_transpose3d(x, w, b, self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add_trainable(&format!("{name}.gamma"), Tensor::full(&[channels], T::one()))?,
            beta: store.add_trainable(&format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: store.add_state(&format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_state(&format!("{name}.running_var"), Tensor::full(&[channels], T::one()))?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// Train mode normalizes with batch statistics and queues running-stat
    /// updates on the graph; eval mode uses the stored running statistics.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let eps = T::from_f64(self.eps);
        match mode {
            Mode::Train => {
                let (y, mean, var) = g.batch_norm_train(x, gamma, beta, eps)?;
                let mom = T::from_f64(self.momentum);
                let keep = T::one() - mom;
                let rm: Vec<T> = store
                    .value(self.running_mean)
                    .data()
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &m)| keep * r + mom * m)
                    .collect();
                let rv: Vec<T> = store
                    .value(self.running_var)
                    .data()
                    .iter()
                    .zip(&var)
                    .map(|(&r, &v)| keep * r + mom * v)
                    .collect();
                let c = rm.len();
                g.push_update(self.running_mean, Tensor::from_vec(&[c], rm)?);
                g.push_update(self.running_var, Tensor::from_vec(&[c], rv)?);
                Ok(y)
            }
            Mode::Eval => {
                let rm = store.value(self.running_mean).clone();
                let rv = store.value(self.running_var).clone();
                g.batch_norm_eval(x, gamma, beta, rm.data(), rv.data(), eps)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(TensorError::Config(format!(
                "{name}: {channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(GroupNorm {
            gamma: store.add_trainable(&format!("{name}.gamma"), Tensor::full(&[channels], T::one()))?,
            beta: store.add_trainable(&format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, self.groups, gamma, beta, T::from_f64(self.eps))
    }
}

/// Spectral-normalized weight shared by conv and linear layers.
#[derive(Debug, Clone)]
pub struct SpectralWeight {
    pub weight: ParamId,
    pub u: ParamId,
    pub iters: usize,
}

impl SpectralWeight {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        weight: ParamId,
        iters: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let rows = store.value(weight).shape()[0];
        let u = store.add_state(&format!("{name}.weight_u"), unit_vector(rows, rng))?;
        Ok(SpectralWeight { weight, u, iters })
    }

    /// The normalized weight. Only train mode advances the stored vector.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mode: Mode) -> Result<Var> {
        let w = g.param(store, self.weight);
        g.spectral_normalize(w, store, self.u, self.iters, mode == Mode::Train)
    }
}

#[derive(Debug, Clone)]
pub struct SpectralConv3d {
    pub conv: Conv3d,
    pub sn: SpectralWeight,
}

impl SpectralConv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        spec: ConvSpec,
        iters: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = Conv3d::new(store, name, in_channels, out_channels, kernel, spec, true, rng)?;
        let sn = SpectralWeight::new(store, name, conv.weight, iters, rng)?;
        Ok(SpectralConv3d { conv, sn })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let w = self.sn.forward(g, store, mode)?;
        let b = self.conv.bias.map(|b| g.param(store, b));
        g.conv3d(x, w, b, self.conv.spec)
    }
}

#[derive(Debug, Clone)]
pub struct SpectralLinear {
    pub linear: Linear,
    pub sn: SpectralWeight,
}

impl SpectralLinear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        iters: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let linear = Linear::new(store, name, in_features, out_features, true, rng)?;
        let sn = SpectralWeight::new(store, name, linear.weight, iters, rng)?;
        Ok(SpectralLinear { linear, sn })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let w = self.sn.forward(g, store, mode)?;
        let b = self.linear.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_parameter_count() {
        let mut ps = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Linear::new(&mut ps, "fc", 4, 3, true, &mut rng).unwrap();
        assert_eq!(ps.count_trainable(""), 15);
    }

    #[test]
    fn group_norm_requires_divisible_channels() {
        let mut ps = ParamStore::<f32>::new();
        assert!(matches!(GroupNorm::new(&mut ps, "gn", 6, 4), Err(TensorError::Config(_))));
    }

    #[test]
    fn batch_norm_eval_with_unit_stats_is_identity() {
        let mut ps = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut ps, "bn", 2).unwrap();
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.37 - 2.0).collect();
        let x = g.input(Tensor::from_vec(&[1, 2, 2, 2, 2], data.clone()).unwrap()).unwrap();
        let y = bn.forward(&mut g, &ps, x, Mode::Eval).unwrap();
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, b) in g.value(y).data().iter().zip(&data) {
            assert!((a - b * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_train_queues_running_stats() {
        let mut ps = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut ps, "bn", 1).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[2, 1, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap()).unwrap();
        bn.forward(&mut g, &ps, x, Mode::Train).unwrap();
        ps.apply_updates(g.take_updates()).unwrap();
        // mean 4, unbiased var 20/3
        assert!((ps.value(bn.running_mean).item() - 0.4).abs() < 1e-12);
        assert!((ps.value(bn.running_var).item() - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }
}
