//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward op in creation order, so reverse
//! creation order is a valid topological order for the backward sweep.
//! Dropping the graph frees every activation it retains. Parameters enter
//! as leaves that share storage with the [`ParamStore`]; gradients come back
//! keyed by [`ParamId`].
//!
//! Every op checks its output for NaN/Inf and fails with
//! [`TensorError::NonFinite`] rather than propagating it.

use std::collections::BTreeMap;

use super::conv::{self, ConvPlan, ConvSpec};
use super::norm;
use super::spectral::{self, clamp_sigma};
use super::{Buffer, ParamId, ParamStore, Result, Scalar, Tensor, TensorError};

/// Node handle inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Conv3d {
        x: usize,
        w: usize,
        b: Option<usize>,
        plan: ConvPlan,
    },
    ConvTranspose3d {
        x: usize,
        w: usize,
        b: Option<usize>,
        plan: ConvPlan,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        n: usize,
        fan_in: usize,
        fan_out: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        x_hat: Buffer<T>,
        inv_std: Vec<T>,
        dims: [usize; 3],
        batch_stats: bool,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        x_hat: Buffer<T>,
        inv_std: Vec<T>,
        dims: [usize; 3],
        groups: usize,
    },
    Relu(usize),
    LeakyRelu(usize, T),
    Tanh(usize),
    Sigmoid(usize),
    Reshape(usize),
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    AvgPool {
        x: usize,
        kernel: [usize; 3],
    },
    MeanSpatial(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Mean(usize),
    SumPerSample(usize),
    BceWithLogits(usize, T),
    Bce(usize, T),
    L1(usize, usize),
    SpectralNorm {
        w: usize,
        u: Vec<T>,
        v: Vec<T>,
        sigma: T,
        clamped: bool,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to the trainable parameters that
/// took part in the graph.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// L2 norm over the gradients of `ids` (missing entries count as zero).
    pub fn norm_of(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|id| self.grads.get(id))
            .flat_map(|t| t.data().iter().map(|v| v.as_f64() * v.as_f64()))
            .sum::<f64>()
            .sqrt()
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    updates: Vec<(ParamId, Tensor<T>)>,
    frozen: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            updates: Vec::new(),
            frozen: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Queue a persistent-state write (running statistics, power-iteration
    /// vectors) to be applied to the store by the caller.
    pub fn push_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.updates.push((id, value));
    }

    pub fn take_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.updates)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Input, false, "input")
    }

    /// While frozen, parameter leaves are constants: gradients still flow
    /// through the activations they produce but no parameter gradient is
    /// accumulated. Used to run a critic inside another network's loss.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Leaf that shares storage with the stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            needs_grad: p.trainable && !self.frozen,
        });
        Var(self.nodes.len() - 1)
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.node(v).value.clone();
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let plan = conv::plan_conv3d(&self.node(x).value, &self.node(w).value, b.map(|b| &self.node(b).value), spec)?;
        let out = conv::conv3d_forward(
            &plan,
            self.node(x).value.data(),
            self.node(w).value.data(),
            b.map(|b| self.node(b).value.data()),
        );
        let mut deps = vec![x.0, w.0];
        deps.extend(b.map(|b| b.0));
        let needs = self.needs(&deps);
        let value = Tensor::from_buffer(plan.output_shape(), out);
        self.push(
            value,
            Op::Conv3d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                plan,
            },
            needs,
            "conv3d",
        )
    }

    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let plan =
            conv::plan_conv_transpose3d(&self.node(x).value, &self.node(w).value, b.map(|b| &self.node(b).value), spec)?;
        let out = conv::conv_transpose3d_forward(
            &plan,
            self.node(x).value.data(),
            self.node(w).value.data(),
            b.map(|b| self.node(b).value.data()),
        );
        let xs = self.shape(x);
        let ws = self.shape(w);
        let n = xs[0];
        let cout = ws[1];
        let spatial = out.len() / (n * cout);
        let image = conv::conv_transpose_output_dims([xs[2], xs[3], xs[4]], [ws[2], ws[3], ws[4]], spec)?;
        debug_assert_eq!(spatial, image.iter().product::<usize>());
        let shape = vec![n, cout, image[0], image[1], image[2]];
        let mut deps = vec![x.0, w.0];
        deps.extend(b.map(|b| b.0));
        let needs = self.needs(&deps);
        self.push(
            Tensor::from_buffer(shape, out),
            Op::ConvTranspose3d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                plan,
            },
            needs,
            "conv_transpose3d",
        )
    }

    /// `x[N, in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("linear", &xs, &ws));
        }
        let (n, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(shape_err("linear", self.shape(b), &[fan_out]));
            }
        }
        let mut out = Buffer::zeros(n * fan_out);
        T::gemm(
            n,
            fan_in,
            fan_out,
            T::one(),
            self.node(x).value.data(),
            fan_in as isize,
            1,
            self.node(w).value.data(),
            1,
            fan_in as isize,
            T::zero(),
            &mut out,
            fan_out as isize,
            1,
        );
        if let Some(b) = b {
            let bias = self.node(b).value.data();
            for row in out.chunks_mut(fan_out) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut deps = vec![x.0, w.0];
        deps.extend(b.map(|b| b.0));
        let needs = self.needs(&deps);
        self.push(
            Tensor::from_buffer(vec![n, fan_out], out),
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                n,
                fan_in,
                fan_out,
            },
            needs,
            "linear",
        )
    }

    fn norm_dims(&self, x: Var, op: &'static str) -> Result<[usize; 3]> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(TensorError::InvalidShape {
                op,
                detail: format!("expected [N, C, ...], got {s:?}"),
            });
        }
        Ok([s[0], s[1], s[2..].iter().product()])
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize, op: &'static str) -> Result<()> {
        for v in [gamma, beta] {
            if self.shape(v) != [c] {
                return Err(shape_err(op, self.shape(v), &[c]));
            }
        }
        Ok(())
    }

    /// Batch normalization using batch statistics. Returns the output and the
    /// `(mean, unbiased variance)` per channel for running-stat updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let dims = self.norm_dims(x, "batch_norm3d")?;
        let [n, c, spatial] = dims;
        self.check_affine(gamma, beta, c, "batch_norm3d")?;
        if n * spatial < 2 {
            return Err(TensorError::DegenerateBatch {
                op: "batch_norm3d",
                count: n * spatial,
            });
        }
        let f = norm::batch_norm_train(
            self.node(x).value.data(),
            n,
            c,
            spatial,
            self.node(gamma).value.data(),
            self.node(beta).value.data(),
            eps,
        );
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x.0, gamma.0, beta.0]);
        let var = self.push(
            Tensor::from_buffer(shape, f.out),
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                x_hat: f.x_hat,
                inv_std: f.inv_std,
                dims,
                batch_stats: true,
            },
            needs,
            "batch_norm3d",
        )?;
        Ok((var, f.mean, f.var_unbiased))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let dims = self.norm_dims(x, "batch_norm3d")?;
        let [n, c, spatial] = dims;
        self.check_affine(gamma, beta, c, "batch_norm3d")?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batch_norm3d", &[running_mean.len(), running_var.len()], &[c, c]));
        }
        let f = norm::batch_norm_eval(
            self.node(x).value.data(),
            n,
            c,
            spatial,
            self.node(gamma).value.data(),
            self.node(beta).value.data(),
            running_mean,
            running_var,
            eps,
        );
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x.0, gamma.0, beta.0]);
        self.push(
            Tensor::from_buffer(shape, f.out),
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                x_hat: f.x_hat,
                inv_std: f.inv_std,
                dims,
                batch_stats: false,
            },
            needs,
            "batch_norm3d",
        )
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let dims = self.norm_dims(x, "group_norm")?;
        let [n, c, spatial] = dims;
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::Config(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        self.check_affine(gamma, beta, c, "group_norm")?;
        let f = norm::group_norm_forward(
            self.node(x).value.data(),
            n,
            c,
            spatial,
            groups,
            self.node(gamma).value.data(),
            self.node(beta).value.data(),
            eps,
        );
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x.0, gamma.0, beta.0]);
        self.push(
            Tensor::from_buffer(shape, f.out),
            Op::GroupNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                x_hat: f.x_hat,
                inv_std: f.inv_std,
                dims,
                groups,
            },
            needs,
            "group_norm",
        )
    }

    fn unary(&mut self, x: Var, op: Op<T>, name: &'static str, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.node(x).value.map(f);
        let needs = self.needs(&[x.0]);
        self.push(value, op, needs, name)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x.0), "relu", |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        self.unary(x, Op::LeakyRelu(x.0, slope), "leaky_relu", |v| if v > T::zero() { v } else { v * slope })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x.0), "tanh", |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x.0), "sigmoid", sigmoid)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, Op::Scale(x.0, c), "scale", |v| v * c)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.node(x).value.reshape(shape)?;
        let needs = self.needs(&[x.0]);
        self.push(value, Op::Reshape(x.0), needs, "reshape")
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Index {
                op: "narrow",
                detail: format!("range {start}..{} on axis {axis} of shape {shape:?}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.node(x).value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs = self.needs(&[x.0]);
        self.push(
            Tensor::from_buffer(out_shape, Buffer::from_vec(out)),
            Op::Narrow {
                x: x.0,
                axis,
                start,
                len,
            },
            needs,
            "narrow",
        )
    }

    /// Non-overlapping average pooling with kernel == stride.
    pub fn avg_pool3d(&mut self, x: Var, kernel: [usize; 3]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 || (0..3).any(|a| kernel[a] == 0 || s[a + 2] % kernel[a] != 0) {
            return Err(TensorError::InvalidShape {
                op: "avg_pool3d",
                detail: format!("kernel {kernel:?} does not tile shape {s:?}"),
            });
        }
        let (nc, d, h, w) = (s[0] * s[1], s[2], s[3], s[4]);
        let (od, oh, ow) = (d / kernel[0], h / kernel[1], w / kernel[2]);
        let inv = T::one() / T::from_f64((kernel[0] * kernel[1] * kernel[2]) as f64);
        let src = self.node(x).value.data();
        let mut out = Buffer::zeros(nc * od * oh * ow);
        for p in 0..nc {
            for z in 0..d {
                for y in 0..h {
                    let row = &src[((p * d + z) * h + y) * w..((p * d + z) * h + y + 1) * w];
                    let obase = ((p * od + z / kernel[0]) * oh + y / kernel[1]) * ow;
                    for (xi, &v) in row.iter().enumerate() {
                        out[obase + xi / kernel[2]] += v;
                    }
                }
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        let needs = self.needs(&[x.0]);
        self.push(
            Tensor::from_buffer(vec![s[0], s[1], od, oh, ow], out),
            Op::AvgPool { x: x.0, kernel },
            needs,
            "avg_pool3d",
        )
    }

    /// `[N, C, ...] -> [N, C]` mean over all trailing axes.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let [n, c, spatial] = self.norm_dims(x, "mean_spatial")?;
        let inv = T::one() / T::from_f64(spatial as f64);
        let out: Vec<T> = self
            .node(x)
            .value
            .data()
            .chunks(spatial)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let needs = self.needs(&[x.0]);
        self.push(
            Tensor::from_buffer(vec![n, c], Buffer::from_vec(out)),
            Op::MeanSpatial(x.0),
            needs,
            "mean_spatial",
        )
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self
            .node(a)
            .value
            .data()
            .iter()
            .zip(self.node(b).value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a.0, b.0]);
        self.push(Tensor::from_buffer(shape, Buffer::from_vec(out)), op, needs, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a.0, b.0), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a.0, b.0), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a.0, b.0), "mul", |x, y| x * y)
    }

    fn reduce(&mut self, x: Var, op: Op<T>, name: &'static str, shape: Vec<usize>, out: Vec<T>) -> Result<Var> {
        let needs = self.needs(&[x.0]);
        self.push(Tensor::from_buffer(shape, Buffer::from_vec(out)), op, needs, name)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x).value.sum();
        self.reduce(x, Op::Sum(x.0), "sum", vec![], vec![s])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x).value;
        let m = t.sum() / T::from_f64(t.numel() as f64);
        self.reduce(x, Op::Mean(x.0), "mean", vec![], vec![m])
    }

    /// `[N, ...] -> [N]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x).value;
        let n = t.shape().first().copied().unwrap_or(1);
        let per = t.numel() / n.max(1);
        let out: Vec<T> = if per == 0 {
            vec![T::zero(); n]
        } else {
            t.data().chunks(per).map(|c| c.iter().copied().sum()).collect()
        };
        self.reduce(x, Op::SumPerSample(x.0), "sum_per_sample", vec![n], out)
    }

    fn check_target(target: T, op: &'static str) -> Result<()> {
        if !(target >= T::zero() && target <= T::one()) {
            return Err(TensorError::Domain {
                op,
                detail: format!("target {target} outside [0, 1]"),
            });
        }
        Ok(())
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a constant
    /// target, in the overflow-free form `max(l,0) - l*t + ln(1 + e^-|l|)`.
    pub fn bce_with_logits(&mut self, logits: Var, target: T) -> Result<Var> {
        Self::check_target(target, "bce_with_logits")?;
        let t = &self.node(logits).value;
        let n = T::from_f64(t.numel() as f64);
        let total: T = t
            .data()
            .iter()
            .map(|&l| l.max(T::zero()) - l * target + (-l.abs()).exp().ln_1p())
            .sum();
        self.reduce(logits, Op::BceWithLogits(logits.0, target), "bce_with_logits", vec![], vec![total / n])
    }

    /// Mean binary cross-entropy on probabilities, which must lie in (0, 1).
    pub fn bce(&mut self, prob: Var, target: T) -> Result<Var> {
        Self::check_target(target, "bce")?;
        let t = &self.node(prob).value;
        if let Some(p) = t.data().iter().find(|&&p| !(p > T::zero() && p < T::one())) {
            return Err(TensorError::Domain {
                op: "bce",
                detail: format!("probability {p} outside (0, 1)"),
            });
        }
        let n = T::from_f64(t.numel() as f64);
        let total: T = t
            .data()
            .iter()
            .map(|&p| -(target * p.ln() + (T::one() - target) * (-p).ln_1p()))
            .sum();
        self.reduce(prob, Op::Bce(prob.0, target), "bce", vec![], vec![total / n])
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("l1", self.shape(a), self.shape(b)));
        }
        let ta = &self.node(a).value;
        let n = T::from_f64(ta.numel() as f64);
        let total: T = ta
            .data()
            .iter()
            .zip(self.node(b).value.data())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let needs = self.needs(&[a.0, b.0]);
        self.push(
            Tensor::from_buffer(vec![], Buffer::from_vec(vec![total / n])),
            Op::L1(a.0, b.0),
            needs,
            "l1",
        )
    }

    /// `w / sigma(w)` with `sigma` estimated by power iteration from the
    /// stored vector `u`. The advanced `u` is queued as an update when
    /// `persist` is set.
    pub fn spectral_normalize(
        &mut self,
        w: Var,
        store: &ParamStore<T>,
        u: ParamId,
        iters: usize,
        persist: bool,
    ) -> Result<Var> {
        if iters == 0 {
            return Err(TensorError::Config("spectral normalization needs at least one power iteration".into()));
        }
        let (rows, cols) = spectral::matrix_dims(self.shape(w))?;
        let u0 = store.value(u);
        if u0.numel() != rows {
            return Err(shape_err("spectral_normalize", u0.shape(), &[rows]));
        }
        let est = spectral::power_iteration(self.node(w).value.data(), rows, cols, u0.data(), iters);
        if persist {
            let u_new = Tensor::from_vec(u0.shape(), est.u.clone())?;
            self.push_update(u, u_new);
        }
        let sigma = clamp_sigma(est.sigma);
        let clamped = sigma != est.sigma;
        let value = self.node(w).value.map(|x| x / sigma);
        let needs = self.needs(&[w.0]);
        self.push(
            value,
            Op::SpectralNorm {
                w: w.0,
                u: est.u,
                v: est.v,
                sigma,
                clamped,
            },
            needs,
            "spectral_normalize",
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.node(loss).value.numel() != 1 {
            return Err(TensorError::InvalidShape {
                op: "backward",
                detail: format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Buffer<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Buffer::from_vec(vec![T::one()]));
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Buffer<T>>], idx: usize, g: Buffer<T>) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match grads[idx].as_mut() {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g.iter()) {
                    *e += *v;
                }
            }
            None => grads[idx] = Some(g),
        }
    }

    fn elementwise(&self, g: &[T], idx: usize, f: impl Fn(T, T) -> T) -> Buffer<T> {
        let x = self.nodes[idx].value.data();
        Buffer::from_vec(g.iter().zip(x).map(|(&gv, &xv)| f(gv, xv)).collect())
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: Buffer<T>,
        grads: &mut [Option<Buffer<T>>],
        out: &mut Gradients<T>,
    ) -> Result<()> {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                let shape = node.value.shape().to_vec();
                match out.grads.get_mut(id) {
                    Some(t) => {
                        for (e, v) in t.data_mut().iter_mut().zip(g.iter()) {
                            *e += *v;
                        }
                    }
                    None => {
                        out.grads.insert(*id, Tensor::from_buffer(shape, g));
                    }
                }
            }
            Op::Conv3d { x, w, b, plan } | Op::ConvTranspose3d { x, w, b, plan } => {
                let want = [
                    self.nodes[*x].needs_grad,
                    self.nodes[*w].needs_grad,
                    b.is_some_and(|b| self.nodes[b].needs_grad),
                ];
                let xv = self.nodes[*x].value.data();
                let wv = self.nodes[*w].value.data();
                let [gx, gw, gb] = if matches!(node.op, Op::Conv3d { .. }) {
                    conv::conv3d_backward(plan, xv, wv, &g, want)
                } else {
                    conv::conv_transpose3d_backward(plan, xv, wv, &g, want)
                };
                drop(g);
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Linear {
                x,
                w,
                b,
                n,
                fan_in,
                fan_out,
            } => {
                let (n, fi, fo) = (*n, *fan_in, *fan_out);
                if self.nodes[*x].needs_grad {
                    let mut gx = Buffer::zeros(n * fi);
                    let wv = self.nodes[*w].value.data();
                    T::gemm(n, fo, fi, T::one(), &g, fo as isize, 1, wv, fi as isize, 1, T::zero(), &mut gx, fi as isize, 1);
                    self.accumulate(grads, *x, gx);
                }
                if self.nodes[*w].needs_grad {
                    let mut gw = Buffer::zeros(fo * fi);
                    let xv = self.nodes[*x].value.data();
                    T::gemm(fo, n, fi, T::one(), &g, 1, fo as isize, xv, fi as isize, 1, T::zero(), &mut gw, fi as isize, 1);
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    let mut gb = Buffer::zeros(fo);
                    for row in g.chunks(fo) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                dims,
                batch_stats,
            } => {
                let [n, c, spatial] = *dims;
                let gv = self.nodes[*gamma].value.data();
                let (dx, dgamma, dbeta) = norm::batch_norm_backward(&g, x_hat, inv_std, gv, n, c, spatial, *batch_stats);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, Buffer::from_vec(dgamma));
                self.accumulate(grads, *beta, Buffer::from_vec(dbeta));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                dims,
                groups,
            } => {
                let [n, c, spatial] = *dims;
                let gv = self.nodes[*gamma].value.data();
                let (dx, dgamma, dbeta) = norm::group_norm_backward(&g, x_hat, inv_std, gv, n, c, spatial, *groups);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, Buffer::from_vec(dgamma));
                self.accumulate(grads, *beta, Buffer::from_vec(dbeta));
            }
            Op::Relu(x) => {
                let y = node.value.data();
                let gx = Buffer::from_vec(g.iter().zip(y).map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() }).collect());
                self.accumulate(grads, *x, gx);
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                let gx = self.elementwise(&g, *x, |gv, xv| if xv > T::zero() { gv } else { gv * s });
                self.accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let gx = Buffer::from_vec(g.iter().zip(y).map(|(&gv, &yv)| gv * (T::one() - yv * yv)).collect());
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let gx = Buffer::from_vec(g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect());
                self.accumulate(grads, *x, gx);
            }
            Op::Scale(x, c) => {
                let c = *c;
                let gx = Buffer::from_vec(g.iter().map(|&v| v * c).collect());
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g),
            Op::Narrow { x, axis, start, len } => {
                let shape = self.nodes[*x].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut gx = Buffer::zeros(self.nodes[*x].value.numel());
                for o in 0..outer {
                    let dst = (o * shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::AvgPool { x, kernel } => {
                let s = self.nodes[*x].value.shape();
                let (nc, d, h, w) = (s[0] * s[1], s[2], s[3], s[4]);
                let (od, oh, ow) = (d / kernel[0], h / kernel[1], w / kernel[2]);
                let inv = T::one() / T::from_f64((kernel[0] * kernel[1] * kernel[2]) as f64);
                let mut gx = Buffer::zeros(nc * d * h * w);
                for p in 0..nc {
                    for z in 0..d {
                        for y in 0..h {
                            let obase = ((p * od + z / kernel[0]) * oh + y / kernel[1]) * ow;
                            let base = ((p * d + z) * h + y) * w;
                            for xi in 0..w {
                                gx[base + xi] = g[obase + xi / kernel[2]] * inv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MeanSpatial(x) => {
                let numel = self.nodes[*x].value.numel();
                let spatial = numel / g.len();
                let inv = T::one() / T::from_f64(spatial as f64);
                let gx = Buffer::from_vec((0..numel).map(|i| g[i / spatial] * inv).collect());
                self.accumulate(grads, *x, gx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone());
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, Buffer::from_vec(g.iter().map(|&v| -v).collect()));
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let ga = self.elementwise(&g, *b, |gv, bv| gv * bv);
                let gb = self.elementwise(&g, *a, |gv, av| gv * av);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Sum(x) => {
                let n = self.nodes[*x].value.numel();
                self.accumulate(grads, *x, Buffer::from_vec(vec![g[0]; n]));
            }
            Op::Mean(x) => {
                let n = self.nodes[*x].value.numel();
                let v = g[0] / T::from_f64(n as f64);
                self.accumulate(grads, *x, Buffer::from_vec(vec![v; n]));
            }
            Op::SumPerSample(x) => {
                let numel = self.nodes[*x].value.numel();
                let per = numel / g.len().max(1);
                let gx = Buffer::from_vec((0..numel).map(|i| g[i / per]).collect());
                self.accumulate(grads, *x, gx);
            }
            Op::BceWithLogits(x, t) => {
                let t = *t;
                let n = T::from_f64(self.nodes[*x].value.numel() as f64);
                let scale = g[0] / n;
                let gx = Buffer::from_vec(
                    self.nodes[*x]
                        .value
                        .data()
                        .iter()
                        .map(|&l| (sigmoid(l) - t) * scale)
                        .collect(),
                );
                self.accumulate(grads, *x, gx);
            }
            Op::Bce(x, t) => {
                let t = *t;
                let n = T::from_f64(self.nodes[*x].value.numel() as f64);
                let scale = g[0] / n;
                let gx = Buffer::from_vec(
                    self.nodes[*x]
                        .value
                        .data()
                        .iter()
                        .map(|&p| (p - t) / (p * (T::one() - p)) * scale)
                        .collect(),
                );
                self.accumulate(grads, *x, gx);
            }
            Op::L1(a, b) => {
                let n = T::from_f64(self.nodes[*a].value.numel() as f64);
                let scale = g[0] / n;
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                let ga: Vec<T> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *b, Buffer::from_vec(ga.iter().map(|&v| -v).collect()));
                self.accumulate(grads, *a, Buffer::from_vec(ga));
            }
            Op::SpectralNorm {
                w,
                u,
                v,
                sigma,
                clamped,
            } => {
                let wv = self.nodes[*w].value.data();
                let cols = v.len();
                let s = *sigma;
                let gx: Vec<T> = if *clamped {
                    g.iter().map(|&gv| gv / s).collect()
                } else {
                    let inner: T = g.iter().zip(wv).map(|(&a, &b)| a * b).sum();
                    let k = inner / (s * s);
                    g.iter()
                        .enumerate()
                        .map(|(i, &gv)| gv / s - k * u[i / cols] * v[i % cols])
                        .collect()
                };
                self.accumulate(grads, *w, Buffer::from_vec(gx));
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
