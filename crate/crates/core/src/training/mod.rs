//! Adversarial training with sub-volume decoding.
//!
//! One step samples a slab index `r` and a latent batch, decodes only the
//! embedding slab `[r, r + s_e)` through G2, and then updates, in order:
//! D on real/fake voxel slabs, the critic (CRF on real-vs-generated
//! embedding slabs, or the low-resolution discriminator for the baseline),
//! G1+G2 against both critics, and hE on the L1 reconstruction of the real
//! slab through G2. Each phase is public so isolation can be tested.

pub mod checkpoint;
pub mod measure;

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Critic, ModelBundle, Network, Variant};
use crate::tensor::layers::Mode;
use crate::tensor::optim::OptimError;
use crate::tensor::{AdamState, Gradients, Graph, ParamId, Precision, Scalar, Tensor, TensorError, Var};

/// Missing TOML keys take their `Default` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_crf: f64,
    pub lr_he: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Train G on `-log D(G(z))` instead of minimizing `log(1 - D(G(z)))`.
    pub non_saturating: bool,
    /// Adam `[beta1, beta2]` shared by all four optimizers.
    pub adam_betas: [f64; 2],
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_g: 1e-4,
            lr_d: 4e-4,
            lr_crf: 1e-4,
            lr_he: 1e-4,
            batch_size: 2,
            steps: 1000,
            seed: 0,
            non_saturating: false,
            adam_betas: [0.9, 0.999],
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, lr) in [
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
            ("lr_crf", self.lr_crf),
            ("lr_he", self.lr_he),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !self.adam_betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(TrainError::Config(format!("adam_betas must lie in [0, 1), got {:?}", self.adam_betas)));
        }
        Ok(())
    }
}

/// Loss values of one step. `l_gan` is D's objective, `l_crf` the
/// critic's, `l_reconstruction` hE's L1; `g_adversarial` is what G
/// minimized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub r: usize,
    pub l_gan: f64,
    pub l_crf: f64,
    pub l_reconstruction: f64,
    pub l_total: f64,
    pub d_real: f64,
    pub d_fake: f64,
    pub critic_real: f64,
    pub critic_fake: f64,
    pub g_adversarial: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Discriminator,
    Critic,
    Generator,
    Encoder,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Discriminator => "discriminator",
            Phase::Critic => "critic",
            Phase::Generator => "generator",
            Phase::Encoder => "encoder",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepCause {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// A failed step with the gradient norms gathered by the phases that ran.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFailure {
    pub step: u64,
    pub phase: Phase,
    pub cause: StepCause,
    pub grad_norms: BTreeMap<String, f64>,
}

impl fmt::Display for StepFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {} aborted in {} phase: {}", self.step, self.phase, self.cause)?;
        if !self.grad_norms.is_empty() {
            let norms: Vec<String> = self.grad_norms.iter().map(|(k, v)| format!("{k}={v:.6e}")).collect();
            write!(f, "; grad norms: {}", norms.join(", "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0}")]
    Step(Box<StepFailure>),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Supplies real volumes [N, 1, R, R, R] normalized to [-1, 1].
pub trait BatchSource<T> {
    fn batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<T>, TensorError>;
}

/// Samples volumes uniformly with replacement from a fixed pool.
pub struct VolumePool<T> {
    volumes: Vec<Tensor<T>>,
}

impl<T: Scalar> VolumePool<T> {
    /// Each volume has shape [R, R, R] or [1, 1, R, R, R].
    pub fn new(volumes: Vec<Tensor<T>>) -> Result<Self, TensorError> {
        let first = volumes.first().ok_or_else(|| TensorError::Config("empty volume pool".into()))?;
        let edge = *first.shape().last().unwrap_or(&0);
        let volumes: Vec<Tensor<T>> = volumes
            .into_iter()
            .map(|v| v.reshape(&[1, 1, edge, edge, edge]))
            .collect::<Result<_, _>>()?;
        Ok(VolumePool { volumes })
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }
}

impl<T: Scalar> BatchSource<T> for VolumePool<T> {
    fn batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<T>, TensorError> {
        let shape = self.volumes[0].shape().to_vec();
        let per = self.volumes[0].numel();
        let mut data = Vec::with_capacity(n * per);
        for _ in 0..n {
            let i = rng.random_range(0..self.volumes.len());
            data.extend_from_slice(self.volumes[i].data());
        }
        Tensor::from_vec(&[n, 1, shape[2], shape[3], shape[4]], data)
    }
}

/// Forward state shared by the phases of one step. The generator graph is
/// built once and extended by the generator phase.
pub struct StepContext<T> {
    pub r: usize,
    graph: Graph<T>,
    slab_emb: Var,
    fake: Var,
    low_fake: Option<Var>,
    pub real_full: Tensor<T>,
    pub real_slab: Tensor<T>,
    grad_norms: BTreeMap<String, f64>,
}

impl<T: Scalar> StepContext<T> {
    pub fn fake(&self) -> &Tensor<T> {
        self.graph.value(self.fake)
    }

    pub fn fake_embedding_slab(&self) -> &Tensor<T> {
        self.graph.value(self.slab_emb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseLoss {
    pub total: f64,
    pub real: f64,
    pub fake: f64,
}

pub struct Optimizers<T> {
    pub g: AdamState<T>,
    pub d: AdamState<T>,
    pub critic: AdamState<T>,
    pub he: AdamState<T>,
}

impl<T: Scalar> Optimizers<T> {
    pub fn iter(&self) -> [(&'static str, &AdamState<T>); 4] {
        [("G", &self.g), ("D", &self.d), ("critic", &self.critic), ("hE", &self.he)]
    }

    pub fn iter_mut(&mut self) -> [(&'static str, &mut AdamState<T>); 4] {
        [
            ("G", &mut self.g),
            ("D", &mut self.d),
            ("critic", &mut self.critic),
            ("hE", &mut self.he),
        ]
    }
}

pub struct Trainer<T> {
    pub bundle: ModelBundle<T>,
    pub config: TrainConfig,
    pub optimizers: Optimizers<T>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub history: Vec<LossBreakdown>,
}

/// Uniform slab start index in `0..positions`.
pub fn sample_slab_index<R: Rng + ?Sized>(rng: &mut R, positions: usize) -> usize {
    rng.random_range(0..positions)
}

fn slab_of<T: Scalar>(real: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>, TensorError> {
    let mut g = Graph::new();
    let v = g.input(real.clone())?;
    let s = g.narrow(v, 2, start, len)?;
    Ok(g.value(s).clone())
}

impl<T: Scalar> Trainer<T> {
    pub fn new(bundle: ModelBundle<T>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if config.precision != T::PRECISION {
            return Err(TrainError::Config(format!(
                "config precision {} does not match trainer precision {}",
                config.precision,
                T::PRECISION
            )));
        }
        let store = &bundle.store;
        let ids = |nets: &[Network]| -> Vec<ParamId> {
            nets.iter().flat_map(|n| store.trainable_ids_with_prefix(n.prefix())).collect()
        };
        let (g_nets, critic_nets, critic_lr): (Vec<Network>, Vec<Network>, f64) = match bundle.variant {
            Variant::CrfGan => (vec![Network::G1, Network::G2], vec![Network::Crf], config.lr_crf),
            Variant::HaGanLite => (
                vec![Network::G1, Network::G2, Network::GLow],
                vec![Network::DLow],
                config.lr_d,
            ),
        };
        let mut optimizers = Optimizers {
            g: AdamState::new(store, ids(&g_nets), config.lr_g)?,
            d: AdamState::new(store, ids(&[Network::D]), config.lr_d)?,
            critic: AdamState::new(store, ids(&critic_nets), critic_lr)?,
            he: AdamState::new(store, ids(&[Network::He]), config.lr_he)?,
        };
        for (_, opt) in optimizers.iter_mut() {
            [opt.beta1, opt.beta2] = config.adam_betas;
        }
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            bundle,
            config,
            optimizers,
            step: 0,
            history: Vec::new(),
        })
    }

    fn fail(&self, phase: Phase, grad_norms: &BTreeMap<String, f64>, cause: impl Into<StepCause>) -> TrainError {
        TrainError::Step(Box::new(StepFailure {
            step: self.step,
            phase,
            cause: cause.into(),
            grad_norms: grad_norms.clone(),
        }))
    }

    fn record_norms(&self, ctx: &mut StepContext<T>, grads: &Gradients<T>, nets: &[Network]) {
        for n in nets {
            let ids = self.bundle.store.trainable_ids_with_prefix(n.prefix());
            ctx.grad_norms.insert(n.label().to_string(), grads.norm_of(&ids));
        }
    }

    fn critic_networks(&self) -> Vec<Network> {
        match self.bundle.variant {
            Variant::CrfGan => vec![Network::Crf],
            Variant::HaGanLite => vec![Network::DLow],
        }
    }

    /// Sample `r` and `z`, run G1 on the full latent batch and G2 on the
    /// embedding slab `[r, r + s_e)`.
    pub fn begin_step(&mut self, real: &Tensor<T>) -> Result<StepContext<T>, TrainError> {
        let cfg = &self.bundle.config;
        let r_edge = cfg.resolution;
        if real.shape().len() != 5 || real.shape()[1..] != [1, r_edge, r_edge, r_edge] {
            return Err(TrainError::Tensor(TensorError::ShapeMismatch {
                op: "train_step",
                lhs: real.shape().to_vec(),
                rhs: vec![real.shape().first().copied().unwrap_or(0), 1, r_edge, r_edge, r_edge],
            }));
        }
        let n = real.shape()[0];
        let se = cfg.slab_extent();
        let r = sample_slab_index(&mut self.rng, cfg.slab_positions());
        let z = self.bundle.sample_latent(n, &mut self.rng);
        let up = self.bundle.g2.upsample();
        let real_slab = slab_of(real, r * up, se * up)?;

        let b = &self.bundle;
        let build = |g: &mut Graph<T>| -> Result<(Var, Var, Option<Var>), TensorError> {
            let zv = g.input(z)?;
            let emb = b.g1.forward(g, &b.store, zv, Mode::Train)?;
            let slab_emb = if se == cfg.embedding_size() { emb } else { g.narrow(emb, 2, r, se)? };
            let fake = b.g2.forward(g, &b.store, slab_emb, Mode::Train)?;
            let low_fake = match &b.critic {
                Critic::LowRes { generator, .. } => Some(generator.forward(g, &b.store, emb)?),
                Critic::Crf(_) => None,
            };
            Ok((slab_emb, fake, low_fake))
        };
        let mut graph = Graph::new();
        let (slab_emb, fake, low_fake) = build(&mut graph).map_err(|e| self.fail(Phase::Generator, &BTreeMap::new(), e))?;
        let updates = graph.take_updates();
        self.bundle.store.apply_updates(updates)?;
        Ok(StepContext {
            r,
            graph,
            slab_emb,
            fake,
            low_fake,
            real_full: real.clone(),
            real_slab,
            grad_norms: BTreeMap::new(),
        })
    }

    /// D on the real slab (target 1) and the detached generated slab (target 0).
    pub fn update_discriminator(&mut self, ctx: &mut StepContext<T>) -> Result<PhaseLoss, TrainError> {
        let phase = Phase::Discriminator;
        let b = &self.bundle;
        let fake = ctx.graph.value(ctx.fake).clone();
        let run = || -> Result<(PhaseLoss, Gradients<T>, Vec<_>), TensorError> {
            let mut g = Graph::new();
            let real = g.input(ctx.real_slab.clone())?;
            let fake = g.input(fake)?;
            let lr = b.d.forward(&mut g, &b.store, real, Mode::Train)?;
            let lf = b.d.forward(&mut g, &b.store, fake, Mode::Train)?;
            let real_loss = g.bce_with_logits(lr, T::one())?;
            let fake_loss = g.bce_with_logits(lf, T::zero())?;
            let total = g.add(real_loss, fake_loss)?;
            let grads = g.backward(total)?;
            let loss = PhaseLoss {
                total: g.value(total).item().as_f64(),
                real: g.value(real_loss).item().as_f64(),
                fake: g.value(fake_loss).item().as_f64(),
            };
            Ok((loss, grads, g.take_updates()))
        };
        let (loss, grads, updates) = run().map_err(|e| self.fail(phase, &ctx.grad_norms, e))?;
        self.record_norms(ctx, &grads, &[Network::D]);
        self.optimizers
            .d
            .step(&mut self.bundle.store, &grads)
            .map_err(|e| self.fail(phase, &ctx.grad_norms, e))?;
        self.bundle.store.apply_updates(updates)?;
        Ok(loss)
    }

    /// CRF: hE(real slab) is the real embedding, the G1 slab the fake one.
    /// Baseline: the low-resolution discriminator on the 4x-pooled real
    /// volume versus G_low's output.
    pub fn update_critic(&mut self, ctx: &mut StepContext<T>) -> Result<PhaseLoss, TrainError> {
        let phase = Phase::Critic;
        let b = &self.bundle;
        let up = b.g2.upsample();
        let run = || -> Result<(PhaseLoss, Gradients<T>, Vec<_>), TensorError> {
            let mut g = Graph::new();
            let (lr, lf) = match &b.critic {
                Critic::Crf(crf) => {
                    let x = g.input(ctx.real_slab.clone())?;
                    g.set_frozen(true);
                    let e = b.he.forward(&mut g, &b.store, x)?;
                    g.set_frozen(false);
                    let real_emb = g.detach(e);
                    let fake_emb = g.input(ctx.graph.value(ctx.slab_emb).clone())?;
                    (crf.logit(&mut g, &b.store, real_emb)?, crf.logit(&mut g, &b.store, fake_emb)?)
                }
                Critic::LowRes { discriminator, .. } => {
                    let low_fake = ctx.low_fake.expect("baseline builds a low-resolution output");
                    let x = g.input(ctx.real_full.clone())?;
                    let real_low = g.avg_pool3d(x, [up; 3])?;
                    let real_low = g.detach(real_low);
                    let fake_low = g.input(ctx.graph.value(low_fake).clone())?;
                    (
                        discriminator.forward(&mut g, &b.store, real_low, Mode::Train)?,
                        discriminator.forward(&mut g, &b.store, fake_low, Mode::Train)?,
                    )
                }
            };
            let real_loss = g.bce_with_logits(lr, T::one())?;
            let fake_loss = g.bce_with_logits(lf, T::zero())?;
            let total = g.add(real_loss, fake_loss)?;
            let grads = g.backward(total)?;
            let loss = PhaseLoss {
                total: g.value(total).item().as_f64(),
                real: g.value(real_loss).item().as_f64(),
                fake: g.value(fake_loss).item().as_f64(),
            };
            Ok((loss, grads, g.take_updates()))
        };
        let (loss, grads, updates) = run().map_err(|e| self.fail(phase, &ctx.grad_norms, e))?;
        let nets = self.critic_networks();
        self.record_norms(ctx, &grads, &nets);
        self.optimizers
            .critic
            .step(&mut self.bundle.store, &grads)
            .map_err(|e| self.fail(phase, &ctx.grad_norms, e))?;
        self.bundle.store.apply_updates(updates)?;
        Ok(loss)
    }

    /// G1+G2 (and G_low) against the current D and critic, which are frozen.
    /// Consumes the generator graph; it is freed before the update.
    pub fn update_generator(&mut self, ctx: &mut StepContext<T>) -> Result<f64, TrainError> {
        let phase = Phase::Generator;
        let non_saturating = self.config.non_saturating;
        let b = &self.bundle;
        let mut g = std::mem::take(&mut ctx.graph);
        let adversarial = |g: &mut Graph<T>, logits: Var| -> Result<Var, TensorError> {
            if non_saturating {
                g.bce_with_logits(logits, T::one())
            } else {
                // minimize log(1 - D) = -bce(logits, 0)
                let l = g.bce_with_logits(logits, T::zero())?;
                g.scale(l, -T::one())
            }
        };
        let mut run = || -> Result<(f64, Gradients<T>), TensorError> {
            g.set_frozen(true);
            let d_logits = b.d.forward(&mut g, &b.store, ctx.fake, Mode::Eval)?;
            let critic_logits = match &b.critic {
                Critic::Crf(crf) => crf.logit(&mut g, &b.store, ctx.slab_emb)?,
                Critic::LowRes { discriminator, .. } => {
                    let low = ctx.low_fake.expect("baseline builds a low-resolution output");
                    discriminator.forward(&mut g, &b.store, low, Mode::Eval)?
                }
            };
            g.set_frozen(false);
            let a = adversarial(&mut g, d_logits)?;
            let c = adversarial(&mut g, critic_logits)?;
            let total = g.add(a, c)?;
            let grads = g.backward(total)?;
            Ok((g.value(total).item().as_f64(), grads))
        };
        let result = run();
        drop(g);
        let (loss, grads) = result.map_err(|e| self.fail(phase, &ctx.grad_norms, e))?;
        let mut nets = vec![Network::G1, Network::G2];
        if self.bundle.variant == Variant::HaGanLite {
            nets.push(Network::GLow);
        }
        self.record_norms(ctx, &grads, &nets);
        self.optimizers
            .g
            .step(&mut self.bundle.store, &grads)
            .map_err(|e| self.fail(phase, &ctx.grad_norms, e))?;
        Ok(loss)
    }

    /// hE on `L1(G2(hE(x_r)), x_r)` with G2 frozen.
    pub fn update_encoder(&mut self, ctx: &mut StepContext<T>) -> Result<f64, TrainError> {
        let (loss, norms) = self.encoder_step(&ctx.real_slab, &ctx.grad_norms)?;
        ctx.grad_norms = norms;
        Ok(loss)
    }

    /// The encoder phase on an explicit real slab.
    pub fn encoder_step(
        &mut self,
        real_slab: &Tensor<T>,
        prior_norms: &BTreeMap<String, f64>,
    ) -> Result<(f64, BTreeMap<String, f64>), TrainError> {
        let phase = Phase::Encoder;
        let b = &self.bundle;
        let run = || -> Result<(f64, Gradients<T>), TensorError> {
            let mut g = Graph::new();
            let x = g.input(real_slab.clone())?;
            let e = b.he.forward(&mut g, &b.store, x)?;
            g.set_frozen(true);
            let rec = b.g2.forward(&mut g, &b.store, e, Mode::Train)?;
            g.set_frozen(false);
            let loss = g.l1(rec, x)?;
            let grads = g.backward(loss)?;
            // G2's running statistics are advanced only by the generator.
            g.take_updates();
            Ok((g.value(loss).item().as_f64(), grads))
        };
        let (loss, grads) = run().map_err(|e| self.fail(phase, prior_norms, e))?;
        let mut norms = prior_norms.clone();
        let ids = self.bundle.store.trainable_ids_with_prefix(Network::He.prefix());
        norms.insert(Network::He.label().to_string(), grads.norm_of(&ids));
        self.optimizers
            .he
            .step(&mut self.bundle.store, &grads)
            .map_err(|e| self.fail(phase, &norms, e))?;
        Ok((loss, norms))
    }

    /// One full alternating update on `real` ([N, 1, R, R, R]).
    pub fn train_step(&mut self, real: &Tensor<T>) -> Result<LossBreakdown, TrainError> {
        let mut ctx = self.begin_step(real)?;
        let d = self.update_discriminator(&mut ctx)?;
        let c = self.update_critic(&mut ctx)?;
        let g_adv = self.update_generator(&mut ctx)?;
        let rec = self.update_encoder(&mut ctx)?;
        let breakdown = LossBreakdown {
            step: self.step,
            r: ctx.r,
            l_gan: d.total,
            l_crf: c.total,
            l_reconstruction: rec,
            l_total: d.total + c.total + rec,
            d_real: d.real,
            d_fake: d.fake,
            critic_real: c.real,
            critic_fake: c.fake,
            g_adversarial: g_adv,
        };
        for v in [breakdown.l_total, g_adv] {
            if !v.is_finite() {
                return Err(self.fail(Phase::Encoder, &ctx.grad_norms, TensorError::NonFinite { op: "loss" }));
            }
        }
        self.step += 1;
        self.history.push(breakdown);
        Ok(breakdown)
    }

    /// Draw a batch from `source` with the trainer's generator and step.
    pub fn step_from<S: BatchSource<T>>(&mut self, source: &mut S) -> Result<LossBreakdown, TrainError> {
        let real = source.batch(self.config.batch_size, &mut self.rng)?;
        self.train_step(&real)
    }

    pub fn run<S: BatchSource<T>>(&mut self, source: &mut S, steps: u64) -> Result<(), TrainError> {
        for _ in 0..steps {
            self.step_from(source)?;
        }
        Ok(())
    }
}
