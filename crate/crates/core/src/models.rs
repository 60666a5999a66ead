//! The two-stage generator (G1, G2), voxel discriminator (D), half-encoder
//! (hE), the CRF embedding critic, and the low-resolution branch that the
//! hierarchical baseline uses in place of the CRF.
//!
//! Every network is built from one [`ModelConfig`] into a single
//! [`ParamStore`]; parameter names are prefixed by network (`"G1."`,
//! `"G2."`, `"D."`, `"CRF."`, `"hE."`, `"Glow."`, `"Dlow."`).

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::conv::ConvSpec;
use crate::tensor::layers::{BatchNorm, Conv3d, ConvTranspose3d, GroupNorm, Linear, Mode, SpectralConv3d, SpectralLinear};
use crate::tensor::{Graph, ParamStore, Result, Scalar, Tensor, TensorError, Var};

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Network {
    G1,
    G2,
    D,
    Crf,
    He,
    GLow,
    DLow,
}

impl Network {
    pub const ALL: [Network; 7] = [
        Network::G1,
        Network::G2,
        Network::D,
        Network::Crf,
        Network::He,
        Network::GLow,
        Network::DLow,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Network::G1 => "G1.",
            Network::G2 => "G2.",
            Network::D => "D.",
            Network::Crf => "CRF.",
            Network::He => "hE.",
            Network::GLow => "Glow.",
            Network::DLow => "Dlow.",
        }
    }

    pub fn label(self) -> &'static str {
        self.prefix().trim_end_matches('.')
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    CrfGan,
    HaGanLite,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::CrfGan => "crf-gan",
            Variant::HaGanLite => "hagan-lite",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrfConfig {
    /// Patch grid over (depth, height, width) of the embedding the critic
    /// sees. Each axis must divide the corresponding embedding extent.
    pub grid: [usize; 3],
    /// Per-patch feature width.
    pub hidden: usize,
    /// Rank of the symmetric bilinear pairwise form.
    pub rank: usize,
    /// Weight of the pairwise term in the energy.
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub low_res_channels: usize,
    pub low_d_channels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Output cube edge R (power of two, at least 32).
    pub resolution: usize,
    pub latent_dim: usize,
    /// Channels of G1's first 4^3 feature map; halved at each upsampling stage.
    pub g1_base_channels: usize,
    /// Embedding channels C_e.
    pub embedding_channels: usize,
    pub g2_channels: usize,
    pub d_channels: Vec<usize>,
    pub he_channels: usize,
    pub he_groups: usize,
    /// The embedding depth is split into this many slabs; training decodes
    /// one slab per step. 1 decodes the whole volume.
    pub slab_count: usize,
    pub spectral_iters: usize,
    pub seed: u64,
    pub crf: CrfConfig,
    pub baseline: BaselineConfig,
}

impl ModelConfig {
    /// 64^3 desk configuration.
    pub fn desk_64() -> Self {
        ModelConfig {
            resolution: 64,
            latent_dim: 64,
            g1_base_channels: 32,
            embedding_channels: 8,
            g2_channels: 8,
            d_channels: vec![4, 8, 16],
            he_channels: 8,
            he_groups: 4,
            slab_count: 8,
            spectral_iters: 1,
            seed: 0,
            crf: CrfConfig {
                grid: [2, 4, 4],
                hidden: 8,
                rank: 4,
                lambda: 1.0,
            },
            baseline: BaselineConfig {
                low_res_channels: 8,
                low_d_channels: vec![8, 16],
            },
        }
    }

    /// 32^3 desk configuration.
    pub fn desk_32() -> Self {
        ModelConfig {
            resolution: 32,
            g1_base_channels: 16,
            slab_count: 4,
            crf: CrfConfig {
                grid: [2, 4, 4],
                hidden: 8,
                rank: 4,
                lambda: 1.0,
            },
            ..Self::desk_64()
        }
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, TensorError> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| TensorError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    /// Embedding edge d_e = R / 4 (G2 upsamples by 4).
    pub fn embedding_size(&self) -> usize {
        self.resolution / 4
    }

    /// Slab thickness s_e in embedding voxels.
    pub fn slab_extent(&self) -> usize {
        self.embedding_size() / self.slab_count
    }

    /// Number of valid slab start indices: r in 0..=d_e - s_e.
    pub fn slab_positions(&self) -> usize {
        self.embedding_size() - self.slab_extent() + 1
    }

    pub fn slab_fraction(&self) -> f64 {
        1.0 / self.slab_count as f64
    }

    /// Number of 2x upsampling stages in G1 (4^3 up to d_e^3).
    fn g1_stages(&self) -> usize {
        (self.embedding_size() / 4).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TensorError::Config(m));
        let r = self.resolution;
        if r < 32 || !r.is_power_of_two() {
            return fail(format!("resolution must be a power of two >= 32, got {r}"));
        }
        let de = self.embedding_size();
        if self.slab_count == 0 || de % self.slab_count != 0 {
            return fail(format!(
                "embedding depth {de} not divisible by slab count {}",
                self.slab_count
            ));
        }
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("g1_base_channels", self.g1_base_channels),
            ("embedding_channels", self.embedding_channels),
            ("g2_channels", self.g2_channels),
            ("he_channels", self.he_channels),
            ("spectral_iters", self.spectral_iters),
            ("crf.hidden", self.crf.hidden),
            ("crf.rank", self.crf.rank),
            ("baseline.low_res_channels", self.baseline.low_res_channels),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.d_channels.is_empty() || self.d_channels.contains(&0) {
            return fail("d_channels must be a non-empty list of positive widths".into());
        }
        if self.baseline.low_d_channels.is_empty() || self.baseline.low_d_channels.contains(&0) {
            return fail("baseline.low_d_channels must be a non-empty list of positive widths".into());
        }
        for (name, c) in [("he_channels", self.he_channels), ("embedding_channels", self.embedding_channels)] {
            if self.he_groups == 0 || c % self.he_groups != 0 {
                return fail(format!("{name} = {c} not divisible by he_groups = {}", self.he_groups));
            }
        }
        let slab = [self.slab_extent(), de, de];
        check_grid(self.crf.grid, slab)?;
        if !self.crf.lambda.is_finite() || self.crf.lambda < 0.0 {
            return fail(format!("crf.lambda must be finite and >= 0, got {}", self.crf.lambda));
        }
        Ok(())
    }
}

fn check_grid(grid: [usize; 3], dims: [usize; 3]) -> Result<()> {
    for a in 0..3 {
        if grid[a] == 0 || dims[a] % grid[a] != 0 {
            return Err(TensorError::Config(format!(
                "patch grid {grid:?} does not divide embedding extent {dims:?}"
            )));
        }
    }
    Ok(())
}

/// Kernel/stride/padding for a downsampling conv along one axis: halve
/// axes of extent >= 2, pass through singleton axes.
fn down_axis(size: usize) -> (usize, usize, usize) {
    if size >= 2 {
        (4, 2, 1)
    } else {
        (1, 1, 0)
    }
}

fn down_layer(dims: [usize; 3]) -> ([usize; 3], ConvSpec, [usize; 3]) {
    let mut k = [0; 3];
    let mut spec = ConvSpec::default();
    let mut out = [0; 3];
    for a in 0..3 {
        let (ka, sa, pa) = down_axis(dims[a]);
        k[a] = ka;
        spec.stride[a] = sa;
        spec.padding[a] = pa;
        out[a] = (dims[a] + 2 * pa - ka) / sa + 1;
    }
    (k, spec, out)
}

const UP: ConvSpec = ConvSpec {
    stride: [2; 3],
    padding: [1; 3],
};
const UP_KERNEL: [usize; 3] = [4; 3];

/// G1: latent vector to embedding [N, C_e, d_e, d_e, d_e].
#[derive(Debug, Clone)]
pub struct G1 {
    pub fc: Linear,
    pub fc_bn: BatchNorm,
    pub stages: Vec<(ConvTranspose3d, BatchNorm)>,
    base: usize,
}

impl G1 {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let base = cfg.g1_base_channels;
        let fc = Linear::new(store, "G1.fc", cfg.latent_dim, base * 64, true, rng)?;
        let fc_bn = BatchNorm::new(store, "G1.fc_bn", base)?;
        let n = cfg.g1_stages();
        let mut stages = Vec::with_capacity(n);
        let mut c_in = base;
        for i in 0..n {
            let c_out = if i + 1 == n {
                cfg.embedding_channels
            } else {
                (base >> (i + 1)).max(cfg.embedding_channels)
            };
            let name = format!("G1.up{i}");
            let conv = ConvTranspose3d::new(store, &format!("{name}.conv"), c_in, c_out, UP_KERNEL, UP, true, rng)?;
            let bn = BatchNorm::new(store, &format!("{name}.bn"), c_out)?;
            stages.push((conv, bn));
            c_in = c_out;
        }
        Ok(G1 { fc, fc_bn, stages, base })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var, mode: Mode) -> Result<Var> {
        let n = g.shape(z)[0];
        let h = self.fc.forward(g, store, z)?;
        let h = g.reshape(h, &[n, self.base, 4, 4, 4])?;
        let h = self.fc_bn.forward(g, store, h, mode)?;
        let mut h = g.relu(h)?;
        for (conv, bn) in &self.stages {
            h = conv.forward(g, store, h)?;
            h = bn.forward(g, store, h, mode)?;
            h = g.relu(h)?;
        }
        Ok(h)
    }
}

/// G2: embedding (slab) to voxels, 4x upsampling, tanh output.
#[derive(Debug, Clone)]
pub struct G2 {
    pub up: ConvTranspose3d,
    pub bn: BatchNorm,
    pub out: ConvTranspose3d,
}

impl G2 {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.g2_channels;
        Ok(G2 {
            up: ConvTranspose3d::new(store, "G2.up.conv", cfg.embedding_channels, c, UP_KERNEL, UP, true, rng)?,
            bn: BatchNorm::new(store, "G2.up.bn", c)?,
            out: ConvTranspose3d::new(store, "G2.out.conv", c, 1, UP_KERNEL, UP, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, emb: Var, mode: Mode) -> Result<Var> {
        let h = self.up.forward(g, store, emb)?;
        let h = self.bn.forward(g, store, h, mode)?;
        let h = g.relu(h)?;
        let h = self.out.forward(g, store, h)?;
        g.tanh(h)
    }

    fn layers(&self) -> [&ConvTranspose3d; 2] {
        [&self.up, &self.out]
    }

    /// Output voxels produced per embedding voxel along each axis.
    pub fn upsample(&self) -> usize {
        self.layers().iter().map(|l| l.spec.stride[0]).product()
    }

    /// Embedding context needed below and above a depth range so that every
    /// voxel that range maps to is computed exactly. Derived by mapping the
    /// output interval back through each transposed conv.
    pub fn halo(&self) -> (usize, usize) {
        // A slab far from any boundary, so no clamping interferes.
        let (r, s) = (1_000i64, 1i64);
        let up = self.upsample() as i64;
        let (mut lo, mut hi) = (r * up, (r + s) * up - 1);
        for layer in self.layers().iter().rev() {
            let (k, st, p) = (layer.kernel[0] as i64, layer.spec.stride[0] as i64, layer.spec.padding[0] as i64);
            // out = in * st - p + kk, 0 <= kk < k
            lo = (lo + p - k + 1).div_euclid(st) + i64::from((lo + p - k + 1).rem_euclid(st) != 0);
            hi = (hi + p).div_euclid(st);
        }
        ((r - lo) as usize, (hi - (r + s - 1)) as usize)
    }
}

/// D: spectral-normalized voxel critic producing one logit per sample.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub convs: Vec<SpectralConv3d>,
    pub fc: SpectralLinear,
}

fn spectral_tower<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    channels: &[usize],
    input: [usize; 3],
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Discriminator> {
    let mut dims = input;
    let mut c_in = 1;
    let mut convs = Vec::with_capacity(channels.len());
    for (i, &c_out) in channels.iter().enumerate() {
        let (k, spec, out) = down_layer(dims);
        convs.push(SpectralConv3d::new(
            store,
            &format!("{prefix}.conv{i}"),
            c_in,
            c_out,
            k,
            spec,
            iters,
            rng,
        )?);
        dims = out;
        c_in = c_out;
    }
    let fc = SpectralLinear::new(store, &format!("{prefix}.fc"), c_in, 1, iters, rng)?;
    Ok(Discriminator { convs, fc })
}

impl Discriminator {
    /// Logits of shape [N].
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, store, h, mode)?;
            h = g.leaky_relu(h, T::from_f64(LEAKY_SLOPE))?;
        }
        let pooled = g.mean_spatial(h)?;
        let logit = self.fc.forward(g, store, pooled, mode)?;
        let n = g.shape(logit)[0];
        g.reshape(logit, &[n])
    }
}

/// hE: voxel slab to embedding slab, mirroring G2's 4x geometry.
#[derive(Debug, Clone)]
pub struct HalfEncoder {
    pub conv1: Conv3d,
    pub gn1: GroupNorm,
    pub conv2: Conv3d,
    pub gn2: GroupNorm,
}

impl HalfEncoder {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let h = cfg.he_channels;
        let ce = cfg.embedding_channels;
        Ok(HalfEncoder {
            conv1: Conv3d::new(store, "hE.conv1", 1, h, UP_KERNEL, UP, true, rng)?,
            gn1: GroupNorm::new(store, "hE.gn1", h, cfg.he_groups)?,
            conv2: Conv3d::new(store, "hE.conv2", h, ce, UP_KERNEL, UP, true, rng)?,
            gn2: GroupNorm::new(store, "hE.gn2", ce, cfg.he_groups)?,
        })
    }

    /// Activations after the first block, at half the input resolution.
    pub fn penultimate<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, store, x)?;
        let h = self.gn1.forward(g, store, h)?;
        g.relu(h)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.penultimate(g, store, x)?;
        let h = self.conv2.forward(g, store, h)?;
        let h = self.gn2.forward(g, store, h)?;
        g.relu(h)
    }
}

/// Energy-based patch critic over an embedding.
///
/// Per-voxel features `f = relu(W_f e + b_f)` are average-pooled into a patch
/// grid. Patch `i` contributes a unary score `u(p_i) = w_u . p_i + b_u`; each
/// face-adjacent pair contributes `sum_k w_k (Q p_i)_k (Q p_j)_k`, which is
/// symmetric in its arguments because the elementwise product commutes.
/// The energy is `E = sum_i u(p_i) + lambda * sum_pairs pair(p_i, p_j)` and
/// the realness logit is `-E`.
#[derive(Debug, Clone)]
pub struct CrfHead {
    pub features: Conv3d,
    pub unary: Conv3d,
    pub project: Conv3d,
    pub pair_weight: Conv3d,
    pub grid: [usize; 3],
    pub lambda: f64,
}

impl CrfHead {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = &cfg.crf;
        let one = [1; 3];
        let spec = ConvSpec::default();
        let head = CrfHead {
            features: Conv3d::new(store, "CRF.features", cfg.embedding_channels, c.hidden, one, spec, true, rng)?,
            unary: Conv3d::new(store, "CRF.unary", c.hidden, 1, one, spec, true, rng)?,
            project: Conv3d::new(store, "CRF.project", c.hidden, c.rank, one, spec, false, rng)?,
            pair_weight: Conv3d::new(store, "CRF.pair_weight", c.rank, 1, one, spec, false, rng)?,
            grid: c.grid,
            lambda: c.lambda,
        };
        // The energy sums over every patch and neighbor pair, so randomly
        // initialized readouts put |E| far into sigmoid saturation. Zero
        // readouts start the critic at E = 0, p = 1/2.
        for id in [head.unary.weight, head.pair_weight.weight] {
            let zeros = Tensor::zeros(store.value(id).shape());
            store.set(id, zeros)?;
        }
        Ok(head)
    }

    /// Pooled patch features [N, H, gd, gh, gw].
    pub fn patches<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, emb: Var) -> Result<Var> {
        let s = g.shape(emb).to_vec();
        if s.len() != 5 {
            return Err(TensorError::InvalidShape {
                op: "crf",
                detail: format!("embedding must be rank 5, got {s:?}"),
            });
        }
        let dims = [s[2], s[3], s[4]];
        check_grid(self.grid, dims)?;
        let f = self.features.forward(g, store, emb)?;
        let f = g.relu(f)?;
        let kernel = [dims[0] / self.grid[0], dims[1] / self.grid[1], dims[2] / self.grid[2]];
        if kernel == [1, 1, 1] {
            Ok(f)
        } else {
            g.avg_pool3d(f, kernel)
        }
    }

    /// Unary and pairwise energy sums, each of shape [N]. The pairwise sum
    /// is unweighted; `None` when the grid has no neighboring patches.
    pub fn energy_terms<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        emb: Var,
    ) -> Result<(Var, Option<Var>)> {
        let p = self.patches(g, store, emb)?;
        let u = self.unary.forward(g, store, p)?;
        let unary = g.sum_per_sample(u)?;
        let q = self.project.forward(g, store, p)?;
        let mut pair: Option<Var> = None;
        for axis in 0..3 {
            let len = self.grid[axis];
            if len < 2 {
                continue;
            }
            let a = g.narrow(q, axis + 2, 0, len - 1)?;
            let b = g.narrow(q, axis + 2, 1, len - 1)?;
            let prod = g.mul(a, b)?;
            let scored = self.pair_weight.forward(g, store, prod)?;
            let s = g.sum_per_sample(scored)?;
            pair = Some(match pair {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
        Ok((unary, pair))
    }

    /// Energy E per sample, shape [N].
    pub fn energy<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, emb: Var) -> Result<Var> {
        let (unary, pair) = self.energy_terms(g, store, emb)?;
        match pair {
            Some(p) => {
                let p = g.scale(p, T::from_f64(self.lambda))?;
                g.add(unary, p)
            }
            None => Ok(unary),
        }
    }

    /// Realness logit `-E`, shape [N]; the probability is its sigmoid.
    pub fn logit<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, emb: Var) -> Result<Var> {
        let e = self.energy(g, store, emb)?;
        g.scale(e, -T::one())
    }

    /// Pairwise potential between two patch feature vectors (length H),
    /// evaluated outside the graph with the stored parameters.
    pub fn pairwise<T: Scalar>(&self, store: &ParamStore<T>, a: &[T], b: &[T]) -> Result<T> {
        let q = store.value(self.project.weight);
        let (rank, hidden) = (q.shape()[0], q.shape()[1]);
        if a.len() != hidden || b.len() != hidden {
            return Err(TensorError::ShapeMismatch {
                op: "crf_pairwise",
                lhs: vec![a.len(), b.len()],
                rhs: vec![hidden],
            });
        }
        let w = store.value(self.pair_weight.weight).data();
        let qd = q.data();
        let mut total = T::zero();
        for k in 0..rank {
            let row = &qd[k * hidden..(k + 1) * hidden];
            let qa: T = row.iter().zip(a).map(|(&x, &y)| x * y).sum();
            let qb: T = row.iter().zip(b).map(|(&x, &y)| x * y).sum();
            total += w[k] * (qa * qb);
        }
        Ok(total)
    }
}

/// Baseline low-resolution generator: embedding to a d_e^3 volume.
#[derive(Debug, Clone)]
pub struct LowResGenerator {
    pub conv1: Conv3d,
    pub conv2: Conv3d,
}

impl LowResGenerator {
    fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = cfg.baseline.low_res_channels;
        let spec = ConvSpec::uniform(1, 1);
        Ok(LowResGenerator {
            conv1: Conv3d::new(store, "Glow.conv1", cfg.embedding_channels, c, [3; 3], spec, true, rng)?,
            conv2: Conv3d::new(store, "Glow.conv2", c, 1, [3; 3], spec, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, emb: Var) -> Result<Var> {
        let h = self.conv1.forward(g, store, emb)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, store, h)?;
        g.tanh(h)
    }
}

#[derive(Debug, Clone)]
pub enum Critic {
    Crf(CrfHead),
    LowRes {
        generator: LowResGenerator,
        discriminator: Discriminator,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub per_network: BTreeMap<String, usize>,
    pub total: usize,
}

/// Parameters and architecture of one trainable model.
pub struct ModelBundle<T> {
    pub config: ModelConfig,
    pub variant: Variant,
    pub store: ParamStore<T>,
    pub g1: G1,
    pub g2: G2,
    pub d: Discriminator,
    pub he: HalfEncoder,
    pub critic: Critic,
}

impl<T: Scalar> ModelBundle<T> {
    /// Deterministic construction: all initial values come from a ChaCha8
    /// stream seeded by `config.seed`.
    pub fn new(config: ModelConfig, variant: Variant) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let g1 = G1::new(&mut store, &config, &mut rng)?;
        let g2 = G2::new(&mut store, &config, &mut rng)?;
        let (r, se) = (config.resolution, config.slab_extent());
        let up = g2.upsample();
        let d = spectral_tower(&mut store, "D", &config.d_channels, [se * up, r, r], config.spectral_iters, &mut rng)?;
        let he = HalfEncoder::new(&mut store, &config, &mut rng)?;
        let critic = match variant {
            Variant::CrfGan => Critic::Crf(CrfHead::new(&mut store, &config, &mut rng)?),
            Variant::HaGanLite => {
                let de = config.embedding_size();
                Critic::LowRes {
                    generator: LowResGenerator::new(&mut store, &config, &mut rng)?,
                    discriminator: spectral_tower(
                        &mut store,
                        "Dlow",
                        &config.baseline.low_d_channels,
                        [de; 3],
                        config.spectral_iters,
                        &mut rng,
                    )?,
                }
            }
        };
        Ok(ModelBundle {
            config,
            variant,
            store,
            g1,
            g2,
            d,
            he,
            critic,
        })
    }

    pub fn networks(&self) -> Vec<Network> {
        let mut v = vec![Network::G1, Network::G2, Network::D, Network::He];
        match self.variant {
            Variant::CrfGan => v.push(Network::Crf),
            Variant::HaGanLite => v.extend([Network::GLow, Network::DLow]),
        }
        v.sort();
        v
    }

    pub fn count_parameters(&self) -> ParameterCounts {
        let per_network: BTreeMap<String, usize> = self
            .networks()
            .into_iter()
            .map(|n| (n.label().to_string(), self.store.count_trainable(n.prefix())))
            .collect();
        let total = per_network.values().sum();
        ParameterCounts { per_network, total }
    }

    pub fn crf(&self) -> Option<&CrfHead> {
        match &self.critic {
            Critic::Crf(c) => Some(c),
            Critic::LowRes { .. } => None,
        }
    }

    /// Draws `n` standard-normal latent codes, shape [n, latent_dim].
    pub fn sample_latent<R: rand::Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor<T> {
        let l = self.config.latent_dim;
        let data = (0..n * l)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::from_f64(v)
            })
            .collect();
        Tensor::from_vec(&[n, l], data).expect("latent shape")
    }

    fn check_latent(&self, z: &Tensor<T>) -> Result<()> {
        if z.shape().len() != 2 || z.shape()[1] != self.config.latent_dim {
            return Err(TensorError::ShapeMismatch {
                op: "g1_forward",
                lhs: z.shape().to_vec(),
                rhs: vec![z.shape().first().copied().unwrap_or(0), self.config.latent_dim],
            });
        }
        if !z.is_finite() {
            return Err(TensorError::NonFinite { op: "g1_forward" });
        }
        Ok(())
    }

    /// Inference-mode embedding for latent codes `z` ([N, L]).
    pub fn embed(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_latent(z)?;
        let mut g = Graph::new();
        let zv = g.input(z.clone())?;
        let e = self.g1.forward(&mut g, &self.store, zv, Mode::Eval)?;
        Ok(g.value(e).clone())
    }

    /// Inference-mode decoding of an embedding or embedding slab.
    pub fn decode(&self, emb: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let ev = g.input(emb.clone())?;
        let x = self.g2.forward(&mut g, &self.store, ev, Mode::Eval)?;
        Ok(g.value(x).clone())
    }

    /// Full volume from the complete embedding, [N, 1, R, R, R].
    pub fn generate_full(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let emb = self.embed(z)?;
        self.decode(&emb)
    }

    /// Full volume decoded one embedding slab at a time. Each slab is
    /// extended by G2's halo (clamped at the embedding boundary), decoded,
    /// and cropped back to its own voxels.
    pub fn generate_stitched(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let emb = self.embed(z)?;
        self.decode_stitched(&emb, self.config.slab_extent())
    }

    pub fn decode_stitched(&self, emb: &Tensor<T>, slab: usize) -> Result<Tensor<T>> {
        let s = emb.shape().to_vec();
        let depth = s[2];
        if slab == 0 || depth % slab != 0 {
            return Err(TensorError::Config(format!("slab {slab} does not tile embedding depth {depth}")));
        }
        let up = self.g2.upsample();
        let (halo_lo, halo_hi) = self.g2.halo();
        let n = s[0];
        let (oh, ow) = (s[3] * up, s[4] * up);
        let plane = oh * ow;
        let mut out = Tensor::zeros(&[n, 1, depth * up, oh, ow]);
        for r in (0..depth).step_by(slab) {
            let lo = r.saturating_sub(halo_lo);
            let hi = (r + slab + halo_hi).min(depth);
            let mut g = Graph::new();
            let ev = g.input(emb.clone())?;
            let part = g.narrow(ev, 2, lo, hi - lo)?;
            let x = self.g2.forward(&mut g, &self.store, part, Mode::Eval)?;
            let xv = g.value(x);
            let part_depth = (hi - lo) * up;
            let crop = (r - lo) * up;
            let dst = out.data_mut();
            for b in 0..n {
                let src = &xv.data()[b * part_depth * plane..(b + 1) * part_depth * plane];
                let src = &src[crop * plane..(crop + slab * up) * plane];
                let off = b * depth * up * plane + r * up * plane;
                dst[off..off + slab * up * plane].copy_from_slice(src);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_configs_validate() {
        ModelConfig::desk_64().validate().unwrap();
        ModelConfig::desk_32().validate().unwrap();
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ModelConfig::desk_64();
        assert_eq!(ModelConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_config_fields_are_rejected() {
        let text = format!("{}\nbogus = 1\n", ModelConfig::desk_64().to_toml());
        assert!(ModelConfig::from_toml(&text).is_err());
    }

    #[test]
    fn grid_must_divide_slab() {
        let mut cfg = ModelConfig::desk_64();
        cfg.crf.grid = [4, 4, 4];
        assert!(matches!(cfg.validate(), Err(TensorError::Config(_))));
    }

    #[test]
    fn g2_halo_is_one_embedding_voxel() {
        let b = ModelBundle::<f32>::new(ModelConfig::desk_32(), Variant::CrfGan).unwrap();
        assert_eq!(b.g2.halo(), (1, 1));
        assert_eq!(b.g2.upsample(), 4);
    }
}
