//! Central finite-difference gradient checking at 64-bit, with a catalog
//! of randomized cases covering every differentiable graph op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::ConvSpec;
use super::{Graph, ParamStore, Result, Tensor, Var};

/// Builds an op's output from its input variables.
pub type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// A case generator: random inputs plus the op applied to them.
pub type MakeCase = fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>);

/// Finite-difference step.
pub const STEP: f64 = 1e-6;

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Relative error `||analytic - numeric|| / max(||analytic||, ||numeric||)`
/// of the gradient of `sum(op(inputs) * R)` for a random probe `R` drawn
/// from `seed`, over every input element.
pub fn relative_error(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let ids = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add_trainable(&format!("in{i}"), t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(&store, id)).collect();
        let out = build(&mut g, &vars)?;
        random_tensor(g.shape(out), &mut rng, -1.0, 1.0)
    };
    let loss_of = |store: &ParamStore<f64>, g: &mut Graph<f64>| -> Result<Var> {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(store, id)).collect();
        let out = build(g, &vars)?;
        let r = g.input(probe.clone())?;
        let m = g.mul(out, r)?;
        g.sum(m)
    };
    let mut g = Graph::new();
    let loss = loss_of(&store, &mut g)?;
    let grads = g.backward(loss)?;

    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for &id in &ids {
        let analytic = grads
            .get(id)
            .map(|t| t.to_vec())
            .unwrap_or_else(|| vec![0.0; store.value(id).numel()]);
        for (k, &a) in analytic.iter().enumerate() {
            let base = store.value(id).data()[k];
            let mut eval = |v: f64| -> Result<f64> {
                store.value_mut(id).data_mut()[k] = v;
                let mut g = Graph::new();
                let l = loss_of(&store, &mut g)?;
                Ok(g.value(l).item())
            };
            let numeric = (eval(base + STEP)? - eval(base - STEP)?) / (2.0 * STEP);
            store.value_mut(id).data_mut()[k] = base;
            diff2 += (a - numeric).powi(2);
            a2 += a.powi(2);
            n2 += numeric.powi(2);
        }
    }
    Ok(diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-12))
}

/// Worst relative error of one case generator over seeds `0..seeds`.
pub fn worst_error(make: MakeCase, seeds: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inputs, build) = make(&mut rng);
        worst = worst.max(relative_error(&inputs, build.as_ref(), seed)?);
    }
    Ok(worst)
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> [usize; 3] {
    [rng.random_range(lo..=hi), rng.random_range(lo..=hi), rng.random_range(lo..=hi)]
}

fn spec(rng: &mut ChaCha8Rng) -> ConvSpec {
    ConvSpec {
        stride: [rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=2)],
        padding: [rng.random_range(0..=1), rng.random_range(0..=1), rng.random_range(0..=1)],
    }
}

fn conv3d(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let (c, f, n) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=2));
    let d = dims(rng, 3, 5);
    let k = dims(rng, 1, 3);
    let spec = spec(rng);
    let x = random_tensor(&[n, c, d[0], d[1], d[2]], rng, -1.0, 1.0);
    let w = random_tensor(&[f, c, k[0], k[1], k[2]], rng, -1.0, 1.0);
    let b = random_tensor(&[f], rng, -1.0, 1.0);
    (vec![x, w, b], Box::new(move |g, v| g.conv3d(v[0], v[1], Some(v[2]), spec)))
}

fn conv_transpose3d(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let (cin, cout, n) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=2));
    let d = dims(rng, 2, 3);
    let k = dims(rng, 2, 4);
    let spec = spec(rng);
    let x = random_tensor(&[n, cin, d[0], d[1], d[2]], rng, -1.0, 1.0);
    let w = random_tensor(&[cin, cout, k[0], k[1], k[2]], rng, -1.0, 1.0);
    let b = random_tensor(&[cout], rng, -1.0, 1.0);
    (vec![x, w, b], Box::new(move |g, v| g.conv_transpose3d(v[0], v[1], Some(v[2]), spec)))
}

fn linear(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let (n, i, o) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=5));
    let x = random_tensor(&[n, i], rng, -1.0, 1.0);
    let w = random_tensor(&[o, i], rng, -1.0, 1.0);
    let b = random_tensor(&[o], rng, -1.0, 1.0);
    (vec![x, w, b], Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))))
}

fn batch_norm_train(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let (n, c) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let d = dims(rng, 1, 3);
    let x = random_tensor(&[n, c, d[0], d[1], d[2] + 1], rng, -2.0, 2.0);
    let gamma = random_tensor(&[c], rng, 0.5, 1.5);
    let beta = random_tensor(&[c], rng, -1.0, 1.0);
    (vec![x, gamma, beta], Box::new(|g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)))
}

fn batch_norm_eval(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let c = rng.random_range(1..=3);
    let x = random_tensor(&[2, c, 2, 2, 2], rng, -2.0, 2.0);
    let gamma = random_tensor(&[c], rng, 0.5, 1.5);
    let beta = random_tensor(&[c], rng, -1.0, 1.0);
    let rm: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rv: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
    (
        vec![x, gamma, beta],
        Box::new(move |g, v| g.batch_norm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5)),
    )
}

fn group_norm(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let groups = rng.random_range(1..=3);
    let c = groups * rng.random_range(1..=2);
    let n = rng.random_range(1..=2);
    let d = dims(rng, 1, 3);
    let x = random_tensor(&[n, c, d[0], d[1], d[2] + 1], rng, -2.0, 2.0);
    let gamma = random_tensor(&[c], rng, 0.5, 1.5);
    let beta = random_tensor(&[c], rng, -1.0, 1.0);
    (vec![x, gamma, beta], Box::new(move |g, v| g.group_norm(v[0], groups, v[1], v[2], 1e-5)))
}

fn rows(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = rng.random_range(1..=4);
    random_tensor(&[n, 5], rng, lo, hi)
}

fn relu(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    (vec![rows(rng, -1.0, 1.0)], Box::new(|g, v| g.relu(v[0])))
}

fn leaky_relu(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    (vec![rows(rng, -1.0, 1.0)], Box::new(|g, v| g.leaky_relu(v[0], 0.2)))
}

fn tanh(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    (vec![rows(rng, -2.0, 2.0)], Box::new(|g, v| g.tanh(v[0])))
}

fn sigmoid(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    (vec![rows(rng, -3.0, 3.0)], Box::new(|g, v| g.sigmoid(v[0])))
}

fn bce_with_logits(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let n = rng.random_range(1..=6);
    let x = random_tensor(&[n], rng, -4.0, 4.0);
    let t: f64 = rng.random_range(0.0..=1.0);
    (vec![x], Box::new(move |g, v| g.bce_with_logits(v[0], t)))
}

fn bce(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let n = rng.random_range(1..=6);
    let x = random_tensor(&[n], rng, 0.05, 0.95);
    let t: f64 = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    (vec![x], Box::new(move |g, v| g.bce(v[0], t)))
}

fn l1(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let n = rng.random_range(1..=8);
    let a = random_tensor(&[n], rng, -1.0, 1.0);
    let b = random_tensor(&[n], rng, -1.0, 1.0);
    (vec![a, b], Box::new(|g, v| g.l1(v[0], v[1])))
}

fn elementwise(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let shape = [rng.random_range(1..=3), rng.random_range(1..=4)];
    let a = random_tensor(&shape, rng, -1.0, 1.0);
    let b = random_tensor(&shape, rng, -1.0, 1.0);
    (
        vec![a, b],
        Box::new(|g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(v[0], v[1])?;
            let m = g.mul(s, d)?;
            g.scale(m, 0.7)
        }),
    )
}

fn reductions(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let shape = [rng.random_range(1..=3), rng.random_range(1..=4)];
    let a = random_tensor(&shape, rng, -1.0, 1.0);
    (
        vec![a],
        Box::new(|g, v| {
            let sq = g.mul(v[0], v[0])?;
            let per = g.sum_per_sample(sq)?;
            let s = g.sum(per)?;
            let m = g.mean(v[0])?;
            g.add(s, m)
        }),
    )
}

fn narrow(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let d = dims(rng, 2, 4);
    let x = random_tensor(&[2, 2, d[0], d[1], d[2]], rng, -1.0, 1.0);
    let axis = rng.random_range(0..5);
    let size = x.shape()[axis];
    let start = rng.random_range(0..size);
    let len = rng.random_range(1..=size - start);
    (vec![x], Box::new(move |g, v| g.narrow(v[0], axis, start, len)))
}

fn pooling(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let k = dims(rng, 1, 2);
    let c = rng.random_range(1..=2);
    let x = random_tensor(&[2, c, k[0] * 2, k[1] * 2, k[2] * 2], rng, -1.0, 1.0);
    (
        vec![x],
        Box::new(move |g, v| {
            let p = g.avg_pool3d(v[0], k)?;
            let m = g.mean_spatial(p)?;
            let t = g.tanh(m)?;
            g.reshape(t, &[2 * c])
        }),
    )
}

fn spectral_normalize(rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>) {
    let r = rng.random_range(2..=4);
    let c = rng.random_range(2..=5);
    let w = random_tensor(&[r, c], rng, -1.0, 1.0);
    let mut state = ParamStore::new();
    let u = state
        .add_state("u", random_tensor(&[r], rng, 0.1, 1.0))
        .expect("fresh store");
    (vec![w], Box::new(move |g, v| g.spectral_normalize(v[0], &state, u, 200, false)))
}

/// Every differentiable op, as `(name, case generator)`.
pub fn op_catalog() -> Vec<(&'static str, MakeCase)> {
    vec![
        ("conv3d", conv3d),
        ("conv_transpose3d", conv_transpose3d),
        ("linear", linear),
        ("batch_norm3d(train)", batch_norm_train),
        ("batch_norm3d(eval)", batch_norm_eval),
        ("group_norm", group_norm),
        ("relu", relu),
        ("leaky_relu", leaky_relu),
        ("tanh", tanh),
        ("sigmoid", sigmoid),
        ("bce_with_logits", bce_with_logits),
        ("bce", bce),
        ("l1", l1),
        ("add/sub/mul/scale", elementwise),
        ("sum/mean/sum_per_sample", reductions),
        ("narrow", narrow),
        ("avg_pool3d/reshape/mean_spatial", pooling),
        ("spectral_normalize", spectral_normalize),
    ]
}
