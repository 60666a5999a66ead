//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. `ACCEPTANCE_ONLY=3,4,9` restricts the run to a subset.

mod common;

use std::error::Error;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use crfgan_core::data::{
    hu_to_normalized, make_phantom, preprocess, read_metaimage, split_dataset, write_metaimage, ElementType,
    IntensityDomain, PhantomSpec, PreprocessConfig, Volume,
};
use crfgan_core::metrics::{
    extract_features, fid, median_bandwidth, mmd2, sqrtm_newton_schulz, sqrtm_psd, Estimator, FeatureStats,
    IntensityExtractor, KernelSpec,
};
use crfgan_core::tensor::conv::{conv_output_dims, ConvSpec};
use crfgan_core::tensor::gradcheck::{op_catalog, worst_error};
use crfgan_core::tensor::{Graph, Tensor};
use crfgan_core::training::measure::{measure_peak_memory, measure_throughput};
use crfgan_core::training::{TrainConfig, Trainer, VolumePool};
use crfgan_core::{ModelBundle, ModelConfig, Scalar, Variant};
use crfgan_study::{chi2_sf, chi_square_preference, run_simulated_raters, Side, SimulatedRater};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, Box<dyn Error>>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+).into());
        }
    };
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn random_psd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let x = gaussian_matrix(n, 2 * n, rng);
    &x * x.transpose() / (2 * n) as f64
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn one_d(mu: f64, var: f64) -> FeatureStats {
    FeatureStats {
        mu: DVector::from_element(1, mu),
        sigma: DMatrix::from_element(1, 1, var),
        n: 100,
    }
}

/// Preprocessed phantoms at edge `resolution` for the given seeds.
fn phantoms(seeds: std::ops::Range<u64>, resolution: usize) -> Result<Vec<Volume>, Box<dyn Error>> {
    let mut out = Vec::new();
    for seed in seeds {
        let spec = PhantomSpec {
            seed,
            resolution,
            ..PhantomSpec::default()
        };
        out.push(preprocess(&make_phantom(&spec)?.volume, &PreprocessConfig::default())?);
    }
    Ok(out)
}

fn pool<T: Scalar>(vols: &[Volume]) -> Result<VolumePool<T>, Box<dyn Error>> {
    Ok(VolumePool::new(vols.iter().map(|v| v.to_tensor::<T>()).collect())?)
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0, "");
    for (name, make) in op_catalog() {
        let err = worst_error(make, 20)?;
        check!(err <= 1e-4, "{name}: relative error {err:.3e}");
        if err > worst.0 {
            worst = (err, name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check!(secs < 300.0, "suite took {secs:.0} s");
    Ok(format!(
        "{} ops x 20 seeds, worst {:.2e} ({}), {secs:.1} s",
        op_catalog().len(),
        worst.0,
        worst.1
    ))
}

fn adjoint() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let cases = 200;
    for _ in 0..cases {
        let (n, c, f) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let mut d = [0usize; 3];
        let mut k = [0usize; 3];
        let mut s = [0usize; 3];
        let mut p = [0usize; 3];
        for a in 0..3 {
            d[a] = rng.random_range(2..=6);
            k[a] = rng.random_range(1..=3);
            s[a] = rng.random_range(1..=2);
            p[a] = rng.random_range(0..=1);
            // Make the stride tile the padded input so the transpose maps
            // back onto the full input extent.
            k[a] = k[a].min(d[a] + 2 * p[a]);
            d[a] -= (d[a] + 2 * p[a] - k[a]) % s[a];
            k[a] = k[a].min(d[a] + 2 * p[a]);
        }
        let spec = ConvSpec { stride: s, padding: p };
        let x = random_tensor(&[n, c, d[0], d[1], d[2]], &mut rng);
        let w = random_tensor(&[f, c, k[0], k[1], k[2]], &mut rng);
        let od = conv_output_dims(d, k, spec)?;
        let y = random_tensor(&[n, f, od[0], od[1], od[2]], &mut rng);
        let mut g = Graph::new();
        let xv = g.input(x.clone())?;
        let wv = g.input(w)?;
        let yv = g.input(y.clone())?;
        let conv = g.conv3d(xv, wv, None, spec)?;
        let lhs = g.value(conv).dot(&y)?;
        let back = g.conv_transpose3d(yv, wv, None, spec)?;
        check!(g.shape(back) == x.shape(), "transpose shape {:?} vs {:?}", g.shape(back), x.shape());
        let rhs = x.dot(g.value(back))?;
        let rel = (lhs - rhs).abs() / lhs.abs().max(1.0);
        check!(rel <= 1e-10, "<conv(x), y> = {lhs}, <x, conv^T(y)> = {rhs}");
        worst = worst.max(rel);
    }
    Ok(format!("{cases} random shapes, worst scaled gap {worst:.2e}"))
}

fn fid_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut self_worst: f64 = 0.0;
    for n in [1, 4, 16, 64] {
        let s = FeatureStats {
            mu: DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0)),
            sigma: random_psd(n, &mut rng),
            n: 100,
        };
        let v = fid(&s, &s)?;
        check!(v <= 1e-8, "fid(a, a) = {v:e} at d = {n}");
        self_worst = self_worst.max(v);
    }
    let a = fid(&one_d(0.0, 1.0), &one_d(1.0, 1.0))?;
    let b = fid(&one_d(0.0, 4.0), &one_d(0.0, 1.0))?;
    check!((a - 1.0).abs() <= 1e-6 && (b - 1.0).abs() <= 1e-6, "1-D cases {a} and {b}");
    let mut root_worst: f64 = 0.0;
    for n in [1, 2, 3, 8, 16, 32, 48, 64] {
        let m = random_psd(n, &mut rng);
        let diff = (sqrtm_psd(&m)? - sqrtm_newton_schulz(&m, 200, 1e-13)?).abs().max();
        check!(diff <= 1e-6, "square roots differ by {diff:e} at {n}x{n}");
        root_worst = root_worst.max(diff);
    }
    Ok(format!(
        "fid(a,a) <= {self_worst:.1e}, 1-D cases {a:.9} / {b:.9}, square roots agree to {root_worst:.1e} up to 64x64"
    ))
}

/// Double-loop biased MMD over plain vectors.
fn mmd_oracle(x: &DMatrix<f64>, y: &DMatrix<f64>, sigma: f64) -> f64 {
    let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> { m.row_iter().map(|r| r.iter().copied().collect()).collect() };
    let (x, y) = (rows(x), rows(y));
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
        (-d2 / (2.0 * sigma * sigma)).exp()
    };
    let mean = |s: &[Vec<f64>], t: &[Vec<f64>]| {
        let mut total = 0.0;
        for a in s {
            for b in t {
                total += k(a, b);
            }
        }
        total / (s.len() * t.len()) as f64
    };
    mean(&x, &x) + mean(&y, &y) - 2.0 * mean(&x, &y)
}

fn mmd_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for n in [1, 2, 5, 17, 32, 64] {
        for _ in 0..5 {
            let m = rng.random_range(1..=64);
            let f = rng.random_range(1..6);
            let sigma = rng.random_range(0.1..5.0);
            let x = gaussian_matrix(n, f, &mut rng);
            let y = gaussian_matrix(m, f, &mut rng).add_scalar(0.3);
            let got = mmd2(&x, &y, KernelSpec::gaussian(sigma), Estimator::Biased)?;
            let gap = (got - mmd_oracle(&x, &y, sigma)).abs();
            check!(gap <= 1e-10, "n = {n}, m = {m}: off by {gap:e}");
            worst = worst.max(gap);
        }
    }
    let x = gaussian_matrix(64, 8, &mut rng);
    let same = mmd2(&x, &x, KernelSpec::gaussian(1.0), Estimator::Biased)?;
    check!(same.abs() <= 1e-12, "identical samples give {same:e}");
    let two = mmd2(
        &DMatrix::from_element(1, 1, 0.0),
        &DMatrix::from_element(1, 1, 1.0),
        KernelSpec::gaussian(1.0),
        Estimator::Biased,
    )?;
    let expect = 2.0 - 2.0 * (-0.5f64).exp();
    check!((two - expect).abs() <= 1e-9, "two-point case {two} vs {expect}");
    check!((two - 0.786939).abs() <= 1e-6, "two-point case {two}");
    Ok(format!(
        "oracle gap <= {worst:.1e} for n <= 64, identical {same:.1e}, two-point {two:.9}"
    ))
}

fn slab_equivalence() -> Outcome {
    let b32 = ModelBundle::<f32>::new(ModelConfig::desk_64(), Variant::CrfGan)?;
    let z = b32.sample_latent(2, &mut ChaCha8Rng::seed_from_u64(5));
    let d32 = b32.generate_full(&z)?.max_abs_diff(&b32.generate_stitched(&z)?)?;
    check!(d32 <= 1e-5, "f32 max abs diff {d32:e}");
    let b64 = ModelBundle::<f64>::new(ModelConfig::desk_64(), Variant::CrfGan)?;
    let z = b64.sample_latent(1, &mut ChaCha8Rng::seed_from_u64(6));
    let d64 = b64.generate_full(&z)?.max_abs_diff(&b64.generate_stitched(&z)?)?;
    check!(d64 <= 1e-10, "f64 max abs diff {d64:e}");
    Ok(format!("64^3 stitched vs full: f32 {d32:.1e}, f64 {d64:.1e}"))
}

fn memory_ordering() -> Outcome {
    let cfg = ModelConfig::desk_64();
    let full = ModelConfig {
        slab_count: 1,
        ..cfg.clone()
    };
    let vols = phantoms(0..4, 64)?;
    let peak = |model: &ModelConfig, variant: Variant, batch: usize| -> Result<usize, Box<dyn Error>> {
        let train = TrainConfig {
            batch_size: batch,
            seed: 71,
            ..TrainConfig::default()
        };
        Ok(measure_peak_memory::<f32, _>(model, variant, &train, &mut pool(&vols)?, 2)?.peak_bytes)
    };
    let mut parts = Vec::new();
    for batch in [2, 4] {
        let crf = peak(&cfg, Variant::CrfGan, batch)?;
        let base = peak(&cfg, Variant::HaGanLite, batch)?;
        let whole = peak(&full, Variant::CrfGan, batch)?;
        let vs_base = 1.0 - crf as f64 / base as f64;
        let vs_full = 1.0 - crf as f64 / whole as f64;
        check!(vs_base >= 0.05, "batch {batch}: crf {crf} B vs baseline {base} B ({:.1}%)", 100.0 * vs_base);
        check!(vs_full >= 0.05, "batch {batch}: slab {crf} B vs full {whole} B ({:.1}%)", 100.0 * vs_full);
        parts.push(format!(
            "batch {batch}: crf {:.1} MiB, {:.1}% below baseline, {:.1}% below full volume",
            crf as f64 / (1 << 20) as f64,
            100.0 * vs_base,
            100.0 * vs_full
        ));
    }
    Ok(parts.join("; "))
}

fn parameter_counts() -> Outcome {
    let mut parts = Vec::new();
    for cfg in [ModelConfig::desk_32(), ModelConfig::desk_64()] {
        let crf = ModelBundle::<f32>::new(cfg.clone(), Variant::CrfGan)?.count_parameters();
        let again = ModelBundle::<f32>::new(cfg.clone(), Variant::CrfGan)?.count_parameters();
        let base = ModelBundle::<f32>::new(cfg.clone(), Variant::HaGanLite)?.count_parameters();
        check!(crf == again, "counts differ between builds");
        check!(crf.total == crf.per_network.values().sum::<usize>(), "total is not the per-network sum");
        check!(crf.total < base.total, "{}^3: crf {} vs baseline {}", cfg.resolution, crf.total, base.total);
        parts.push(format!("{}^3: crf {} < baseline {}", cfg.resolution, crf.total, base.total));
    }
    Ok(parts.join(", "))
}

fn throughput() -> Outcome {
    let cfg = ModelConfig::desk_64();
    let vols = phantoms(0..8, 64)?;
    let rate = |variant: Variant| -> Result<f64, Box<dyn Error>> {
        let train = TrainConfig {
            batch_size: 2,
            seed: 8,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(ModelBundle::<f32>::new(cfg.clone(), variant)?, train)?;
        Ok(measure_throughput(&mut trainer, &mut pool::<f32>(&vols)?, 5, 1000, 4)?.iters_per_sec)
    };
    let crf = rate(Variant::CrfGan)?;
    let base = rate(Variant::HaGanLite)?;
    let margin = crf / base - 1.0;
    check!(margin >= 0.05, "crf {crf:.3} it/s vs baseline {base:.3} it/s ({:+.1}%)", 100.0 * margin);
    Ok(format!(
        "64^3 batch 2, 1000 steps: crf {crf:.3} it/s, baseline {base:.3} it/s ({:+.1}%)",
        100.0 * margin
    ))
}

/// Intensity features of 64 volumes generated from a fixed latent stream.
fn generated_features(
    bundle: &ModelBundle<f32>,
    extractor: &IntensityExtractor,
) -> Result<DMatrix<f64>, Box<dyn Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(999);
    let mut vols = Vec::with_capacity(64);
    for _ in 0..64 {
        let z = bundle.sample_latent(1, &mut rng);
        vols.push(Volume::from_tensor(&bundle.generate_full(&z)?, IntensityDomain::Normalized)?);
    }
    Ok(extract_features(&vols, extractor)?)
}

/// Per seed, the kernel bandwidth is the median pairwise distance over the
/// held-out and untrained-model features pooled, and stays fixed for the
/// trained model so both MMD values use the same kernel.
fn training_efficacy() -> Outcome {
    let start = Instant::now();
    let train = phantoms(0..200, 32)?;
    let extractor = IntensityExtractor::default();
    let held = extract_features(&phantoms(10_000..10_064, 32)?, &extractor)?;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let model = ModelConfig {
            seed,
            ..ModelConfig::desk_32()
        };
        let bundle = ModelBundle::<f32>::new(model, Variant::CrfGan)?;
        let untrained = generated_features(&bundle, &extractor)?;
        let kernel = KernelSpec::gaussian(median_bandwidth(&held, &untrained)?);
        let before = mmd2(&held, &untrained, kernel, Estimator::Biased)?;
        let config = TrainConfig {
            seed,
            lr_g: 2e-4,
            lr_d: 2e-4,
            non_saturating: true,
            adam_betas: [0.5, 0.999],
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(bundle, config)?;
        trainer.run(&mut pool(&train)?, 2000)?;
        check!(
            trainer.history.iter().all(|h| h.l_total.is_finite() && h.g_adversarial.is_finite()),
            "seed {seed}: non-finite loss"
        );
        let after = mmd2(&held, &generated_features(&trainer.bundle, &extractor)?, kernel, Estimator::Biased)?;
        let reduction = 1.0 - after / before;
        check!(reduction >= 0.30, "seed {seed}: MMD {before:.4} -> {after:.4} ({:.1}%)", 100.0 * reduction);
        parts.push(format!("seed {seed}: {before:.3} -> {after:.3} (-{:.0}%)", 100.0 * reduction));
    }
    let secs = start.elapsed().as_secs_f64();
    check!(secs <= 7200.0, "took {secs:.0} s");
    Ok(format!("{}, {:.0} s", parts.join(", "), secs))
}

fn preprocessing() -> Outcome {
    let window = [-1024.0, 600.0];
    for (hu, want) in [(-1024.0, -1.0), (600.0, 1.0), (-212.0, 0.0)] {
        let got = hu_to_normalized(hu, window);
        check!((got - want).abs() <= 1e-12, "{hu} HU maps to {got}");
    }
    let dir = tempfile::tempdir()?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let voxels = (0..60).map(|_| rng.random_range(-2000.0f64..3000.0).round()).collect();
    let v = Volume::new([3, 4, 5], [2.5, 0.703125, 0.703125], IntensityDomain::Hu, voxels)?;
    let (a, b) = (dir.path().join("a.mhd"), dir.path().join("b.mhd"));
    write_metaimage(&v, &a, ElementType::Short)?;
    let back = read_metaimage(&a)?;
    check!(back == v, "round trip changed the volume");
    write_metaimage(&back, &b, ElementType::Short)?;
    check!(
        std::fs::read(dir.path().join("a.raw"))? == std::fs::read(dir.path().join("b.raw"))?,
        "raw payload is not byte-stable"
    );
    check!(
        std::fs::read_to_string(&a)? == std::fs::read_to_string(&b)?.replace("b.raw", "a.raw"),
        "header is not byte-stable"
    );
    let items: Vec<u32> = (0..888).collect();
    let (tr, va) = split_dataset(&items, 0.9, 7)?;
    check!((tr.len(), va.len()) == (800, 88), "split {} / {}", tr.len(), va.len());
    Ok("window endpoints exact, MetaImage round trip byte-stable, 888 -> 800/88".into())
}

fn chi_square() -> Outcome {
    let r = chi_square_preference(215, 145)?;
    check!((r.statistic - 13.611).abs() <= 1e-3, "statistic {}", r.statistic);
    check!((r.p_value - 2.26e-4).abs() <= 1e-5, "p {}", r.p_value);
    let p05 = chi2_sf(3.841, 1);
    check!((p05 - 0.05).abs() <= 1e-3, "sf(3.841) = {p05}");
    let f = fixture(10, 30);
    let rater = SimulatedRater {
        detect_prob: 0.6,
        preferred_model: MODEL_A.into(),
        preference: 0.597,
        likert_weights: [1.0, 2.0, 3.0, 2.0, 1.0],
    };
    run_simulated_raters(&f.service, &f.study_id, 12, &rater, 2024)?;
    let report = f.service.report(&f.study_id)?;
    let a = report.section2.totals[MODEL_A];
    let b = report.section2.totals[MODEL_B];
    let sigma = (360.0f64 * 0.597 * 0.403).sqrt();
    check!(a + b == 360, "{} section 2 votes", a + b);
    check!((a as f64 - 215.0).abs() <= 3.0 * sigma, "simulated totals {a}/{b}");
    Ok(format!(
        "chi2 {:.4}, p {:.4e}, sf(3.841) {p05:.5}, 12 simulated raters {a}/{b}",
        r.statistic, r.p_value
    ))
}

fn blinding_and_balance() -> Outcome {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()?
        .block_on(api::full_session_walk());
    let f = fixture(10, 30);
    let n = 10_000;
    for i in 0..n {
        let s = f.service.create_session(&f.study_id, &format!("r{i}"), None)?;
        vote_all(&f.service, &s.session_id, Side::Left);
    }
    let report = f.service.report(&f.study_id)?;
    let mut rates: Vec<f64> = Vec::new();
    for t in &report.section1.per_pair {
        rates.extend([t.votes_real, t.votes_synthetic].map(|c| c as f64 / n as f64));
    }
    for t in &report.section2.per_pair {
        rates.extend([t.votes_a, t.votes_b].map(|c| c as f64 / n as f64));
    }
    let lo = rates.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    check!(lo >= 0.48 && hi <= 0.52, "left placement rates span [{lo:.4}, {hi:.4}]");
    Ok(format!(
        "schema walk clean, left placement in [{lo:.4}, {hi:.4}] over {n} sessions, no UI required"
    ))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 12] = [
        (1, "gradient correctness", gradients),
        (2, "conv adjoint identity", adjoint),
        (3, "FID oracles", fid_oracles),
        (4, "MMD oracles", mmd_oracles),
        (5, "slab equivalence", slab_equivalence),
        (6, "peak memory ordering", memory_ordering),
        (7, "parameter count ordering", parameter_counts),
        (8, "throughput ordering", throughput),
        (9, "training efficacy", training_efficacy),
        (10, "preprocessing exactness", preprocessing),
        (11, "chi-square statistics", chi_square),
        (12, "study blinding and balance", blinding_and_balance),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(run)) {
            Ok(Ok(detail)) => Ok(detail),
            Ok(Err(e)) => Err(e.to_string()),
            Err(panic) => Err(panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} [{secs:.1} s]"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {id:>2} {name}: {reason} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
