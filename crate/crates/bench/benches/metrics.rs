use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use crfgan_core::metrics::{fid, fit_stats, mmd2, sqrtm_newton_schulz, sqrtm_psd, Estimator, KernelSpec};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn features(n: usize, d: usize, shift: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0) + shift)
}

fn distances(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("distance");
    for d in [16usize, 64] {
        let a = features(128, d, 0.0, &mut rng);
        let b = features(128, d, 0.1, &mut rng);
        let (sa, sb) = (fit_stats(&a).unwrap(), fit_stats(&b).unwrap());
        group.bench_with_input(BenchmarkId::new("fid", d), &d, |bch, _| bch.iter(|| fid(&sa, &sb).unwrap()));
        group.bench_with_input(BenchmarkId::new("mmd2_unbiased", d), &d, |bch, _| {
            bch.iter(|| mmd2(&a, &b, KernelSpec::gaussian(1.0), Estimator::Unbiased).unwrap())
        });
    }
    group.finish();
}

fn square_roots(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = features(96, 64, 0.0, &mut rng);
    let psd = x.transpose() * &x / 96.0;
    let mut group = c.benchmark_group("sqrtm_64");
    group.bench_function("eigen", |b| b.iter(|| sqrtm_psd(&psd).unwrap()));
    group.bench_function("newton_schulz", |b| b.iter(|| sqrtm_newton_schulz(&psd, 200, 1e-10).unwrap()));
    group.finish();
}

criterion_group!(benches, distances, square_roots);
criterion_main!(benches);
