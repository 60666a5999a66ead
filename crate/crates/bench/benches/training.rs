use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use crfgan_core::training::{TrainConfig, Trainer};
use crfgan_core::{ModelBundle, ModelConfig, Tensor, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn train_step(c: &mut Criterion) {
    let cfg = ModelConfig::desk_32();
    let r = cfg.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("train_step_32");
    group.sample_size(20);
    for variant in [Variant::CrfGan, Variant::HaGanLite] {
        let real = Tensor::<f32>::from_vec(
            &[2, 1, r, r, r],
            (0..2 * r * r * r).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let bundle = ModelBundle::<f32>::new(cfg.clone(), variant).unwrap();
        let mut trainer = Trainer::new(bundle, TrainConfig::default()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(variant.label()), &variant, |b, _| {
            b.iter(|| trainer.train_step(&real).unwrap())
        });
    }
    group.finish();
}

fn generation(c: &mut Criterion) {
    let bundle = ModelBundle::<f32>::new(ModelConfig::desk_64(), Variant::CrfGan).unwrap();
    let z = bundle.sample_latent(1, &mut ChaCha8Rng::seed_from_u64(1));
    let mut group = c.benchmark_group("generate_64");
    group.sample_size(10);
    group.bench_function("full", |b| b.iter(|| bundle.generate_full(&z).unwrap()));
    group.bench_function("stitched", |b| b.iter(|| bundle.generate_stitched(&z).unwrap()));
    group.finish();
}

criterion_group!(benches, train_step, generation);
criterion_main!(benches);
