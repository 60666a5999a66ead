//! FID and MMD against closed forms and brute-force oracles, plus the
//! feature extractors and the evaluation report.

use crfgan_core::data::{make_phantom, preprocess, IntensityDomain, PhantomSpec, PreprocessConfig, Volume};
use crfgan_core::metrics::{
    evaluate_models, extract_features, fid, fid_with, fit_stats, median_bandwidth, mmd2, EncoderExtractor, Estimator,
    FeatureExtractor, FeatureStats, IntensityExtractor, KernelSpec, MetricsError, NamedSet,
};
use crfgan_core::metrics::{sqrtm_newton_schulz, sqrtm_psd, SqrtMethod};
use crfgan_core::models::{ModelBundle, ModelConfig, Network, Variant};
use crfgan_core::tensor::Tensor;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random PSD matrix `X X^T / k` with `k = 2n` columns (full rank).
fn random_psd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let x = gaussian_matrix(n, 2 * n, rng);
    &x * x.transpose() / (2 * n) as f64
}

fn stats(mu: Vec<f64>, sigma: DMatrix<f64>) -> FeatureStats {
    FeatureStats {
        mu: DVector::from_vec(mu),
        sigma,
        n: 100,
    }
}

fn one_d(mu: f64, var: f64) -> FeatureStats {
    stats(vec![mu], DMatrix::from_element(1, 1, var))
}

#[test]
fn fit_stats_two_points() {
    let f = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 2.0]);
    let s = fit_stats(&f).unwrap();
    assert_eq!(s.mu.as_slice(), &[1.0, 1.0]);
    assert_eq!(s.sigma, DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 2.0, 2.0]));
    assert_eq!(s.n, 2);
}

#[test]
fn fit_stats_constant_sample_and_symmetry() {
    let f = DMatrix::from_fn(5, 3, |_, j| j as f64 - 0.25);
    assert_eq!(fit_stats(&f).unwrap().sigma, DMatrix::zeros(3, 3));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = gaussian_matrix(40, 7, &mut rng);
    let s = fit_stats(&g).unwrap();
    assert_eq!(s.sigma, s.sigma.transpose());
    assert!(matches!(
        fit_stats(&DMatrix::zeros(1, 3)),
        Err(MetricsError::InsufficientSamples { need: 2, got: 1 })
    ));
}

#[test]
fn fid_one_dimensional_closed_forms() {
    assert!((fid(&one_d(0.0, 1.0), &one_d(1.0, 1.0)).unwrap() - 1.0).abs() <= 1e-6);
    assert!((fid(&one_d(0.0, 4.0), &one_d(0.0, 1.0)).unwrap() - 1.0).abs() <= 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let (m1, m2): (f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let (s1, s2): (f64, f64) = (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
        let expect = (m1 - m2).powi(2) + (s1 - s2).powi(2);
        let got = fid(&one_d(m1, s1 * s1), &one_d(m2, s2 * s2)).unwrap();
        assert!((got - expect).abs() <= 1e-9 * expect.max(1.0));
    }
}

#[test]
fn fid_commuting_covariances_match_the_diagonal_closed_form() {
    // For covariances sharing eigenvectors Q, FID = |dmu|^2 + sum (sqrt(a_i) - sqrt(b_i))^2.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [2, 5, 16] {
        let q = gaussian_matrix(n, n, &mut rng).qr().q();
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
        let mk = |d: &[f64]| &q * DMatrix::from_diagonal(&DVector::from_column_slice(d)) * q.transpose();
        let mu_a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mu_b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let expect: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
            + a.iter().zip(&b).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum::<f64>();
        let got = fid(&stats(mu_a, mk(&a)), &stats(mu_b, mk(&b))).unwrap();
        assert!((got - expect).abs() <= 1e-8 * expect.max(1.0), "n={n}: {got} vs {expect}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fid_is_zero_on_identical_stats_and_symmetric(seed in any::<u64>(), n in 1usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = stats((0..n).map(|_| rng.random_range(-2.0..2.0)).collect(), random_psd(n, &mut rng));
        let b = stats((0..n).map(|_| rng.random_range(-2.0..2.0)).collect(), random_psd(n, &mut rng));
        prop_assert!(fid(&a, &a).unwrap() <= 1e-8);
        let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0));
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn mmd_matches_the_brute_force_oracle(seed in any::<u64>(), n in 1usize..=64, m in 1usize..=64, f in 1usize..6, sigma in 0.1f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian_matrix(n, f, &mut rng);
        let y = gaussian_matrix(m, f, &mut rng).add_scalar(0.3);
        let xs: Vec<Vec<f64>> = x.row_iter().map(|r| r.iter().copied().collect()).collect();
        let ys: Vec<Vec<f64>> = y.row_iter().map(|r| r.iter().copied().collect()).collect();
        let got = mmd2(&x, &y, KernelSpec::gaussian(sigma), Estimator::Biased).unwrap();
        let expect = oracle(&xs, &ys, sigma, false);
        prop_assert!((got - expect).abs() <= 1e-10, "{} vs {}", got, expect);
        if n >= 2 && m >= 2 {
            let got = mmd2(&x, &y, KernelSpec::gaussian(sigma), Estimator::Unbiased).unwrap();
            prop_assert!((got - oracle(&xs, &ys, sigma, true)).abs() <= 1e-10);
        }
    }
}

/// Independent double-loop MMD over plain vectors.
fn oracle(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64, unbiased: bool) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
        (-d2 / (2.0 * sigma * sigma)).exp()
    };
    let mean_within = |s: &[Vec<f64>]| {
        let mut total = 0.0;
        let mut count = 0.0;
        for (i, a) in s.iter().enumerate() {
            for (j, b) in s.iter().enumerate() {
                if unbiased && i == j {
                    continue;
                }
                total += k(a, b);
                count += 1.0;
            }
        }
        total / count
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += k(a, b);
        }
    }
    mean_within(x) + mean_within(y) - 2.0 * cross / (x.len() * y.len()) as f64
}

#[test]
fn mmd_two_point_case() {
    let x = DMatrix::from_element(1, 1, 0.0);
    let y = DMatrix::from_element(1, 1, 1.0);
    let got = mmd2(&x, &y, KernelSpec::gaussian(1.0), Estimator::Biased).unwrap();
    let expect = 2.0 - 2.0 * (-0.5f64).exp();
    assert!((got - expect).abs() <= 1e-9);
    assert!((got - 0.786939).abs() <= 1e-6);
}

#[test]
fn mmd_of_a_sample_with_itself_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in [1, 5, 64] {
        let x = gaussian_matrix(n, 3, &mut rng);
        assert!(mmd2(&x, &x, KernelSpec::gaussian(0.7), Estimator::Biased).unwrap().abs() <= 1e-12);
        if n > 1 {
            assert!(mmd2(&x, &x, KernelSpec::median(), Estimator::Biased).unwrap().abs() <= 1e-12);
        }
    }
}

#[test]
fn unbiased_mmd_is_centred_under_the_null() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vals: Vec<f64> = (0..200)
        .map(|_| {
            let x = gaussian_matrix(20, 3, &mut rng);
            let y = gaussian_matrix(20, 3, &mut rng);
            mmd2(&x, &y, KernelSpec::gaussian(1.5), Estimator::Unbiased).unwrap()
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
    let stderr = sd / (vals.len() as f64).sqrt();
    assert!(mean.abs() < 3.0 * stderr, "mean {mean} stderr {stderr}");
}

#[test]
fn mmd_argument_errors() {
    let x = DMatrix::from_element(3, 2, 0.5);
    let y = DMatrix::from_element(3, 2, 0.1);
    for s in [0.0, -1.0, f64::NAN] {
        assert!(matches!(mmd2(&x, &y, KernelSpec::gaussian(s), Estimator::Biased), Err(MetricsError::InvalidBandwidth(_))));
    }
    let one = DMatrix::from_element(1, 2, 0.0);
    assert!(mmd2(&one, &y, KernelSpec::gaussian(1.0), Estimator::Unbiased).is_err());
    assert!(mmd2(&x, &DMatrix::zeros(3, 3), KernelSpec::gaussian(1.0), Estimator::Biased).is_err());
    // Every point identical: the median distance is 0.
    assert!(matches!(mmd2(&x, &x, KernelSpec::median(), Estimator::Biased), Err(MetricsError::InvalidBandwidth(_))));
}

#[test]
fn median_bandwidth_of_known_points() {
    let x = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
    let y = DMatrix::from_column_slice(1, 1, &[3.0]);
    // Distances 1, 3, 2: median 2.
    assert_eq!(median_bandwidth(&x, &y).unwrap(), 2.0);
}

#[test]
fn square_root_routes_agree_on_random_psd_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for n in [1, 2, 3, 8, 16, 32, 48, 64] {
        let a = random_psd(n, &mut rng);
        let e = sqrtm_psd(&a).unwrap();
        let ns = sqrtm_newton_schulz(&a, 200, 1e-13).unwrap();
        let diff = (&e - &ns).abs().max();
        assert!(diff <= 1e-6, "n={n}: routes differ by {diff}");
        assert!((&e * &e - &a).abs().max() <= 1e-9);
    }
}

#[test]
fn fid_routes_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in [2, 10, 32, 64] {
        let a = stats(vec![0.1; n], random_psd(n, &mut rng));
        let b = stats(vec![-0.2; n], random_psd(n, &mut rng));
        let e = fid_with(&a, &b, SqrtMethod::Eigen).unwrap();
        let ns = fid_with(&a, &b, SqrtMethod::NewtonSchulz).unwrap();
        assert!((e - ns).abs() <= 1e-6 * e.max(1.0), "n={n}: {e} vs {ns}");
    }
}

#[test]
fn newton_schulz_reports_non_convergence() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_psd(16, &mut rng);
    match sqrtm_newton_schulz(&a, 2, 1e-14) {
        Err(MetricsError::Numerical { residual, .. }) => assert!(residual > 1e-14),
        other => panic!("expected a numerical error, got {other:?}"),
    }
}

#[test]
fn fid_rejects_indefinite_covariances_and_mismatched_dims() {
    let bad = stats(vec![0.0, 0.0], DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]));
    assert!(matches!(fid(&bad, &bad), Err(MetricsError::Numerical { .. })));
    assert!(matches!(fid(&one_d(0.0, 1.0), &bad), Err(MetricsError::DimensionMismatch(1, 2))));
}

#[test]
fn fid_grows_with_added_isotropic_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = gaussian_matrix(8, 8, &mut rng);
    let real = gaussian_matrix(2000, 8, &mut rng) * &base;
    let noise = gaussian_matrix(2000, 8, &mut rng);
    let real_stats = fit_stats(&real).unwrap();
    let scores: Vec<f64> = [0.0, 0.1, 0.2, 0.5]
        .iter()
        .map(|&tau| fid(&real_stats, &fit_stats(&(&real + &noise * tau)).unwrap()).unwrap())
        .collect();
    assert!(scores[0] <= 1e-8);
    for w in scores.windows(2) {
        assert!(w[1] >= w[0], "{scores:?}");
    }
}

fn phantoms(seeds: std::ops::Range<u64>) -> Vec<Volume> {
    seeds
        .map(|seed| {
            let p = make_phantom(&PhantomSpec { seed, ..PhantomSpec::default() }).unwrap();
            preprocess(&p.volume, &PreprocessConfig::default()).unwrap()
        })
        .collect()
}

#[test]
fn intensity_extractor_contract() {
    let ex = IntensityExtractor::default();
    assert_eq!(ex.dim(), 64 + 16 + 3);
    let vols = phantoms(0..3);
    let twice = vec![vols[0].clone(), vols[0].clone(), vols[1].clone()];
    let f = extract_features(&twice, &ex).unwrap();
    assert_eq!(f.shape(), (3, ex.dim()));
    assert_eq!(f.row(0), f.row(1));
    assert_ne!(f.row(0), f.row(2));
    assert_eq!(extract_features(&twice, &ex).unwrap(), f);
    let hist_sum: f64 = f.row(0).columns(64, 16).sum();
    assert!((hist_sum - 1.0).abs() < 1e-12);
    let c = Volume::filled([8, 8, 8], IntensityDomain::Normalized, 0.25).unwrap();
    let fc = ex.extract(&c).unwrap();
    assert!(fc[..64].iter().all(|&v| v == 0.25));
    assert_eq!(&fc[80..], &[0.0, 0.0, 0.0]);
    assert!(ex.extract(&Volume::filled([2, 8, 8], IntensityDomain::Normalized, 0.0).unwrap()).is_err());
    assert_eq!(ex.fingerprint(), IntensityExtractor::default().fingerprint());
    assert_ne!(ex.fingerprint(), IntensityExtractor { grid: 2, bins: 16 }.fingerprint());
}

#[test]
fn encoder_extractor_contract() {
    let bundle = ModelBundle::<f64>::new(ModelConfig::desk_32(), Variant::CrfGan).unwrap();
    let ex = EncoderExtractor::new(bundle);
    assert_eq!(ex.dim(), 8 * 8);
    let vols = phantoms(0..2);
    let f = extract_features(&[vols[0].clone(), vols[0].clone(), vols[1].clone()], &ex).unwrap();
    assert_eq!(f.shape(), (3, 64));
    assert_eq!(f.row(0), f.row(1));
    assert_ne!(f.row(0), f.row(2));
    assert!(matches!(
        ex.extract(&Volume::filled([16, 16, 16], IntensityDomain::Normalized, 0.0).unwrap()),
        Err(MetricsError::Extractor(_))
    ));
    // The fingerprint follows the encoder weights.
    let same = EncoderExtractor::new(ModelBundle::<f64>::new(ModelConfig::desk_32(), Variant::CrfGan).unwrap());
    assert_eq!(same.fingerprint(), ex.fingerprint());
    let mut other = ModelBundle::<f64>::new(ModelConfig::desk_32(), Variant::CrfGan).unwrap();
    let id = other.store.trainable_ids_with_prefix(Network::He.prefix())[0];
    let mut v: Tensor<f64> = other.store.value(id).clone();
    v.data_mut()[0] += 1.0;
    other.store.set(id, v).unwrap();
    assert_ne!(EncoderExtractor::new(other).fingerprint(), ex.fingerprint());
}

#[test]
fn evaluation_of_real_against_itself_is_zero_and_reproducible() {
    let real = phantoms(0..12);
    let other = phantoms(100..112);
    let models = vec![
        NamedSet { name: "copy".into(), volumes: real.clone() },
        NamedSet { name: "other".into(), volumes: other },
    ];
    let ex = IntensityExtractor::default();
    let run = || evaluate_models(&real, &models, &ex, 12, KernelSpec::median(), Estimator::Biased).unwrap();
    let r = run();
    assert_eq!(r.models.len(), 2);
    assert!(r.models[0].fid <= 1e-8 && r.models[0].mmd2.abs() <= 1e-12);
    assert!(r.models[1].fid > 0.0 && r.models[1].mmd2 > 0.0);
    assert_eq!(r.models[0].inputs_sha256, r.real_sha256);
    assert_eq!(r.extractor.fingerprint, ex.fingerprint());
    assert!(r.bandwidth > 0.0);
    assert_eq!(run(), r);
    assert!(matches!(
        evaluate_models(&real, &models, &ex, 13, KernelSpec::median(), Estimator::Biased),
        Err(MetricsError::InsufficientSamples { need: 13, got: 12 })
    ));
}
