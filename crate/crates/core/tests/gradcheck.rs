//! Central finite-difference gradient checks for every differentiable op,
//! at 64-bit over randomized shapes and seeds.

use crfgan_core::tensor::conv::ConvSpec;
use crfgan_core::tensor::gradcheck::{op_catalog, random_tensor, relative_error, worst_error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

#[test]
fn every_op_matches_central_differences() {
    for (name, make) in op_catalog() {
        let worst = worst_error(make, SEEDS).unwrap();
        eprintln!("{name}: worst relative error {worst:e} over {SEEDS} seeds");
        assert!(worst <= TOL, "{name}: relative error {worst:e}");
    }
}

#[test]
fn conv3d_reference_case() {
    // 1x2x4x4x4 input, 3x2x3x3x3 weight, stride 1, pad 1
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = random_tensor(&[1, 2, 4, 4, 4], &mut rng, -1.0, 1.0);
    let w = random_tensor(&[3, 2, 3, 3, 3], &mut rng, -1.0, 1.0);
    let err = relative_error(&[x, w], &|g, v| g.conv3d(v[0], v[1], None, ConvSpec::uniform(1, 1)), 99).unwrap();
    assert!(err <= TOL, "{err:e}");
}

#[test]
fn a_wrong_gradient_is_detected() {
    // A central difference straddling the relu kink averages the two
    // one-sided slopes, so it must disagree with the analytic gradient.
    let x = crfgan_core::Tensor::from_vec(&[3], vec![1e-7, -2.0, 0.5]).unwrap();
    let err = relative_error(&[x], &|g, v| g.relu(v[0]), 0).unwrap();
    assert!(err > TOL, "a finite difference across the kink must disagree, got {err:e}");
}
