#![allow(dead_code)]

pub mod api;

use std::sync::Arc;

use crfgan_core::data::{IntensityDomain, Volume};
use crfgan_study::{
    ImageLibrary, ManualClock, ModelPair, NextPair, Plane, RealPair, Side, StudyDefinition, StudyService,
    SyntheticImage, View, VoteRequest,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EDGE: usize = 8;
pub const MODEL_A: &str = "crf";
pub const MODEL_B: &str = "base";

fn random_volume(rng: &mut ChaCha8Rng) -> Volume {
    let voxels = (0..EDGE * EDGE * EDGE).map(|_| rng.random_range(-1.0..1.0)).collect();
    Volume::new([EDGE; 3], [1.0; 3], IntensityDomain::Normalized, voxels).unwrap()
}

/// `n1` real volumes, and `n1 + n2` volumes per model, all random noise.
pub fn library(n1: usize, n2: usize) -> ImageLibrary {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut lib = ImageLibrary::new();
    for i in 0..n1 {
        lib.insert(format!("real_{i:02}"), random_volume(&mut rng));
    }
    for m in [MODEL_A, MODEL_B] {
        for i in 0..n1 + n2 {
            lib.insert(format!("{m}_{i:02}"), random_volume(&mut rng));
        }
    }
    lib
}

fn synth(model: &str, i: usize) -> SyntheticImage {
    SyntheticImage {
        model: model.into(),
        volume: format!("{model}_{i:02}"),
    }
}

/// Section 1 alternates the two models against real volumes; section 2
/// pits model A against model B. Views cycle through planes and slices.
pub fn definition(n1: usize, n2: usize) -> StudyDefinition {
    let view = |i: usize| View {
        plane: Plane::ALL[i % 3],
        slice: i % EDGE,
    };
    let s1 = (0..n1)
        .map(|i| RealPair {
            real: format!("real_{i:02}"),
            synthetic: synth(if i % 2 == 0 { MODEL_A } else { MODEL_B }, i),
            view: view(i),
        })
        .collect();
    let s2 = (0..n2)
        .map(|j| ModelPair {
            a: synth(MODEL_A, n1 + j),
            b: synth(MODEL_B, n1 + j),
            view: view(j + 1),
        })
        .collect();
    StudyDefinition::new("fixture", s1, s2)
}

pub struct Fixture {
    pub service: Arc<StudyService>,
    pub clock: Arc<ManualClock>,
    pub study_id: String,
}

pub fn fixture(n1: usize, n2: usize) -> Fixture {
    let clock = Arc::new(ManualClock::new(1_000_000));
    let service = Arc::new(StudyService::in_memory(Arc::new(library(n1, n2)), clock.clone(), 7));
    let study_id = service.create_study(definition(n1, n2)).unwrap().study_id;
    Fixture {
        service,
        clock,
        study_id,
    }
}

/// Answers every remaining pair with `side` (Likert 3 where required).
pub fn vote_all(service: &StudyService, session_id: &str, side: Side) -> usize {
    let mut n = 0;
    while let Some((token, section)) = service.next_pair_token(session_id).unwrap() {
        service
            .submit_vote(
                session_id,
                VoteRequest {
                    pair_token: token,
                    side,
                    likert: (section == 1).then_some(3),
                    latency_ms: Some(1000),
                },
            )
            .unwrap();
        n += 1;
    }
    n
}

pub fn current(service: &StudyService, session_id: &str) -> crfgan_study::PairPayload {
    match service.next_pair(session_id).unwrap() {
        NextPair::Pair(p) => p,
        other => panic!("expected a pair, got {other:?}"),
    }
}
