//! Simulated raters for end-to-end runs without people.

use rand::distr::{Distribution, weighted::WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::service::{Side, Source, StudyService, VoteRequest};

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedRater {
    /// Probability of picking the real image in section 1.
    pub detect_prob: f64,
    /// Model favoured in section 2 and the probability of choosing it when
    /// it is one of the two images.
    pub preferred_model: String,
    pub preference: f64,
    /// Relative weights of Likert levels 1 through 5.
    pub likert_weights: [f64; 5],
}

impl SimulatedRater {
    fn choose<R: Rng>(&self, left: &Source, right: &Source, rng: &mut R) -> Side {
        let pick = |favour_left: bool, p: f64, rng: &mut R| {
            if rng.random_bool(p) == favour_left {
                Side::Left
            } else {
                Side::Right
            }
        };
        let preferred = Source::Model(self.preferred_model.clone());
        if *left == Source::Real || *right == Source::Real {
            pick(*left == Source::Real, self.detect_prob, rng)
        } else if *left == preferred || *right == preferred {
            pick(*left == preferred, self.preference, rng)
        } else {
            pick(true, 0.5, rng)
        }
    }
}

/// Runs `raters` complete sessions (rater ids `sim-000`, ...) and returns
/// their session ids. Session `i` uses schedule seed `seed + i`.
pub fn run_simulated_raters(
    service: &StudyService,
    study_id: &str,
    raters: usize,
    rater: &SimulatedRater,
    seed: u64,
) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let likert = WeightedIndex::new(rater.likert_weights).map_err(|e| crate::StudyError::Validation(e.to_string()))?;
    let mut ids = Vec::with_capacity(raters);
    for i in 0..raters {
        let created = service.create_session(study_id, &format!("sim-{i:03}"), Some(seed.wrapping_add(i as u64)))?;
        let id = created.session_id;
        loop {
            let token = match service.next_pair_token(&id)? {
                Some(t) => t,
                None => break,
            };
            let (left, right) = service.hidden_sources(&id, &token.0)?;
            let side = rater.choose(&left, &right, &mut rng);
            let likert = (token.1 == 1).then(|| likert.sample(&mut rng) as u8 + 1);
            service.submit_vote(
                &id,
                VoteRequest {
                    pair_token: token.0,
                    side,
                    likert,
                    latency_ms: Some(rng.random_range(800..6000)),
                },
            )?;
        }
        ids.push(id);
    }
    Ok(ids)
}
