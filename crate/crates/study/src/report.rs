//! Descriptive statistics over completed sessions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::definition::StudyDefinition;
use crate::error::Result;
use crate::service::{Session, Side};
use crate::stats::{chi_square_preference, ChiSquare};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDetection {
    pub votes: u64,
    /// Votes that picked the real image over this model's image.
    pub correct: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealPairTally {
    /// Index into the definition's section 1 list.
    pub pair: usize,
    pub model: String,
    pub votes_real: u64,
    pub votes_synthetic: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section1Report {
    pub pairs: usize,
    pub votes: u64,
    pub correct: u64,
    pub accuracy: Option<f64>,
    /// Counts of Likert levels 1 through 5.
    pub likert_histogram: [u64; 5],
    pub likert_histogram_correct: [u64; 5],
    pub mean_likert: Option<f64>,
    pub by_model: BTreeMap<String, ModelDetection>,
    pub per_pair: Vec<RealPairTally>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTally {
    /// Index into the definition's section 2 list.
    pub pair: usize,
    pub model_a: String,
    pub model_b: String,
    pub votes_a: u64,
    pub votes_b: u64,
}

/// Votes a model received per pair it appeared in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerPairStats {
    pub pairs: usize,
    pub mean: f64,
    /// Sample standard deviation (divisor `n - 1`; 0 for one pair).
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTest {
    pub models: [String; 2],
    pub votes: [u64; 2],
    #[serde(flatten)]
    pub result: ChiSquare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section2Report {
    pub pairs: usize,
    pub votes: u64,
    pub totals: BTreeMap<String, u64>,
    pub per_model: BTreeMap<String, PerPairStats>,
    pub per_pair: Vec<PairTally>,
    /// Present when section 2 compares exactly two models and has votes.
    pub chi_square: Option<PreferenceTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study_id: String,
    pub sessions_total: usize,
    pub sessions_completed: usize,
    pub pairs_per_session: usize,
    pub resolved_votes: u64,
    /// Share of resolved votes for the left image.
    pub left_rate: Option<f64>,
    pub mean_latency_ms: Option<f64>,
    pub section1: Section1Report,
    pub section2: Section2Report,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

pub(crate) fn build_report(study_id: &str, def: &StudyDefinition, sessions: &[&Session]) -> Result<StudyReport> {
    let n1 = def.section1.len();
    let completed: Vec<&&Session> = sessions
        .iter()
        .filter(|s| s.is_completed())
        .collect();

    let mut s1 = Section1Report {
        pairs: n1,
        votes: 0,
        correct: 0,
        accuracy: None,
        likert_histogram: [0; 5],
        likert_histogram_correct: [0; 5],
        mean_likert: None,
        by_model: BTreeMap::new(),
        per_pair: def
            .section1
            .iter()
            .enumerate()
            .map(|(i, p)| RealPairTally {
                pair: i,
                model: p.synthetic.model.clone(),
                votes_real: 0,
                votes_synthetic: 0,
            })
            .collect(),
    };
    let mut per_pair: Vec<PairTally> = def
        .section2
        .iter()
        .enumerate()
        .map(|(i, p)| PairTally {
            pair: i,
            model_a: p.a.model.clone(),
            model_b: p.b.model.clone(),
            votes_a: 0,
            votes_b: 0,
        })
        .collect();
    let mut likert_sum = 0u64;
    let (mut left, mut latency_sum, mut latency_n) = (0u64, 0u64, 0u64);
    for vote in completed.iter().flat_map(|s| &s.votes) {
        if vote.side == Side::Left {
            left += 1;
        }
        if let Some(ms) = vote.latency_ms {
            latency_sum += ms;
            latency_n += 1;
        }
        if vote.pair < n1 {
            let model = &def.section1[vote.pair].synthetic.model;
            let entry = s1.by_model.entry(model.clone()).or_insert(ModelDetection { votes: 0, correct: 0 });
            s1.votes += 1;
            entry.votes += 1;
            if vote.chose_first {
                s1.correct += 1;
                entry.correct += 1;
                s1.per_pair[vote.pair].votes_real += 1;
            } else {
                s1.per_pair[vote.pair].votes_synthetic += 1;
            }
            if let Some(l) = vote.likert {
                s1.likert_histogram[l as usize - 1] += 1;
                if vote.chose_first {
                    s1.likert_histogram_correct[l as usize - 1] += 1;
                }
                likert_sum += l as u64;
            }
        } else {
            let t = &mut per_pair[vote.pair - n1];
            if vote.chose_first {
                t.votes_a += 1;
            } else {
                t.votes_b += 1;
            }
        }
    }
    if s1.votes > 0 {
        s1.accuracy = Some(s1.correct as f64 / s1.votes as f64);
        let rated: u64 = s1.likert_histogram.iter().sum();
        s1.mean_likert = Some(likert_sum as f64 / rated as f64);
    }

    let mut totals: BTreeMap<String, u64> = BTreeMap::new();
    let mut counts: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for t in &per_pair {
        *totals.entry(t.model_a.clone()).or_default() += t.votes_a;
        *totals.entry(t.model_b.clone()).or_default() += t.votes_b;
        counts.entry(t.model_a.clone()).or_default().push(t.votes_a as f64);
        counts.entry(t.model_b.clone()).or_default().push(t.votes_b as f64);
    }
    let per_model = counts
        .into_iter()
        .map(|(m, v)| {
            let (mean, sd) = mean_sd(&v);
            (m, PerPairStats { pairs: v.len(), mean, sd })
        })
        .collect();
    let votes2: u64 = totals.values().sum();
    let chi_square = if totals.len() == 2 && votes2 > 0 {
        let mut it = totals.iter();
        let (ma, &va) = it.next().expect("two models");
        let (mb, &vb) = it.next().expect("two models");
        Some(PreferenceTest {
            models: [ma.clone(), mb.clone()],
            votes: [va, vb],
            result: chi_square_preference(va, vb)?,
        })
    } else {
        None
    };

    Ok(StudyReport {
        study_id: study_id.to_string(),
        sessions_total: sessions.len(),
        sessions_completed: completed.len(),
        pairs_per_session: def.total_pairs(),
        resolved_votes: s1.votes + votes2,
        left_rate: (s1.votes + votes2 > 0).then(|| left as f64 / (s1.votes + votes2) as f64),
        mean_latency_ms: (latency_n > 0).then(|| latency_sum as f64 / latency_n as f64),
        section1: s1,
        section2: Section2Report {
            pairs: def.section2.len(),
            votes: votes2,
            totals,
            per_model,
            per_pair,
            chi_square,
        },
    })
}
