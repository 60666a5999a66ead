//! Chi-square goodness-of-fit for two-way preference counts.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StudyError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub df: u32,
    pub p_value: f64,
}

/// Test of `(votes_a, votes_b)` against equal preference: expected count
/// `E = (a + b) / 2` per cell, statistic `sum (O - E)^2 / E`, one degree
/// of freedom.
pub fn chi_square_preference(votes_a: u64, votes_b: u64) -> Result<ChiSquare> {
    let total = votes_a + votes_b;
    if total == 0 {
        return Err(StudyError::Stats("no votes to test".into()));
    }
    let e = total as f64 / 2.0;
    let statistic = [votes_a, votes_b].iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
    Ok(ChiSquare {
        statistic,
        df: 1,
        p_value: chi2_sf(statistic, 1),
    })
}

/// Survival function of the chi-square distribution, `Q(df / 2, x / 2)`.
pub fn chi2_sf(x: f64, df: u32) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_q(df as f64 / 2.0, x / 2.0)
}

const EPS: f64 = 1e-16;
const MAX_ITER: usize = 10_000;

/// Lanczos approximation (g = 7, 9 terms) with reflection below 0.5.
pub fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).abs().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized upper incomplete gamma `Q(a, x)`: series for `P` when
/// `x < a + 1`, Lentz continued fraction for `Q` otherwise.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let prefactor = (-x + a * x.ln() - ln_gamma(a)).exp();
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..MAX_ITER {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * EPS {
                break;
            }
        }
        1.0 - sum * prefactor
    } else {
        let tiny = f64::MIN_POSITIVE / EPS;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < EPS {
                break;
            }
        }
        prefactor * h
    }
}
