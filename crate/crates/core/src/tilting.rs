//! Exponential tilting of an empirical measure.
//!
//! For scores `s_1..s_n` on the atoms of the uniform empirical measure, the
//! tilted measure puts mass `w_i = exp(λ s_i) / Σ_j exp(λ s_j)` on atom `i`.
//! It is the measure closest to uniform in KL divergence among those with
//! `E[s] = c`, where `λ` is the multiplier matching `c`. All exponentials are
//! taken after subtracting the maximum of `λ s`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete tilted measure over the atoms of an empirical set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltedMeasure {
    weights: Vec<f64>,
    lambda: f64,
}

impl TiltedMeasure {
    /// The untilted reference measure on `n` atoms.
    pub fn uniform(n: usize) -> Self {
        TiltedMeasure {
            weights: vec![1.0 / n as f64; n],
            lambda: 0.0,
        }
    }

    /// Wraps externally computed weights after checking they lie on the simplex.
    pub fn from_weights(weights: Vec<f64>, lambda: f64) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::validation("measure needs at least one atom"));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::validation("weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!("weights sum to {total}, expected 1")));
        }
        Ok(TiltedMeasure { weights, lambda })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// True when all atoms carry bit-identical mass.
    pub fn is_uniform(&self) -> bool {
        self.weights.windows(2).all(|w| w[0] == w[1])
    }
}

/// Target `c` of the moment constraint `E_P[s] = c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentConstraint {
    pub target: f64,
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::validation("score vector is empty"));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::validation(format!("non-finite score at index {i}")));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(format!("lambda must be finite, got {lambda}")))
    }
}

/// `max_i λ s_i` and the shifted exponentials `exp(λ s_i − max)`.
fn shifted_exponentials(scores: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let shift = scores
        .iter()
        .map(|s| lambda * s)
        .fold(f64::NEG_INFINITY, f64::max);
    let terms = scores.iter().map(|s| (lambda * s - shift).exp()).collect();
    (shift, terms)
}

/// Tilted weights `w_i ∝ exp(λ s_i)`.
///
/// At `λ = 0`, or when all scores are equal, every weight is exactly `1/n`.
pub fn tilt_weights(scores: &[f64], lambda: f64) -> Result<TiltedMeasure> {
    check_scores(scores)?;
    check_lambda(lambda)?;
    let n = scores.len();
    if lambda == 0.0 || scores.iter().all(|&s| s == scores[0]) {
        return Ok(TiltedMeasure {
            weights: vec![1.0 / n as f64; n],
            lambda,
        });
    }
    let (_, terms) = shifted_exponentials(scores, lambda);
    let total: f64 = terms.iter().sum();
    let weights = terms.into_iter().map(|t| t / total).collect();
    Ok(TiltedMeasure { weights, lambda })
}

/// `log Z(λ) = log((1/n) Σ_i exp(λ s_i))`.
pub fn log_partition(scores: &[f64], lambda: f64) -> Result<f64> {
    check_scores(scores)?;
    check_lambda(lambda)?;
    let (shift, terms) = shifted_exponentials(scores, lambda);
    let total: f64 = terms.iter().sum();
    Ok(shift + (total / scores.len() as f64).ln())
}

/// `Σ_i w_i g_i`.
pub fn tilted_expectation(values: &[f64], measure: &TiltedMeasure) -> Result<f64> {
    if values.len() != measure.len() {
        return Err(Error::DimensionMismatch {
            expected: measure.len(),
            actual: values.len(),
        });
    }
    Ok(values.iter().zip(measure.weights()).map(|(g, w)| g * w).sum())
}

/// Mean and variance of the scores under the tilted measure at `λ`.
pub fn tilted_moments(scores: &[f64], lambda: f64) -> Result<(f64, f64)> {
    let m = tilt_weights(scores, lambda)?;
    let mean = tilted_expectation(scores, &m)?;
    let var = scores
        .iter()
        .zip(m.weights())
        .map(|(s, w)| w * (s - mean) * (s - mean))
        .sum();
    Ok((mean, var))
}

fn moment(scores: &[f64], lambda: f64) -> f64 {
    let (_, terms) = shifted_exponentials(scores, lambda);
    let total: f64 = terms.iter().sum();
    terms.iter().zip(scores).map(|(t, s)| t * s).sum::<f64>() / total
}

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 200;
const MAX_LAMBDA: f64 = (1u64 << 60) as f64;

/// Finds `λ` with `|E_{P_λ}[s] − c| ≤ tol`.
///
/// The moment map `λ ↦ E_{P_λ}[s]` is nondecreasing (its derivative is the
/// tilted variance), so bisection on a bracket is unconditionally
/// convergent. The bracket starts at `[0, 1]` (or `[−1, 0]` for targets
/// below the untilted mean) and doubles its far end until it straddles `c`.
/// Negative multipliers are returned when `c < mean(s)`.
pub fn solve_lambda(scores: &[f64], constraint: MomentConstraint, tol: f64, max_iter: usize) -> Result<f64> {
    check_scores(scores)?;
    let c = constraint.target;
    let (min, max) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if min == max {
        return if c == min {
            Ok(0.0)
        } else {
            Err(Error::Infeasible { target: c, min, max })
        };
    }
    if !(c > min && c < max) {
        return Err(Error::Infeasible { target: c, min, max });
    }

    // Bisection stops at half the tolerance so that recomputing the moment
    // through another code path still lands inside `tol`.
    let stop = 0.5 * tol;
    let base = moment(scores, 0.0);
    if (base - c).abs() <= stop {
        return Ok(0.0);
    }
    // g(λ) = E_{P_{sign·λ}}[s] − c is nondecreasing in λ ≥ 0 after orienting.
    let sign = if c > base { 1.0 } else { -1.0 };
    let g = |l: f64| sign * (moment(scores, sign * l) - c);

    let mut iterations = 0;
    let mut lo = 0.0;
    let mut hi = 1.0;
    while g(hi) < 0.0 {
        iterations += 1;
        if hi >= MAX_LAMBDA || iterations >= max_iter {
            return Err(Error::Convergence {
                iterations,
                lo: sign * lo,
                hi: sign * hi,
            });
        }
        lo = hi;
        hi *= 2.0;
    }

    while iterations < max_iter {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        let value = g(mid);
        if value.abs() <= stop {
            return Ok(sign * mid);
        }
        if mid <= lo || mid >= hi {
            break;
        }
        if value < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    for end in [lo, hi] {
        if g(end).abs() <= tol {
            return Ok(sign * end);
        }
    }
    let (a, b) = if sign > 0.0 { (lo, hi) } else { (-hi, -lo) };
    Err(Error::Convergence { iterations, lo: a, hi: b })
}

/// `KL(P_λ ‖ P₀) = Σ_i w_i log(n w_i)`, with `0 log 0 = 0`.
pub fn kl_to_base(measure: &TiltedMeasure) -> f64 {
    let n = measure.len() as f64;
    measure
        .weights()
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| w * (n * w).ln())
        .sum()
}

/// The same divergence through the dual identity `λ E_{P_λ}[s] − log Z(λ)`.
pub fn kl_via_partition(scores: &[f64], lambda: f64) -> Result<f64> {
    let m = tilt_weights(scores, lambda)?;
    let mean = tilted_expectation(scores, &m)?;
    Ok(lambda * mean - log_partition(scores, lambda)?)
}

/// First-order approximation of the tilted marginal,
/// `p̄₀(y) + λ [(1/n) Σ_i p₀(y|z_i) s_i − p̄₀(y) s̄]`.
///
/// `posteriors` holds one row per atom.
pub fn first_order_prediction(posteriors: &[Vec<f64>], scores: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_scores(scores)?;
    if posteriors.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            actual: posteriors.len(),
        });
    }
    let classes = posteriors[0].len();
    for (i, row) in posteriors.iter().enumerate() {
        if row.len() != classes {
            return Err(Error::DimensionMismatch {
                expected: classes,
                actual: row.len(),
            });
        }
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!("posterior row {i} sums to {total}")));
        }
    }
    let n = scores.len() as f64;
    let mean_score = scores.iter().sum::<f64>() / n;
    let out = (0..classes)
        .map(|y| {
            let mean_p = posteriors.iter().map(|row| row[y]).sum::<f64>() / n;
            let cross = posteriors.iter().zip(scores).map(|(row, s)| row[y] * s).sum::<f64>() / n;
            mean_p + lambda * (cross - mean_p * mean_score)
        })
        .collect();
    Ok(out)
}
