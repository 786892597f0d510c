//! Slow, direct verifiers for the tilting results.
//!
//! Nothing in this module calls into [`crate::tilting`]; the point is to
//! reach the same answers by an unrelated route. All solvers are limited to
//! at most [`MAX_ATOMS`] atoms.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

pub const MAX_ATOMS: usize = 12;
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::validation("simplex point needs nonnegative entries"));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!("simplex point sums to {total}")));
        }
        Ok(SimplexPoint(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `KL(p ‖ uniform) = Σ p_i log(n p_i)`.
    pub fn kl_to_uniform(&self) -> f64 {
        kl_to_uniform(&self.0)
    }

    pub fn expectation(&self, values: &[f64]) -> f64 {
        self.0.iter().zip(values).map(|(p, v)| p * v).sum()
    }
}

fn kl_to_uniform(p: &[f64]) -> f64 {
    let n = p.len() as f64;
    p.iter().filter(|&&v| v > 0.0).map(|&v| v * (n * v).ln()).sum()
}

fn check_instance(scores: &[f64], c: f64) -> Result<(f64, f64)> {
    if scores.is_empty() || scores.len() > MAX_ATOMS {
        return Err(Error::validation(format!(
            "oracle instances need 1..={MAX_ATOMS} atoms, got {}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::validation("non-finite score"));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(c > min && c < max) {
        return Err(Error::Infeasible { target: c, min, max });
    }
    Ok((min, max))
}

/// Minimizer returned by [`constrained_kl_minimizer`] with its objective trace.
#[derive(Debug, Clone)]
pub struct KlMinimum {
    pub point: SimplexPoint,
    /// KL to uniform at the start and after every accepted step.
    pub trace: Vec<f64>,
}

/// Minimizes `KL(p ‖ uniform)` over `{p ∈ Δ_n : Σ p_i s_i = c}`.
///
/// Equality-constrained Newton iteration with a feasible interior start
/// (uniform mixed with the extreme atom on the target's side) and a
/// backtracking line search that keeps every entry positive and only
/// accepts objective decreases.
pub fn constrained_kl_minimizer(scores: &[f64], c: f64, iters: usize) -> Result<KlMinimum> {
    check_instance(scores, c)?;
    let n = scores.len();
    let nf = n as f64;
    let mean = scores.iter().sum::<f64>() / nf;
    let mut p = vec![1.0 / nf; n];
    if c != mean {
        let extreme = if c > mean {
            (0..n).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).expect("non-empty")
        } else {
            (0..n).min_by(|&a, &b| scores[a].total_cmp(&scores[b])).expect("non-empty")
        };
        let t = (c - mean) / (scores[extreme] - mean);
        for (i, v) in p.iter_mut().enumerate() {
            *v = (1.0 - t) / nf + if i == extreme { t } else { 0.0 };
        }
    }

    let mut f = kl_to_uniform(&p);
    let mut trace = vec![f];
    for _ in 0..iters {
        let g: Vec<f64> = p.iter().map(|&v| (nf * v).ln() + 1.0).collect();
        // KKT with H = diag(1/p): (A P Aᵀ) ν = A P g for A = [1ᵀ; sᵀ].
        let (mut a00, mut a01, mut a11, mut b0, mut b1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let (pi, si) = (p[i], scores[i]);
            a00 += pi;
            a01 += pi * si;
            a11 += pi * si * si;
            b0 += pi * g[i];
            b1 += pi * si * g[i];
        }
        let det = a00 * a11 - a01 * a01;
        if !(det.abs() > 1e-300) {
            break;
        }
        let nu0 = (b0 * a11 - b1 * a01) / det;
        let nu1 = (a00 * b1 - a01 * b0) / det;
        let d: Vec<f64> = (0..n).map(|i| -p[i] * (g[i] - nu0 - nu1 * scores[i])).collect();
        let slope: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        if !(slope < -1e-30) {
            break;
        }

        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-20 {
            let cand: Vec<f64> = p.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            if cand.iter().all(|&v| v > 0.0) {
                let fc = kl_to_uniform(&cand);
                if fc <= f + 0.25 * t * slope && fc <= f {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, fc)) => {
                p = cand;
                f = fc;
                trace.push(f);
            }
            None => break,
        }
    }

    let total: f64 = p.iter().sum();
    for v in &mut p {
        *v /= total;
    }
    let violation = (p.iter().zip(scores).map(|(a, b)| a * b).sum::<f64>() - c).abs();
    if violation > FEASIBILITY_TOL {
        return Err(Error::Convergence {
            iterations: trace.len() - 1,
            lo: violation,
            hi: violation,
        });
    }
    Ok(KlMinimum {
        point: SimplexPoint(p),
        trace,
    })
}

/// Euclidean projection onto the probability simplex (sort-and-threshold).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &x) in u.iter().enumerate() {
        cumulative += x;
        let candidate = (cumulative - 1.0) / (k + 1) as f64;
        if x - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Euclidean projection onto `{p : Σ p_i = 1, Σ p_i s_i = c}`, moving only
/// the coordinates where `active` holds. Returns false when the active
/// scores are all equal and the plane cannot be reached that way.
fn project_affine(p: &mut [f64], scores: &[f64], c: f64, active: impl Fn(usize) -> bool) -> bool {
    let (mut n, mut s_sum, mut s_sq) = (0.0, 0.0, 0.0);
    for (i, &s) in scores.iter().enumerate() {
        if active(i) {
            n += 1.0;
            s_sum += s;
            s_sq += s * s;
        }
    }
    let r0 = p.iter().sum::<f64>() - 1.0;
    let r1 = p.iter().zip(scores).map(|(a, b)| a * b).sum::<f64>() - c;
    // (A Aᵀ) μ = r, with A Aᵀ = [[n, Σs], [Σs, Σs²]] over the active set.
    let det = n * s_sq - s_sum * s_sum;
    if !(det > 1e-12 * n * s_sq.max(1.0)) {
        return false;
    }
    let mu0 = (r0 * s_sq - r1 * s_sum) / det;
    let mu1 = (n * r1 - s_sum * r0) / det;
    for (i, (v, s)) in p.iter_mut().zip(scores).enumerate() {
        if active(i) {
            *v -= mu0 + mu1 * s;
        }
    }
    true
}

fn moment_gap(p: &[f64], scores: &[f64], c: f64) -> f64 {
    (p.iter().zip(scores).map(|(a, b)| a * b).sum::<f64>() - c).abs()
}

/// Alternating projections between the simplex and the constraint plane,
/// starting from `start`, until the simplex iterate is within
/// [`FEASIBILITY_TOL`] of the plane.
///
/// After each round the iterate is also projected onto the plane within
/// its current support; once the support has settled this lands exactly on
/// the feasible slice and ends the iteration early.
pub fn project_feasible(start: &[f64], scores: &[f64], c: f64, max_rounds: usize) -> Option<SimplexPoint> {
    let mut p = start.to_vec();
    for _ in 0..max_rounds {
        project_affine(&mut p, scores, c, |_| true);
        p = project_simplex(&p);
        if moment_gap(&p, scores, c) <= FEASIBILITY_TOL {
            return Some(SimplexPoint(p));
        }
        let mut polished = p.clone();
        if project_affine(&mut polished, scores, c, |i| p[i] > 0.0)
            && polished.iter().all(|&v| v >= 0.0)
            && moment_gap(&polished, scores, c) <= FEASIBILITY_TOL
        {
            return Some(SimplexPoint(polished));
        }
    }
    None
}

/// `count` seeded random points of the feasible slice: flat-Dirichlet draws
/// pushed onto the slice by [`project_feasible`].
pub fn random_feasible_sampler(scores: &[f64], c: f64, count: usize, seed: u64) -> Result<Vec<SimplexPoint>> {
    check_instance(scores, c)?;
    let n = scores.len();
    let mut r = rng::seeded(seed);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 10 * count + 100 {
            return Err(Error::Convergence {
                iterations: attempts,
                lo: out.len() as f64,
                hi: count as f64,
            });
        }
        let raw: Vec<f64> = (0..n).map(|_| -(1.0 - r.random::<f64>()).ln()).collect();
        let total: f64 = raw.iter().sum();
        let start: Vec<f64> = raw.into_iter().map(|x| x / total).collect();
        if let Some(p) = project_feasible(&start, scores, c, 10_000) {
            out.push(p);
        }
    }
    Ok(out)
}

/// Central difference `(f(x + h) − f(x − h)) / 2h`.
pub fn finite_difference<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    assert!(h > 0.0, "finite-difference step must be positive");
    (f(x + h) - f(x - h)) / (2.0 * h)
}
