//! Randomized checks of the tilting theory, run by `tilt validate`.
//!
//! Each check draws seeded instances and reports the worst slack it saw.
//! The tilting routine under test is injectable, so a deliberately broken
//! implementation can be shown to fail the matching check.

use std::fmt;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::classify::{posterior, PrototypeClassifier};
use crate::error::Result;
use crate::oracle;
use crate::rng::{self, Rng};
use crate::tilting::{self, MomentConstraint};

/// Produces tilted weights for `(scores, λ)`.
pub type TiltFn = fn(&[f64], f64) -> Result<Vec<f64>>;

pub fn production_tilt(scores: &[f64], lambda: f64) -> Result<Vec<f64>> {
    tilting::tilt_weights(scores, lambda).map(|m| m.weights().to_vec())
}

/// Instance counts for each check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget {
    pub simplex_vectors: usize,
    pub shift_instances: usize,
    pub moment_instances: usize,
    pub kl_instances: usize,
    pub kl_samples: usize,
    pub solver_instances: usize,
    pub bayes_instances: usize,
    pub bayes_alternatives: usize,
    pub label_shift_instances: usize,
    pub stability_instances: usize,
}

impl Budget {
    pub fn quick() -> Self {
        Budget {
            simplex_vectors: 2_000,
            shift_instances: 500,
            moment_instances: 200,
            kl_instances: 20,
            kl_samples: 5_000,
            solver_instances: 300,
            bayes_instances: 30,
            bayes_alternatives: 300,
            label_shift_instances: 50,
            stability_instances: 20,
        }
    }

    pub fn full() -> Self {
        Budget {
            simplex_vectors: 10_000,
            shift_instances: 1_000,
            moment_instances: 1_000,
            kl_instances: 100,
            kl_samples: 100_000,
            solver_instances: 1_000,
            bayes_instances: 100,
            bayes_alternatives: 1_000,
            label_shift_instances: 100,
            stability_instances: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<18} {} [{:.2}s]", self.name, self.detail, self.seconds)
    }
}

pub struct Suite {
    seed: u64,
    budget: Budget,
    tilt: TiltFn,
}

fn random_scores(r: &mut Rng, n: usize, spread: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(r);
            spread * x
        })
        .collect()
}

fn random_classifier(r: &mut Rng, classes: usize, dim: usize, tau: f64) -> PrototypeClassifier {
    let rows = (0..classes)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(r)).collect())
        .collect();
    PrototypeClassifier::from_prototypes(rows, tau).expect("gaussian prototypes are non-degenerate")
}

fn random_points(r: &mut Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(r)).collect())
        .collect()
}

fn weighted_mean(weights: &[f64], values: &[f64]) -> f64 {
    weights.iter().zip(values).map(|(w, v)| w * v).sum()
}

fn kl_of(weights: &[f64]) -> f64 {
    let n = weights.len() as f64;
    weights.iter().filter(|&&w| w > 0.0).map(|&w| w * (n * w).ln()).sum()
}

impl Suite {
    pub fn new(seed: u64, budget: Budget) -> Self {
        Suite {
            seed,
            budget,
            tilt: production_tilt,
        }
    }

    pub fn with_tilt(mut self, tilt: TiltFn) -> Self {
        self.tilt = tilt;
        self
    }

    fn rng(&self, check: u64) -> Rng {
        rng::for_stream(self.seed, check)
    }

    /// Runs every check, in parallel; the report order is fixed.
    pub fn run(&self) -> Vec<CheckOutcome> {
        let checks: [fn(&Suite) -> CheckOutcome; 9] = [
            Suite::simplex,
            Suite::shift_invariance,
            Suite::moment_map,
            Suite::kl_optimality,
            Suite::kl_identity,
            Suite::lambda_solver,
            Suite::bayes_marginal,
            Suite::label_shift,
            Suite::first_order,
        ];
        checks
            .par_iter()
            .map(|check| {
                let start = Instant::now();
                let mut outcome = check(self);
                outcome.seconds = start.elapsed().as_secs_f64();
                outcome
            })
            .collect()
    }

    fn weights(&self, scores: &[f64], lambda: f64) -> Option<Vec<f64>> {
        (self.tilt)(scores, lambda).ok()
    }

    fn mean_at(&self, scores: &[f64], lambda: f64) -> Option<f64> {
        self.weights(scores, lambda).map(|w| weighted_mean(&w, scores))
    }

    pub fn simplex(&self) -> CheckOutcome {
        let mut r = self.rng(1);
        let mut worst_sum = 0.0f64;
        let mut nonpositive = 0usize;
        let mut identity_failures = 0usize;
        let mut errors = 0usize;
        for _ in 0..self.budget.simplex_vectors {
            let n = r.random_range(1..=1000);
            let spread = r.random_range(0.1..20.0);
            let scores = random_scores(&mut r, n, spread);
            let lambda = r.random_range(0.0..4.0);
            match self.weights(&scores, lambda) {
                Some(w) => {
                    worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
                    nonpositive += w.iter().filter(|&&x| !(x > 0.0)).count();
                }
                None => errors += 1,
            }
            match self.weights(&scores, 0.0) {
                Some(w) if w.iter().all(|&x| x == 1.0 / n as f64) => {}
                _ => identity_failures += 1,
            }
        }
        CheckOutcome {
            name: "simplex",
            passed: worst_sum <= 1e-9 && nonpositive == 0 && identity_failures == 0 && errors == 0,
            detail: format!(
                "max |sum-1| = {worst_sum:.2e} (tol 1e-9), nonpositive = {nonpositive}, lambda=0 non-uniform = {identity_failures}"
            ),
            seconds: 0.0,
        }
    }

    pub fn shift_invariance(&self) -> CheckOutcome {
        let mut r = self.rng(2);
        let mut worst = 0.0f64;
        for _ in 0..self.budget.shift_instances {
            let n = r.random_range(1..=200);
            let scores = random_scores(&mut r, n, 3.0);
            let kappa = r.random_range(-100.0..100.0);
            let lambda = r.random_range(0.0..4.0);
            let shifted: Vec<f64> = scores.iter().map(|s| s + kappa).collect();
            match (self.weights(&scores, lambda), self.weights(&shifted, lambda)) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.iter().zip(&b) {
                        worst = worst.max((x - y).abs());
                    }
                }
                _ => worst = f64::INFINITY,
            }
        }
        CheckOutcome {
            name: "shift-invariance",
            passed: worst <= 1e-12,
            detail: format!("max |w(s+k) - w(s)| = {worst:.2e} (tol 1e-12)"),
            seconds: 0.0,
        }
    }

    pub fn moment_map(&self) -> CheckOutcome {
        let mut r = self.rng(3);
        let mut worst_drop = 0.0f64;
        let mut worst_rel = 0.0f64;
        for _ in 0..self.budget.moment_instances {
            let n = r.random_range(2..=50);
            let scores = random_scores(&mut r, n, 1.0);
            let mut prev = f64::NEG_INFINITY;
            for k in 0..=80 {
                let m = self.mean_at(&scores, 0.05 * k as f64).unwrap_or(f64::NAN);
                worst_drop = worst_drop.max(prev - m);
                if m.is_nan() {
                    worst_drop = f64::INFINITY;
                }
                prev = m;
            }
            let lambda = r.random_range(0.0..4.0) + 1e-4;
            let fd = oracle::finite_difference(|l| self.mean_at(&scores, l).unwrap_or(f64::NAN), lambda, 1e-5);
            let w = self.weights(&scores, lambda).unwrap_or_default();
            let mean = weighted_mean(&w, &scores);
            let var: f64 = w.iter().zip(&scores).map(|(w, s)| w * (s - mean).powi(2)).sum();
            let rel = (fd - var).abs() / var.abs().max(1e-300);
            worst_rel = if rel.is_nan() { f64::INFINITY } else { worst_rel.max(rel) };
        }
        CheckOutcome {
            name: "moment-map",
            passed: worst_drop <= 1e-10 && worst_rel <= 1e-6,
            detail: format!(
                "max decrease = {worst_drop:.2e} (tol 1e-10), max |dE/dl - Var|/Var = {worst_rel:.2e} (tol 1e-6)"
            ),
            seconds: 0.0,
        }
    }

    pub fn kl_optimality(&self) -> CheckOutcome {
        let mut r = self.rng(4);
        let mut worst_oracle = f64::NEG_INFINITY;
        let mut worst_sample = f64::NEG_INFINITY;
        let mut failures = 0usize;
        for inst in 0..self.budget.kl_instances {
            let n = r.random_range(2..=6);
            let scores = random_scores(&mut r, n, 1.0);
            let lambda = r.random_range(-2.0..2.0);
            let Some(w) = self.weights(&scores, lambda) else {
                failures += 1;
                continue;
            };
            let c = weighted_mean(&w, &scores);
            let tilted_kl = kl_of(&w);
            match oracle::constrained_kl_minimizer(&scores, c, 200) {
                Ok(m) => worst_oracle = worst_oracle.max(tilted_kl - m.point.kl_to_uniform()),
                Err(_) => failures += 1,
            }
            match oracle::random_feasible_sampler(&scores, c, self.budget.kl_samples, rng::mix_seed(self.seed, inst as u64)) {
                Ok(points) => {
                    for p in points {
                        worst_sample = worst_sample.max(tilted_kl - p.kl_to_uniform());
                    }
                }
                Err(_) => failures += 1,
            }
        }
        CheckOutcome {
            name: "kl-optimality",
            passed: failures == 0 && worst_oracle <= 1e-6 && worst_sample <= 1e-9,
            detail: format!(
                "max KL(tilted) - KL(oracle) = {worst_oracle:.2e} (tol 1e-6), max KL(tilted) - KL(sample) = {worst_sample:.2e} (tol 1e-9), failures = {failures}"
            ),
            seconds: 0.0,
        }
    }

    pub fn kl_identity(&self) -> CheckOutcome {
        let mut r = self.rng(5);
        let mut worst = 0.0f64;
        for _ in 0..self.budget.moment_instances {
            let n = r.random_range(1..=100);
            let scores = random_scores(&mut r, n, 1.0);
            let lambda = r.random_range(-4.0..4.0);
            let direct = self.weights(&scores, lambda).map(|w| kl_of(&w)).unwrap_or(f64::NAN);
            let dual = tilting::kl_via_partition(&scores, lambda).unwrap_or(f64::NAN);
            let gap = (direct - dual).abs();
            worst = if gap.is_nan() { f64::INFINITY } else { worst.max(gap) };
        }
        CheckOutcome {
            name: "kl-identity",
            passed: worst <= 1e-10,
            detail: format!("max |sum w log(nw) - (l E[s] - log Z)| = {worst:.2e} (tol 1e-10)"),
            seconds: 0.0,
        }
    }

    pub fn lambda_solver(&self) -> CheckOutcome {
        let mut r = self.rng(6);
        let mut worst = 0.0f64;
        let mut grid_misses = 0usize;
        let mut infeasible_accepted = 0usize;
        for inst in 0..self.budget.solver_instances {
            let n = r.random_range(2..=100);
            let scores: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let (lo, hi) = scores
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
            let c = lo + (hi - lo) * r.random_range(0.05..0.95);
            let target = MomentConstraint { target: c };
            match tilting::solve_lambda(&scores, target, tilting::DEFAULT_TOL, tilting::DEFAULT_MAX_ITER) {
                Ok(lambda) => {
                    let m = self.mean_at(&scores, lambda).unwrap_or(f64::NAN);
                    let gap = (m - c).abs();
                    worst = if gap.is_nan() { f64::INFINITY } else { worst.max(gap) };
                    if inst < 100 && !grid_brackets(&scores, c, lambda) {
                        grid_misses += 1;
                    }
                }
                Err(_) => worst = f64::INFINITY,
            }
            let outside = MomentConstraint { target: hi + 0.1 };
            if tilting::solve_lambda(&scores, outside, 1e-10, 200).is_ok() {
                infeasible_accepted += 1;
            }
        }
        CheckOutcome {
            name: "lambda-solver",
            passed: worst <= 1e-10 && grid_misses == 0 && infeasible_accepted == 0,
            detail: format!(
                "max |E - c| = {worst:.2e} (tol 1e-10), grid-scan misses = {grid_misses}, infeasible accepted = {infeasible_accepted}"
            ),
            seconds: 0.0,
        }
    }

    pub fn bayes_marginal(&self) -> CheckOutcome {
        let mut r = self.rng(7);
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..self.budget.bayes_instances {
            let classes = r.random_range(2..=6);
            let dim = r.random_range(2..=8);
            let tau = r.random_range(1.0..20.0);
            let clf = random_classifier(&mut r, classes, dim, tau);
            let n = r.random_range(2..=30);
            let points = random_points(&mut r, n, dim);
            let post: Vec<Vec<f64>> = points
                .iter()
                .map(|z| posterior(z, &clf).map(|p| p.into_inner()).unwrap_or_default())
                .collect();
            let scores = random_scores(&mut r, n, 1.0);
            let Some(w) = self.weights(&scores, r.random_range(0.0..2.0)) else {
                worst = f64::INFINITY;
                continue;
            };
            let q: Vec<f64> = (0..classes)
                .map(|y| w.iter().zip(&post).map(|(wi, p)| wi * p[y]).sum())
                .collect();
            let loss = |q: &[f64]| -> f64 {
                w.iter()
                    .zip(&post)
                    .map(|(wi, p)| wi * p.iter().zip(q).map(|(py, qy)| -py * qy.ln()).sum::<f64>())
                    .sum()
            };
            let best = loss(&q);
            for k in 0..self.budget.bayes_alternatives {
                let concentration = [1.0, 10.0, 100.0, 1000.0][k % 4];
                let alt = dirichlet_around(&mut r, &q, concentration);
                worst = worst.max(best - loss(&alt));
            }
        }
        CheckOutcome {
            name: "bayes-marginal",
            passed: worst <= 1e-12,
            detail: format!("max CE(q) - CE(alternative) = {worst:.2e} (tol 1e-12)"),
            seconds: 0.0,
        }
    }

    pub fn label_shift(&self) -> CheckOutcome {
        let mut r = self.rng(8);
        let mut worst_ratio = 0.0f64;
        let mut worst_within = 0.0f64;
        for _ in 0..self.budget.label_shift_instances {
            let classes = r.random_range(2..=6);
            let dim = r.random_range(2..=8);
            let clf = random_classifier(&mut r, classes, dim, 10.0);
            let n = r.random_range(classes..=60);
            let points = random_points(&mut r, n, dim);
            let predicted: Vec<usize> = points
                .iter()
                .map(|z| crate::classify::predict(z, &clf).unwrap_or(0))
                .collect();
            let prior = dirichlet_around(&mut r, &vec![1.0 / classes as f64; classes], classes as f64);
            let scores: Vec<f64> = predicted.iter().map(|&y| prior[y].ln()).collect();
            let Some(w) = self.weights(&scores, 1.0) else {
                worst_ratio = f64::INFINITY;
                continue;
            };
            let mut mass = vec![0.0; classes];
            let mut count = vec![0usize; classes];
            for (&y, &wi) in predicted.iter().zip(&w) {
                mass[y] += wi;
                count[y] += 1;
            }
            for (i, &y) in predicted.iter().enumerate() {
                let expected = mass[y] / count[y] as f64;
                worst_within = worst_within.max((w[i] - expected).abs());
            }
            let occupied: Vec<usize> = (0..classes).filter(|&c| count[c] > 0).collect();
            for &a in &occupied {
                for &b in &occupied {
                    let observed = mass[a] / mass[b];
                    let expected = (count[a] as f64 * prior[a]) / (count[b] as f64 * prior[b]);
                    worst_ratio = worst_ratio.max(((observed - expected) / expected).abs());
                }
            }
        }
        CheckOutcome {
            name: "label-shift",
            passed: worst_ratio <= 1e-12 && worst_within <= 1e-12,
            detail: format!(
                "max relative mass-ratio error = {worst_ratio:.2e} (tol 1e-12), max within-class spread = {worst_within:.2e} (tol 1e-12)"
            ),
            seconds: 0.0,
        }
    }

    pub fn first_order(&self) -> CheckOutcome {
        let mut r = self.rng(9);
        let lambdas = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
        let mut worst_spread = 1.0f64;
        for _ in 0..self.budget.stability_instances {
            let classes = r.random_range(2..=6);
            let dim = r.random_range(2..=8);
            let clf = random_classifier(&mut r, classes, dim, 5.0);
            let n = r.random_range(5..=40);
            let points = random_points(&mut r, n, dim);
            let post: Vec<Vec<f64>> = points
                .iter()
                .map(|z| posterior(z, &clf).map(|p| p.into_inner()).unwrap_or_default())
                .collect();
            let scores = random_scores(&mut r, n, 1.0);
            let ratios: Vec<f64> = lambdas
                .iter()
                .map(|&l| {
                    let Some(w) = self.weights(&scores, l) else { return f64::NAN };
                    let approx = tilting::first_order_prediction(&post, &scores, l).unwrap_or_default();
                    let residual = (0..classes)
                        .map(|y| {
                            let exact: f64 = w.iter().zip(&post).map(|(wi, p)| wi * p[y]).sum();
                            (exact - approx.get(y).copied().unwrap_or(f64::NAN)).abs()
                        })
                        .fold(0.0, f64::max);
                    residual / (l * l)
                })
                .collect();
            let max = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
            let spread = max / min;
            worst_spread = if spread.is_nan() { f64::INFINITY } else { worst_spread.max(spread) };
        }
        CheckOutcome {
            name: "first-order",
            passed: worst_spread < 2.0,
            detail: format!("max spread of residual/l^2 across l = {worst_spread:.3} (tol < 2)"),
            seconds: 0.0,
        }
    }
}

/// Independent check that `lambda` lies in the cell of a dense λ grid where
/// the directly computed moment crosses `c`.
fn grid_brackets(scores: &[f64], c: f64, lambda: f64) -> bool {
    let moment = |l: f64| {
        let e: Vec<f64> = scores.iter().map(|s| (l * s).exp()).collect();
        e.iter().zip(scores).map(|(a, b)| a * b).sum::<f64>() / e.iter().sum::<f64>()
    };
    let step = 1e-2;
    let mut prev_l = -100.0;
    let mut prev_m = moment(prev_l);
    while prev_l < 100.0 {
        let l = prev_l + step;
        let m = moment(l);
        if prev_m <= c && c <= m {
            return lambda >= prev_l - 1e-9 && lambda <= l + 1e-9;
        }
        prev_l = l;
        prev_m = m;
    }
    false
}

/// Dirichlet draw with mean `center` and total concentration `concentration`.
pub fn dirichlet_around(r: &mut Rng, center: &[f64], concentration: f64) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = center
            .iter()
            .map(|&c| {
                let shape = (concentration * c).max(1e-3);
                Gamma::new(shape, 1.0).expect("positive shape").sample(r)
            })
            .collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && draws.iter().all(|&d| d > 0.0) {
            return draws.into_iter().map(|d| d / total).collect();
        }
    }
}

/// Runs the suite with the production tilting routine.
pub fn run_all(seed: u64, budget: Budget) -> Vec<CheckOutcome> {
    Suite::new(seed, budget).run()
}
