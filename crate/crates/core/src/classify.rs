//! The frozen head: cosine nearest-prototype classification with a fixed
//! temperature, plus the k-NN baseline.
//!
//! `p₀(y|z) = softmax_y(τ · cos(z, proto_y))`. Prototypes are unit-normalized
//! (optionally weighted) class means of the support; computing them is a
//! sufficient statistic, not a fitted parameter.

use crate::error::{Error, Result};
use crate::latent_store::{Embedding, EmbeddingSet};
use crate::tilting::TiltedMeasure;

pub const DEFAULT_TAU: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeClassifier {
    prototypes: Vec<Vec<f64>>,
    temperature: f64,
}

/// A probability vector over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorVector(Vec<f64>);

impl PosteriorVector {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(format!("temperature must be positive, got {tau}")))
    }
}

impl PrototypeClassifier {
    /// Wraps explicit prototype rows, normalizing each to unit length.
    pub fn from_prototypes(rows: Vec<Vec<f64>>, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        if rows.len() < 2 {
            return Err(Error::validation("a classifier needs at least two classes"));
        }
        let dim = rows[0].len();
        let mut prototypes = Vec::with_capacity(rows.len());
        for (c, row) in rows.into_iter().enumerate() {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            let n = norm(&row);
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Degenerate(format!("prototype for class {c} has zero norm")));
            }
            prototypes.push(row.into_iter().map(|v| v / n).collect());
        }
        Ok(PrototypeClassifier {
            prototypes,
            temperature: tau,
        })
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].len()
    }

    /// τ-scaled cosine similarity to every prototype.
    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: z.len(),
            });
        }
        let n = norm(z);
        if !(n > 0.0) {
            return Err(Error::validation("cannot classify a zero-norm embedding"));
        }
        Ok(self
            .prototypes
            .iter()
            .map(|p| self.temperature * dot(z, p) / n)
            .collect())
    }
}

/// Prototype for each class: the unit-normalized weighted mean of its
/// support items.
///
/// Weights are renormalized within each class. Since the result is scaled
/// to unit norm, this gives the same direction as using the raw global
/// weights. A class whose weights are all bit-identical takes the plain
/// mean, so uniform weights and omitted weights agree bit for bit.
pub fn build_prototypes(
    support: &EmbeddingSet,
    weights: Option<&TiltedMeasure>,
    tau: f64,
) -> Result<PrototypeClassifier> {
    check_tau(tau)?;
    support.require_non_empty("support set")?;
    if let Some(m) = weights {
        if m.len() != support.len() {
            return Err(Error::DimensionMismatch {
                expected: support.len(),
                actual: m.len(),
            });
        }
    }
    let classes = support.num_classes();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, label) in support.labels().enumerate() {
        let label = label as usize;
        if label >= classes {
            return Err(Error::validation(format!("support item {i} is unlabeled")));
        }
        members[label].push(i);
    }

    let dim = support.dim();
    let items = support.items();
    let mut prototypes = Vec::with_capacity(classes);
    for (c, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::validation(format!("class {c} has no support items")));
        }
        let class_weights: Vec<f64> = match weights {
            Some(m) if !idx.windows(2).all(|p| m.weights()[p[0]] == m.weights()[p[1]]) => {
                let total: f64 = idx.iter().map(|&i| m.weights()[i]).sum();
                if !(total > 0.0) {
                    return Err(Error::Degenerate(format!("class {c} carries no mass")));
                }
                idx.iter().map(|&i| m.weights()[i] / total).collect()
            }
            _ => vec![1.0 / idx.len() as f64; idx.len()],
        };
        let mut mean = vec![0.0; dim];
        for (&i, &w) in idx.iter().zip(&class_weights) {
            for (acc, &v) in mean.iter_mut().zip(items[i].embedding.as_slice()) {
                *acc += w * v;
            }
        }
        let n = norm(&mean);
        if !(n > 1e-300) {
            return Err(Error::Degenerate(format!("prototype for class {c} cancels to zero")));
        }
        prototypes.push(mean.into_iter().map(|v| v / n).collect());
    }
    Ok(PrototypeClassifier {
        prototypes,
        temperature: tau,
    })
}

/// `p₀(·|z)` as a max-shifted softmax over τ-scaled cosines.
pub fn posterior(z: &[f64], clf: &PrototypeClassifier) -> Result<PosteriorVector> {
    let logits = clf.logits(z)?;
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(PosteriorVector(exps.into_iter().map(|e| e / total).collect()))
}

pub fn predict(z: &[f64], clf: &PrototypeClassifier) -> Result<usize> {
    // argmax of the logits is the argmax of the softmax, without rounding ties away.
    Ok(argmax(&clf.logits(z)?))
}

/// `p_λ(y) = Σ_i w_i p₀(y | z_i)`.
pub fn tilted_marginal(set: &EmbeddingSet, measure: &TiltedMeasure, clf: &PrototypeClassifier) -> Result<PosteriorVector> {
    if set.len() != measure.len() {
        return Err(Error::DimensionMismatch {
            expected: set.len(),
            actual: measure.len(),
        });
    }
    let mut out = vec![0.0; clf.num_classes()];
    for (z, &w) in set.vectors().zip(measure.weights()) {
        let p = posterior(z, clf)?;
        for (acc, v) in out.iter_mut().zip(p.probs()) {
            *acc += w * v;
        }
    }
    Ok(PosteriorVector(out))
}

/// Majority label among the `k` support items with the highest cosine
/// similarity to `z`. Similarity ties keep the lower support index; vote
/// ties go to the lowest class.
pub fn knn_predict(z: &Embedding, support: &EmbeddingSet, k: usize) -> Result<usize> {
    if k == 0 || k > support.len() {
        return Err(Error::validation(format!(
            "k must lie in [1, {}], got {k}",
            support.len()
        )));
    }
    if z.dim() != support.dim() {
        return Err(Error::DimensionMismatch {
            expected: support.dim(),
            actual: z.dim(),
        });
    }
    if !(z.norm() > 0.0) {
        return Err(Error::validation("cannot classify a zero-norm embedding"));
    }
    let mut ranked: Vec<(usize, f64)> = support
        .vectors()
        .map(|v| cosine(z.as_slice(), v))
        .enumerate()
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut votes = vec![0.0; support.num_classes()];
    for &(i, _) in ranked.iter().take(k) {
        let label = support.items()[i].label as usize;
        if label >= votes.len() {
            return Err(Error::validation(format!("support item {i} is unlabeled")));
        }
        votes[label] += 1.0;
    }
    Ok(argmax(&votes))
}
