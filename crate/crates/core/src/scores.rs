//! Task-relevance scores `s(z)` built from the few-shot support.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classify::{posterior, PrototypeClassifier};
use crate::error::{Error, Result};
use crate::latent_store::EmbeddingSet;

pub const DEFAULT_SHRINKAGE: f64 = 0.1;
pub const DEFAULT_RIDGE: f64 = 1e-3;

/// Diagonal Gaussian fitted to the support, with shrinkage toward the
/// average variance and a ridge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    pub cov_diag: Vec<f64>,
    pub shrinkage: f64,
    pub ridge: f64,
}

/// `cov_j = (1 − α) v_j + α v̄ + ε`, where `v_j` is the per-coordinate
/// sample variance with denominator `max(n − 1, 1)`.
pub fn fit_gaussian_summary(support: &EmbeddingSet, shrinkage: f64, ridge: f64) -> Result<GaussianSummary> {
    support.require_non_empty("support set")?;
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(Error::validation(format!("shrinkage must lie in [0, 1], got {shrinkage}")));
    }
    if !(ridge > 0.0 && ridge.is_finite()) {
        return Err(Error::validation(format!("ridge must be positive, got {ridge}")));
    }
    let d = support.dim();
    let n = support.len() as f64;
    let mut mean = vec![0.0; d];
    for v in support.vectors() {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; d];
    for v in support.vectors() {
        for ((acc, x), m) in var.iter_mut().zip(v).zip(&mean) {
            *acc += (x - m) * (x - m);
        }
    }
    let denom = (n - 1.0).max(1.0);
    for acc in &mut var {
        *acc /= denom;
    }
    let avg = var.iter().sum::<f64>() / d as f64;
    let cov_diag = var
        .iter()
        .map(|v| (1.0 - shrinkage) * v + shrinkage * avg + ridge)
        .collect();
    Ok(GaussianSummary {
        mean,
        cov_diag,
        shrinkage,
        ridge,
    })
}

fn log_normal_diag(z: &[f64], mean: Option<&[f64]>, var: Option<&[f64]>) -> f64 {
    -0.5 * z
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            let m = mean.map_or(0.0, |m| m[j]);
            let s2 = var.map_or(1.0, |v| v[j]);
            (2.0 * PI * s2).ln() + (x - m) * (x - m) / s2
        })
        .sum::<f64>()
}

/// `log p₀(y | z)`.
pub fn score_label_aware(z: &[f64], y: u32, clf: &PrototypeClassifier) -> Result<f64> {
    if y as usize >= clf.num_classes() {
        return Err(Error::validation(format!(
            "label-aware score needs a label in [0, {}), got {y}",
            clf.num_classes()
        )));
    }
    Ok(posterior(z, clf)?.probs()[y as usize].ln())
}

/// `log N(z; μ̂, diag σ²) − log N(z; 0, I)`.
pub fn score_geometry(z: &[f64], g: &GaussianSummary) -> Result<f64> {
    if z.len() != g.mean.len() {
        return Err(Error::DimensionMismatch {
            expected: g.mean.len(),
            actual: z.len(),
        });
    }
    Ok(log_normal_diag(z, Some(&g.mean), Some(&g.cov_diag)) - log_normal_diag(z, None, None))
}

/// `max_y p₀(y | z)`.
pub fn score_confidence(z: &[f64], clf: &PrototypeClassifier) -> Result<f64> {
    Ok(posterior(z, clf)?.max())
}

/// Which score to tilt by; the names follow the `--score` flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoreKind {
    #[serde(rename = "label")]
    Label,
    #[serde(rename = "geom")]
    Geometry,
    #[serde(rename = "conf")]
    Confidence,
    #[serde(rename = "label+geom")]
    LabelGeometry,
    #[serde(rename = "conf+geom")]
    ConfidenceGeometry,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 5] = [
        ScoreKind::Label,
        ScoreKind::Geometry,
        ScoreKind::Confidence,
        ScoreKind::LabelGeometry,
        ScoreKind::ConfidenceGeometry,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Label => "label",
            ScoreKind::Geometry => "geom",
            ScoreKind::Confidence => "conf",
            ScoreKind::LabelGeometry => "label+geom",
            ScoreKind::ConfidenceGeometry => "conf+geom",
        }
    }

    pub fn needs_geometry(self) -> bool {
        matches!(
            self,
            ScoreKind::Geometry | ScoreKind::LabelGeometry | ScoreKind::ConfidenceGeometry
        )
    }

    /// Instantiates the score for one episode.
    pub fn build<'a>(self, clf: &'a PrototypeClassifier, geometry: Option<&GaussianSummary>) -> Result<ScoreFn<'a>> {
        let geom = || {
            geometry
                .cloned()
                .map(ScoreFn::Geometry)
                .ok_or_else(|| Error::validation("geometry score requires a Gaussian summary"))
        };
        match self {
            ScoreKind::Label => Ok(ScoreFn::LabelAware(clf)),
            ScoreKind::Confidence => Ok(ScoreFn::Confidence(clf)),
            ScoreKind::Geometry => geom(),
            ScoreKind::LabelGeometry => ScoreFn::composite(vec![ScoreFn::LabelAware(clf), geom()?]),
            ScoreKind::ConfidenceGeometry => ScoreFn::composite(vec![ScoreFn::Confidence(clf), geom()?]),
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown score `{s}` (expected label, geom, conf, label+geom, conf+geom)")))
    }
}

/// A configured score function. Composite scores are unit-coefficient sums.
#[derive(Debug, Clone)]
pub enum ScoreFn<'a> {
    LabelAware(&'a PrototypeClassifier),
    Geometry(GaussianSummary),
    Confidence(&'a PrototypeClassifier),
    Composite(Vec<ScoreFn<'a>>),
}

impl<'a> ScoreFn<'a> {
    pub fn composite(components: Vec<ScoreFn<'a>>) -> Result<Self> {
        if components.len() < 2 {
            return Err(Error::validation("a composite score needs at least two components"));
        }
        if components.iter().any(|c| matches!(c, ScoreFn::Composite(_))) {
            return Err(Error::validation("composite components must not be composite"));
        }
        Ok(ScoreFn::Composite(components))
    }

    pub fn needs_label(&self) -> bool {
        match self {
            ScoreFn::LabelAware(_) => true,
            ScoreFn::Composite(parts) => parts.iter().any(ScoreFn::needs_label),
            _ => false,
        }
    }

    pub fn eval(&self, z: &[f64], label: Option<u32>) -> Result<f64> {
        match self {
            ScoreFn::LabelAware(clf) => {
                let y = label.ok_or_else(|| Error::validation("label-aware score requires a label"))?;
                score_label_aware(z, y, clf)
            }
            ScoreFn::Geometry(g) => score_geometry(z, g),
            ScoreFn::Confidence(clf) => score_confidence(z, clf),
            ScoreFn::Composite(parts) => parts.iter().map(|p| p.eval(z, label)).sum(),
        }
    }

    /// Scores every item of `set`, passing each item's label (or `None` for
    /// the unlabeled sentinel).
    pub fn eval_set(&self, set: &EmbeddingSet) -> Result<Vec<f64>> {
        set.items()
            .iter()
            .map(|it| {
                let label = ((it.label as usize) < set.num_classes()).then_some(it.label);
                self.eval(it.embedding.as_slice(), label)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn uniform_classifier(classes: usize) -> PrototypeClassifier {
        // Prototypes on the axes 1..=C of R^{C+1}; a query on axis 0 is orthogonal to all.
        let rows = (0..classes)
            .map(|c| (0..=classes).map(|j| if j == c + 1 { 1.0 } else { 0.0 }).collect())
            .collect();
        PrototypeClassifier::from_prototypes(rows, 10.0).unwrap()
    }

    fn axis0(classes: usize) -> Vec<f64> {
        let mut z = vec![0.0; classes + 1];
        z[0] = 1.0;
        z
    }

    fn summary(mean: Vec<f64>, cov: Vec<f64>) -> GaussianSummary {
        GaussianSummary {
            mean,
            cov_diag: cov,
            shrinkage: 0.0,
            ridge: 1e-3,
        }
    }

    #[test]
    fn two_point_summary() {
        let s = EmbeddingSet::from_rows(2, 1, vec![(0, vec![1.0, 1.0]), (0, vec![3.0, 3.0])]).unwrap();
        let g = fit_gaussian_summary(&s, 0.0, 0.001).unwrap();
        assert_eq!(g.mean, vec![2.0, 2.0]);
        assert_abs_diff_eq!(g.cov_diag[0], 2.001, epsilon = 1e-12);
        assert_abs_diff_eq!(g.cov_diag[1], 2.001, epsilon = 1e-12);
    }

    #[test]
    fn single_point_summary_is_ridge() {
        let s = EmbeddingSet::from_rows(3, 1, vec![(0, vec![1.0, -2.0, 0.5])]).unwrap();
        let g = fit_gaussian_summary(&s, 0.4, 0.01).unwrap();
        assert_eq!(g.mean, vec![1.0, -2.0, 0.5]);
        assert_eq!(g.cov_diag, vec![0.01; 3]);
    }

    #[test]
    fn summary_tracks_sample_variance() {
        let mut r = rng::seeded(2024);
        let a = Normal::new(0.0, 1.0).unwrap();
        let b = Normal::new(0.0, 2.0).unwrap();
        let rows: Vec<(u32, Vec<f64>)> = (0..1000).map(|_| (0, vec![a.sample(&mut r), b.sample(&mut r)])).collect();
        // Oracle: exact two-pass sample variance.
        let m0 = rows.iter().map(|r| r.1[0]).sum::<f64>() / 1000.0;
        let m1 = rows.iter().map(|r| r.1[1]).sum::<f64>() / 1000.0;
        let v0 = rows.iter().map(|r| (r.1[0] - m0).powi(2)).sum::<f64>() / 999.0;
        let v1 = rows.iter().map(|r| (r.1[1] - m1).powi(2)).sum::<f64>() / 999.0;
        let s = EmbeddingSet::from_rows(2, 1, rows).unwrap();
        let g = fit_gaussian_summary(&s, 0.0, 1e-6).unwrap();
        assert_abs_diff_eq!(g.cov_diag[0], v0 + 1e-6, epsilon = 1e-12);
        assert_abs_diff_eq!(g.cov_diag[1], v1 + 1e-6, epsilon = 1e-12);
        assert!((g.cov_diag[0] - 1.0).abs() < 0.2 && (g.cov_diag[1] - 4.0).abs() < 0.2, "{:?}", g.cov_diag);
    }

    #[test]
    fn label_score_on_uniform_posterior() {
        let clf = uniform_classifier(4);
        let s = score_label_aware(&axis0(4), 2, &clf).unwrap();
        assert_abs_diff_eq!(s, (0.25f64).ln(), epsilon = 1e-12);
        assert!(score_label_aware(&axis0(4), 4, &clf).is_err());
    }

    #[test]
    fn label_score_approaches_zero_at_prototype() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let sharp = PrototypeClassifier::from_prototypes(rows, 200.0).unwrap();
        let s = score_label_aware(&[1.0, 0.0], 0, &sharp).unwrap();
        assert!(s <= 0.0 && s > -1e-12);
    }

    #[test]
    fn label_and_confidence_match_direct_softmax() {
        let mut r = rng::seeded(99);
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..7).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let clf = PrototypeClassifier::from_prototypes(rows, 10.0).unwrap();
        let z: Vec<f64> = (0..7).map(|_| r.random_range(-1.0..1.0)).collect();
        let zn = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        let e: Vec<f64> = clf
            .prototypes()
            .iter()
            .map(|p| (10.0 * p.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / zn).exp())
            .collect();
        let total: f64 = e.iter().sum();
        assert_abs_diff_eq!(score_label_aware(&z, 3, &clf).unwrap(), (e[3] / total).ln(), epsilon = 1e-12);
        let top = e.iter().copied().fold(0.0, f64::max) / total;
        assert_abs_diff_eq!(score_confidence(&z, &clf).unwrap(), top, epsilon = 1e-12);
    }

    #[test]
    fn geometry_closed_forms() {
        let g = summary(vec![1.0, -2.0, 0.5], vec![1.0; 3]);
        assert_abs_diff_eq!(score_geometry(&[1.0, -2.0, 0.5], &g).unwrap(), (1.0 + 4.0 + 0.25) / 2.0, epsilon = 1e-12);

        let reference = summary(vec![0.0; 2], vec![1.0; 2]);
        assert_abs_diff_eq!(score_geometry(&[3.0, -7.0], &reference).unwrap(), 0.0, epsilon = 1e-12);

        let wide = summary(vec![0.0, 0.0], vec![4.0, 4.0]);
        let expected = -(4.0f64).ln() + 15.0 / 8.0;
        assert_abs_diff_eq!(score_geometry(&[1.0, 2.0], &wide).unwrap(), expected, epsilon = 1e-12);
        assert!(score_geometry(&[1.0], &wide).is_err());
    }

    #[test]
    fn confidence_cases() {
        let clf = uniform_classifier(5);
        assert_abs_diff_eq!(score_confidence(&axis0(5), &clf).unwrap(), 0.2, epsilon = 1e-12);
        let sharp = PrototypeClassifier::from_prototypes(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 100.0).unwrap();
        assert!(score_confidence(&[1.0, 0.0], &sharp).unwrap() > 1.0 - 1e-12);
    }

    #[test]
    fn composite_cases() {
        let clf = uniform_classifier(4);
        let z = axis0(4);
        let reference = summary(vec![0.0; 5], vec![1.0; 5]);
        let c = ScoreFn::composite(vec![ScoreFn::Geometry(reference), ScoreFn::Confidence(&clf)]).unwrap();
        assert_abs_diff_eq!(c.eval(&z, None).unwrap(), 0.25, epsilon = 1e-12);

        let g = summary(vec![0.3; 5], vec![2.0; 5]);
        let double = ScoreFn::composite(vec![ScoreFn::Geometry(g.clone()), ScoreFn::Geometry(g.clone())]).unwrap();
        let single = score_geometry(&z, &g).unwrap();
        assert_abs_diff_eq!(double.eval(&z, None).unwrap(), 2.0 * single, epsilon = 1e-12);

        let lg = ScoreFn::composite(vec![ScoreFn::LabelAware(&clf), ScoreFn::Geometry(g.clone())]).unwrap();
        let expected = score_label_aware(&z, 1, &clf).unwrap() + single;
        assert_abs_diff_eq!(lg.eval(&z, Some(1)).unwrap(), expected, epsilon = 1e-12);
        assert!(lg.eval(&z, None).is_err());
        assert!(ScoreFn::composite(vec![ScoreFn::Confidence(&clf)]).is_err());
    }

    #[test]
    fn score_kind_parsing() {
        for k in ScoreKind::ALL {
            assert_eq!(k.as_str().parse::<ScoreKind>().unwrap(), k);
        }
        assert!("entropy".parse::<ScoreKind>().is_err());
    }

    proptest! {
        #[test]
        fn label_score_nonpositive(z in prop::collection::vec(-3.0f64..3.0, 4), y in 0u32..3) {
            prop_assume!(z.iter().any(|v| v.abs() > 1e-6));
            let clf = PrototypeClassifier::from_prototypes(
                vec![vec![1.0, 0.0, 0.0, 0.5], vec![0.0, 1.0, -1.0, 0.0], vec![-1.0, 0.2, 0.3, 1.0]], 10.0).unwrap();
            prop_assert!(score_label_aware(&z, y, &clf).unwrap() <= 0.0);
            let conf = score_confidence(&z, &clf).unwrap();
            prop_assert!(conf >= 1.0 / 3.0 - 1e-12 && conf <= 1.0);
        }

        #[test]
        fn geometry_permutation_invariant(
            z in prop::collection::vec(-3.0f64..3.0, 5),
            mu in prop::collection::vec(-3.0f64..3.0, 5),
            cov in prop::collection::vec(0.1f64..4.0, 5),
            rot in 0usize..5,
        ) {
            let perm = |v: &[f64]| { let mut p = v.to_vec(); p.rotate_left(rot); p };
            let a = score_geometry(&z, &summary(mu.clone(), cov.clone())).unwrap();
            let b = score_geometry(&perm(&z), &summary(perm(&mu), perm(&cov))).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }
}
