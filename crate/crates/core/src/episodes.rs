//! Episodic N-way K-shot evaluation: sampling, the frozen baseline, the
//! inductive and transductive tilting pipelines, the k-NN baseline, and
//! benchmark aggregation.
//!
//! Nothing here updates a parameter. Each pipeline recomputes prototypes
//! (a sufficient statistic) from a reweighted support and classifies the
//! untouched queries with the same fixed-temperature head.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{self, build_prototypes, knn_predict, predict, PrototypeClassifier};
use crate::error::{Error, Result};
use crate::latent_store::{Embedding, EmbeddingSet, LabeledEmbedding};
use crate::rng;
use crate::scores::{fit_gaussian_summary, ScoreKind, DEFAULT_RIDGE, DEFAULT_SHRINKAGE};
use crate::tilting::{self, tilt_weights, MomentConstraint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub seed: u64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            ways: 5,
            shots: 5,
            queries_per_class: 15,
            seed: 0,
        }
    }
}

impl EpisodeSpec {
    /// Checks the spec against `data`, naming the first class that is too small.
    pub fn check(&self, data: &EmbeddingSet) -> Result<()> {
        if self.ways < 2 || self.shots < 1 || self.queries_per_class < 1 {
            return Err(Error::validation(format!(
                "episode needs ways >= 2, shots >= 1, queries >= 1 (got {}/{}/{})",
                self.ways, self.shots, self.queries_per_class
            )));
        }
        if data.num_classes() < self.ways {
            return Err(Error::validation(format!(
                "{}-way episodes need at least {} classes; the dataset has {}",
                self.ways,
                self.ways,
                data.num_classes()
            )));
        }
        let need = self.shots + self.queries_per_class;
        if let Some((c, have)) = data.class_counts().into_iter().enumerate().find(|(_, n)| *n < need) {
            return Err(Error::validation(format!(
                "class {c} has {have} items; {need} needed for {} shots + {} queries",
                self.shots, self.queries_per_class
            )));
        }
        Ok(())
    }
}

/// One sampled task. Labels in `support` and `query` are episode labels
/// `0..ways`; `class_map[e]` is the dataset class behind episode label `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: EmbeddingSet,
    pub query: EmbeddingSet,
    pub class_map: Vec<u32>,
}

/// Samples episode `index` of the stream defined by `spec.seed`.
///
/// The generator is `rng::for_stream(seed, index)`. Classes are drawn
/// without replacement, then `shots + queries` items per class without
/// replacement; the first `shots` go to the support. Both sets are ordered
/// class-major in episode-label order.
pub fn sample_episode(data: &EmbeddingSet, spec: &EpisodeSpec, index: u64) -> Result<Episode> {
    spec.check(data)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
    for (i, label) in data.labels().enumerate() {
        if let Some(m) = members.get_mut(label as usize) {
            m.push(i);
        }
    }

    let mut r = rng::for_stream(spec.seed, index);
    let classes = rand::seq::index::sample(&mut r, data.num_classes(), spec.ways).into_vec();
    let per_class = spec.shots + spec.queries_per_class;
    let mut support = Vec::with_capacity(spec.ways * spec.shots);
    let mut query = Vec::with_capacity(spec.ways * spec.queries_per_class);
    for (episode_label, &class) in classes.iter().enumerate() {
        let pool = &members[class];
        let picks = rand::seq::index::sample(&mut r, pool.len(), per_class);
        for (k, p) in picks.iter().enumerate() {
            let item = LabeledEmbedding {
                embedding: data.items()[pool[p]].embedding.clone(),
                label: episode_label as u32,
            };
            if k < spec.shots {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    Ok(Episode {
        support: EmbeddingSet::new(data.dim(), spec.ways, support)?,
        query: EmbeddingSet::new(data.dim(), spec.ways, query)?,
        class_map: classes.into_iter().map(|c| c as u32).collect(),
    })
}

/// Affine standardization estimated on the support: subtract the support
/// mean, divide by the average per-coordinate standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub center: Vec<f64>,
    pub scale: f64,
}

impl Standardizer {
    pub fn fit(support: &EmbeddingSet) -> Result<Self> {
        support.require_non_empty("support set")?;
        let d = support.dim();
        let n = support.len() as f64;
        let mut center = vec![0.0; d];
        for v in support.vectors() {
            for (c, x) in center.iter_mut().zip(v) {
                *c += x;
            }
        }
        for c in &mut center {
            *c /= n;
        }
        let denom = (n - 1.0).max(1.0);
        let mut std_sum = 0.0;
        for j in 0..d {
            let var: f64 = support.vectors().map(|v| (v[j] - center[j]).powi(2)).sum::<f64>() / denom;
            std_sum += var.sqrt();
        }
        let mean_std = std_sum / d as f64;
        let scale = if mean_std > 0.0 && mean_std.is_finite() { mean_std } else { 1.0 };
        Ok(Standardizer { center, scale })
    }

    pub fn apply(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        let items = set
            .items()
            .iter()
            .map(|it| LabeledEmbedding {
                embedding: Embedding::from_raw(
                    it.embedding
                        .as_slice()
                        .iter()
                        .zip(&self.center)
                        .map(|(x, c)| (x - c) / self.scale)
                        .collect(),
                ),
                label: it.label,
            })
            .collect();
        EmbeddingSet::new(set.dim(), set.num_classes(), items)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "frozen")]
    FrozenBaseline,
    #[serde(rename = "tilted-inductive")]
    TiltedInductive,
    #[serde(rename = "tilted-transductive")]
    TiltedTransductive,
    #[serde(rename = "knn")]
    Knn,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::FrozenBaseline, Mode::TiltedInductive, Mode::TiltedTransductive, Mode::Knn];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::FrozenBaseline => "frozen",
            Mode::TiltedInductive => "tilted-inductive",
            Mode::TiltedTransductive => "tilted-transductive",
            Mode::Knn => "knn",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown mode `{s}`")))
    }
}

/// How the tilting strength is chosen for each episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strength {
    /// A fixed multiplier shared by all episodes.
    Lambda(f64),
    /// Solve for the multiplier that makes the tilted mean score equal
    /// `target`. Targets at or below the untilted mean give `λ = 0`;
    /// targets at or above the largest score are infeasible.
    Target(f64),
}

impl fmt::Display for Strength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strength::Lambda(l) => write!(f, "{l}"),
            Strength::Target(c) => write!(f, "c={c}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub score: ScoreKind,
    pub strength: Strength,
    pub tau: f64,
    pub knn_k: usize,
    pub episodes: usize,
    pub shrinkage: f64,
    pub ridge: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::FrozenBaseline,
            score: ScoreKind::Confidence,
            strength: Strength::Lambda(1.0),
            tau: classify::DEFAULT_TAU,
            knn_k: 1,
            episodes: 100,
            shrinkage: DEFAULT_SHRINKAGE,
            ridge: DEFAULT_RIDGE,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::validation(format!("tau must be positive, got {}", self.tau)));
        }
        if self.episodes == 0 {
            return Err(Error::validation("at least one episode is required"));
        }
        if self.knn_k == 0 {
            return Err(Error::validation("knn-k must be at least 1"));
        }
        match self.strength {
            Strength::Lambda(l) if !(l >= 0.0 && l.is_finite()) => {
                Err(Error::validation(format!("lambda must be finite and >= 0, got {l}")))
            }
            Strength::Target(c) if !c.is_finite() => Err(Error::validation("moment target must be finite")),
            _ => Ok(()),
        }
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        RunConfig { mode, ..self.clone() }
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        RunConfig {
            strength: Strength::Lambda(lambda),
            ..self.clone()
        }
    }

    fn resolve_lambda(&self, scores: &[f64]) -> Result<f64> {
        match self.strength {
            Strength::Lambda(l) => Ok(l),
            Strength::Target(c) => {
                let mean = scores.iter().sum::<f64>() / scores.len() as f64;
                if c <= mean {
                    return Ok(0.0);
                }
                tilting::solve_lambda(
                    scores,
                    MomentConstraint { target: c },
                    tilting::DEFAULT_TOL,
                    tilting::DEFAULT_MAX_ITER,
                )
            }
        }
    }
}

struct Prepared {
    support: EmbeddingSet,
    query: EmbeddingSet,
}

fn prepare(ep: &Episode) -> Result<Prepared> {
    let st = Standardizer::fit(&ep.support)?;
    Ok(Prepared {
        support: st.apply(&ep.support)?,
        query: st.apply(&ep.query)?,
    })
}

fn accuracy(query: &EmbeddingSet, predicted: &[usize]) -> f64 {
    let correct = query
        .labels()
        .zip(predicted)
        .filter(|(y, p)| *y as usize == **p)
        .count();
    correct as f64 / query.len() as f64
}

fn predict_all(query: &EmbeddingSet, clf: &PrototypeClassifier) -> Result<Vec<usize>> {
    query.vectors().map(|z| predict(z, clf)).collect()
}

/// Uniform prototypes from the support, no adaptation.
pub fn run_frozen_baseline(ep: &Episode, tau: f64) -> Result<f64> {
    let p = prepare(ep)?;
    let clf = build_prototypes(&p.support, None, tau)?;
    Ok(accuracy(&p.query, &predict_all(&p.query, &clf)?))
}

/// Tilts the support measure and rebuilds prototypes from it.
pub fn run_tilted_inductive(ep: &Episode, cfg: &RunConfig) -> Result<f64> {
    let p = prepare(ep)?;
    let frozen = build_prototypes(&p.support, None, cfg.tau)?;
    let geometry = if cfg.score.needs_geometry() {
        Some(fit_gaussian_summary(&p.support, cfg.shrinkage, cfg.ridge)?)
    } else {
        None
    };
    let score = cfg.score.build(&frozen, geometry.as_ref())?;
    let s = score.eval_set(&p.support)?;
    let measure = tilt_weights(&s, cfg.resolve_lambda(&s)?)?;
    let adapted = build_prototypes(&p.support, Some(&measure), cfg.tau)?;
    Ok(accuracy(&p.query, &predict_all(&p.query, &adapted)?))
}

/// Pseudo-labels the queries with the frozen head, tilts the combined
/// support ∪ query measure once, and rebuilds prototypes from it.
pub fn run_tilted_transductive(ep: &Episode, cfg: &RunConfig) -> Result<f64> {
    let p = prepare(ep)?;
    let frozen = build_prototypes(&p.support, None, cfg.tau)?;
    let pseudo = predict_all(&p.query, &frozen)?;

    let mut items = p.support.items().to_vec();
    items.extend(p.query.items().iter().zip(&pseudo).map(|(it, &y)| LabeledEmbedding {
        embedding: it.embedding.clone(),
        label: y as u32,
    }));
    let combined = EmbeddingSet::new(p.support.dim(), p.support.num_classes(), items)?;

    let geometry = if cfg.score.needs_geometry() {
        Some(fit_gaussian_summary(&p.support, cfg.shrinkage, cfg.ridge)?)
    } else {
        None
    };
    let score = cfg.score.build(&frozen, geometry.as_ref())?;
    let s = score.eval_set(&combined)?;
    let measure = tilt_weights(&s, cfg.resolve_lambda(&s)?)?;
    let adapted = build_prototypes(&combined, Some(&measure), cfg.tau)?;
    Ok(accuracy(&p.query, &predict_all(&p.query, &adapted)?))
}

pub fn run_knn(ep: &Episode, k: usize) -> Result<f64> {
    let p = prepare(ep)?;
    let predicted = p
        .query
        .items()
        .iter()
        .map(|it| knn_predict(&it.embedding, &p.support, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(accuracy(&p.query, &predicted))
}

pub fn run_episode(ep: &Episode, cfg: &RunConfig) -> Result<f64> {
    match cfg.mode {
        Mode::FrozenBaseline => run_frozen_baseline(ep, cfg.tau),
        Mode::TiltedInductive => run_tilted_inductive(ep, cfg),
        Mode::TiltedTransductive => run_tilted_transductive(ep, cfg),
        Mode::Knn => run_knn(ep, cfg.knn_k),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: RunConfig,
    pub spec: EpisodeSpec,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `accuracies`.
    pub std: f64,
    pub seconds: f64,
}

/// Two-pass mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn evaluate(data: &EmbeddingSet, spec: &EpisodeSpec, cfg: &RunConfig, index: usize) -> Result<f64> {
    let ep = sample_episode(data, spec, index as u64)?;
    run_episode(&ep, cfg)
}

/// Evaluates `cfg.episodes` episodes (indices `0..E`) on `workers` threads.
///
/// Results are collected in episode order, so every statistic is
/// independent of the worker count. The first failing episode, by index,
/// aborts the run.
pub fn run_benchmark(data: &EmbeddingSet, spec: &EpisodeSpec, cfg: &RunConfig, workers: usize) -> Result<RunResult> {
    cfg.validate()?;
    spec.check(data)?;
    let start = Instant::now();
    let outcomes: Vec<Result<f64>> = if workers <= 1 {
        (0..cfg.episodes).map(|i| evaluate(data, spec, cfg, i)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::validation(format!("cannot start {workers} workers: {e}")))?;
        pool.install(|| {
            (0..cfg.episodes)
                .into_par_iter()
                .map(|i| evaluate(data, spec, cfg, i))
                .collect()
        })
    };
    let mut accuracies = Vec::with_capacity(outcomes.len());
    for (index, outcome) in outcomes.into_iter().enumerate() {
        accuracies.push(outcome.map_err(|e| Error::Episode {
            index,
            source: Box::new(e),
        })?);
    }
    let (mean, std) = mean_std(&accuracies);
    Ok(RunResult {
        config: cfg.clone(),
        spec: *spec,
        accuracies,
        mean,
        std,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// One benchmark per grid value with identical episode seeds.
pub fn ablate_lambda(
    data: &EmbeddingSet,
    spec: &EpisodeSpec,
    cfg: &RunConfig,
    grid: &[f64],
    workers: usize,
) -> Result<Vec<RunResult>> {
    if grid.is_empty() {
        return Err(Error::validation("lambda grid is empty"));
    }
    if let Some(l) = grid.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
        return Err(Error::validation(format!("lambda grid value {l} must be finite and >= 0")));
    }
    grid.iter()
        .map(|&l| run_benchmark(data, spec, &cfg.with_lambda(l), workers))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent_store::{generate_synthetic, SyntheticShiftSpec};

    fn separated() -> EmbeddingSet {
        generate_synthetic(&SyntheticShiftSpec {
            num_classes: 8,
            dim: 16,
            per_class: 25,
            class_mean_scale: 10.0,
            within_class_std: 0.01,
            seed: 17,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn sampling_is_deterministic_and_disjoint() {
        let data = separated();
        let spec = EpisodeSpec { ways: 5, shots: 5, queries_per_class: 15, seed: 3 };
        let a = sample_episode(&data, &spec, 12).unwrap();
        let b = sample_episode(&data, &spec, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_episode(&data, &spec, 13).unwrap());
        assert_eq!(a.support.class_counts(), vec![5; 5]);
        assert_eq!(a.query.class_counts(), vec![15; 5]);
        let mut distinct = a.class_map.clone();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 5);
    }

    #[test]
    fn full_class_split_covers_the_class() {
        let data = separated();
        let spec = EpisodeSpec { ways: 2, shots: 10, queries_per_class: 15, seed: 1 };
        let ep = sample_episode(&data, &spec, 0).unwrap();
        for e in 0..2u32 {
            let class = ep.class_map[e as usize];
            let mut original: Vec<Vec<u32>> = data
                .items()
                .iter()
                .filter(|it| it.label == class)
                .map(|it| it.embedding.as_slice().iter().map(|v| v.to_bits() as u32).collect())
                .collect();
            let mut drawn: Vec<Vec<u32>> = ep
                .support
                .items()
                .iter()
                .chain(ep.query.items())
                .filter(|it| it.label == e)
                .map(|it| it.embedding.as_slice().iter().map(|v| v.to_bits() as u32).collect())
                .collect();
            original.sort();
            drawn.sort();
            assert_eq!(original, drawn);
        }
    }

    #[test]
    fn insufficient_class_is_named() {
        let data = EmbeddingSet::from_rows(
            1,
            2,
            vec![(0, vec![1.0]), (0, vec![2.0]), (1, vec![3.0])],
        )
        .unwrap();
        let spec = EpisodeSpec { ways: 2, shots: 1, queries_per_class: 1, seed: 0 };
        let err = sample_episode(&data, &spec, 0).unwrap_err().to_string();
        assert!(err.contains("class 1"), "{err}");
    }

    #[test]
    fn separated_episodes_are_solved() {
        let data = separated();
        let spec = EpisodeSpec { seed: 9, ..Default::default() };
        for i in 0..10 {
            let ep = sample_episode(&data, &spec, i).unwrap();
            assert_eq!(run_frozen_baseline(&ep, 10.0).unwrap(), 1.0);
        }
    }

    #[test]
    fn zero_lambda_inductive_equals_baseline() {
        let data = generate_synthetic(&SyntheticShiftSpec {
            num_classes: 10,
            dim: 16,
            per_class: 30,
            class_mean_scale: 2.0,
            within_class_std: 1.0,
            corrupt_fraction: 0.2,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let spec = EpisodeSpec { seed: 2, ..Default::default() };
        for score in ScoreKind::ALL {
            let cfg = RunConfig {
                mode: Mode::TiltedInductive,
                score,
                strength: Strength::Lambda(0.0),
                ..Default::default()
            };
            for i in 0..5 {
                let ep = sample_episode(&data, &spec, i).unwrap();
                assert_eq!(
                    run_tilted_inductive(&ep, &cfg).unwrap().to_bits(),
                    run_frozen_baseline(&ep, cfg.tau).unwrap().to_bits()
                );
            }
        }
    }

    #[test]
    fn mean_std_cases() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_std(&[0.0, 1.0]);
        assert_eq!((m, s), (0.5, 0.5));
    }

    #[test]
    fn config_validation() {
        let bad = RunConfig { strength: Strength::Lambda(-0.5), ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(RunConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
        assert_eq!("tilted-transductive".parse::<Mode>().unwrap(), Mode::TiltedTransductive);
        assert!("tent".parse::<Mode>().is_err());
    }

    #[test]
    fn target_mode_solves_per_episode() {
        let data = generate_synthetic(&SyntheticShiftSpec {
            num_classes: 6,
            dim: 8,
            per_class: 25,
            class_mean_scale: 1.5,
            seed: 8,
            ..Default::default()
        })
        .unwrap();
        let spec = EpisodeSpec { seed: 5, ..Default::default() };
        // Log-probability scores never exceed 0, so a target of 1 is infeasible.
        let cfg = RunConfig {
            mode: Mode::TiltedInductive,
            score: ScoreKind::Label,
            strength: Strength::Target(1.0),
            ..Default::default()
        };
        let ep = sample_episode(&data, &spec, 0).unwrap();
        let below = RunConfig {
            strength: Strength::Target(-1e9),
            ..cfg.clone()
        };
        assert_eq!(
            run_tilted_inductive(&ep, &below).unwrap(),
            run_frozen_baseline(&ep, cfg.tau).unwrap()
        );
        assert!(run_tilted_inductive(&ep, &cfg).is_err());
        let ep_err = run_benchmark(&data, &spec, &RunConfig { episodes: 3, ..cfg }, 1).unwrap_err();
        assert!(matches!(ep_err, Error::Episode { index: 0, .. }));
    }
}
