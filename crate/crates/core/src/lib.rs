//! Training-free test-time adaptation by exponential tilting of empirical
//! latent-embedding distributions.
//!
//! A frozen encoder's support embeddings define a uniform empirical measure.
//! Scoring each embedding with a task-relevance score `s(z)` and reweighting
//! by `exp(λ s(z))` gives the KL-closest measure that meets a moment
//! constraint on `s`. Predictions come from the unchanged frozen head
//! evaluated under the reweighted measure.
//!
//! Module map:
//! - [`latent_store`]: embedding sets, `TLT1`/JSONL files, synthetic mixtures
//! - [`scores`]: label-aware, geometry-aware, confidence and composite scores
//! - [`tilting`]: tilted weights, log-partition, λ solver, KL, first-order expansion
//! - [`classify`]: cosine prototype head, tilted marginal, k-NN
//! - [`episodes`]: episodic sampling, pipelines and benchmark runs
//! - [`oracle`]: independent brute-force checks
//! - [`validate`]: the theory suite behind `tilt validate`
//! - [`report`]: CSV/JSON run reports

pub mod classify;
pub mod episodes;
pub mod error;
pub mod latent_store;
pub mod oracle;
pub mod report;
pub mod rng;
pub mod scores;
pub mod tilting;
pub mod validate;

pub use classify::{PosteriorVector, PrototypeClassifier};
pub use episodes::{Episode, EpisodeSpec, Mode, RunConfig, RunResult, Strength};
pub use error::{Error, Result};
pub use latent_store::{Embedding, EmbeddingSet, Format, LabeledEmbedding, SyntheticShiftSpec};
pub use scores::{GaussianSummary, ScoreFn, ScoreKind};
pub use tilting::{MomentConstraint, TiltedMeasure};
