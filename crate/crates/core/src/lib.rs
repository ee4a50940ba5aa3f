//! Metric-embedding training with the multibatch gradient estimator.
//!
//! A pairwise hinge loss with one learned global threshold is averaged over
//! all ordered pairs of a dataset. Three estimators approximate its
//! gradient at equal network cost: the exact full gradient, the standard
//! pairwise minibatch (`k/2` independent pairs), and the multibatch
//! estimator, which embeds `k` samples and scores all `k² − k` pairs among
//! them. The [`variance`] module measures how their variances scale with
//! `k`; [`trainer`] runs SGD with either estimator.

pub mod data;
pub mod embedding;
pub mod error;
pub mod estimators;
pub mod io;
pub mod losses;
pub mod tensor;
pub mod trainer;
pub mod variance;

pub use data::{gen_fig2_dataset, gen_gaussian_clusters, ClusterSpec, Dataset, Sample};
pub use embedding::{EmbeddingState, ModelKind, ModelSpec};
pub use error::{Error, Result};
pub use estimators::{EstimatorKind, GradientEstimate};
pub use losses::{MulticlassHead, PairLabel, PairWeighting, Weighting};
pub use tensor::{Mat64, Rng, Vec64};
pub use trainer::{TrainConfig, TrainHistory};
pub use variance::{Combinations, PairGradTable, VarianceReport};
