//! Weakly-supervised text classification over frozen language-model features.
//!
//! Each example arrives as a pooled hidden vector, a verbalizer label
//! distribution and a pseudo-label (see [`feature_store`]). Training clusters the
//! fused vectors, drops uncertain clusters and dissenting members
//! ([`cleansing`]), fits a tied-covariance discriminant ([`lda`]) and relabels
//! the data with it until the labels stop moving ([`trainer`]).
//! [`active_learning`] spends a small human labeling budget on
//! centroid-nearest examples for label spaces where the initial pseudo-labels
//! are poor.

pub mod active_learning;
pub mod cleansing;
pub mod cli;
pub mod feature_store;
pub mod kmeans;
pub mod lda;
pub mod metrics;
pub mod representation;
pub mod synthetic;
pub mod trainer;

pub use feature_store::{FeatureDataset, FeatureRecord};
pub use lda::LdaModel;
pub use representation::FusedVector;
pub use trainer::{TrainConfig, TrainOutcome};
