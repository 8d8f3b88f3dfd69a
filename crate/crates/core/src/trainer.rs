//! Recursive cleanse → fit → relabel training.
//!
//! Each epoch clusters the fused vectors, cleanses the current pseudo-labels,
//! fits LDA on the surviving records, blends the fit into the running model and
//! relabels every record with it. Training stops once fewer than `delta` of the
//! labels change between epochs.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cleansing::{self, CleansingError};
use crate::feature_store::FeatureDataset;
use crate::kmeans::{self, KMeansError, KMeansParams};
use crate::lda::{LdaError, LdaModel, Shrinkage};
use crate::representation::{fuse_dataset, FusedVector};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("class {0} has no pseudo-labeled record")]
    MissingClass(usize),
    #[error("class {class} vanished from the cleansed dataset at epoch {epoch}")]
    ClassVanished { class: usize, epoch: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    KMeans(#[from] KMeansError),
    #[error(transparent)]
    Cleansing(#[from] CleansingError),
    #[error(transparent)]
    Lda(#[from] LdaError),
}

/// Exit threshold on the fraction of labels that change in one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Delta {
    Fixed(f64),
    /// `max(0.001, 50 / n)`.
    Adaptive(AdaptiveTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptiveTag {
    Adaptive,
}

impl Delta {
    pub const ADAPTIVE: Delta = Delta::Adaptive(AdaptiveTag::Adaptive);

    pub fn resolve(self, n: usize) -> f64 {
        match self {
            Delta::Fixed(d) => d,
            Delta::Adaptive(_) => (50.0 / n as f64).max(0.001),
        }
    }
}

impl std::str::FromStr for Delta {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("adaptive") {
            return Ok(Delta::ADAPTIVE);
        }
        s.parse::<f64>()
            .map(Delta::Fixed)
            .map_err(|_| format!("expected a number or \"adaptive\", got {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Cluster count; `None` picks it from the label count.
    pub clusters: Option<usize>,
    /// Entropy-weight threshold; `None` means `1 / (2K)`.
    pub tau: Option<f64>,
    pub delta: Delta,
    pub max_epochs: usize,
    pub seed: u64,
    /// Covariance ridge; `None` uses the trace-scaled default.
    pub eps: Option<f64>,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            clusters: None,
            tau: None,
            delta: Delta::Fixed(0.005),
            max_epochs: 20,
            seed: 13,
            eps: None,
            kmeans_max_iter: 300,
            kmeans_tol: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if let Some(tau) = self.tau {
            if !(tau >= 0.0 && tau.is_finite()) {
                return Err(TrainError::Config(format!("tau must be >= 0, got {tau}")));
            }
        }
        if let Delta::Fixed(d) = self.delta {
            if !(d > 0.0 && d <= 1.0) {
                return Err(TrainError::Config(format!(
                    "delta must be in (0, 1], got {d}"
                )));
            }
        }
        if self.max_epochs == 0 {
            return Err(TrainError::Config("max_epochs must be at least 1".into()));
        }
        if self.clusters == Some(0) {
            return Err(TrainError::Config("clusters must be positive".into()));
        }
        if let Some(eps) = self.eps {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(TrainError::Config(format!(
                    "eps must be positive, got {eps}"
                )));
            }
        }
        Ok(())
    }

    pub fn cluster_count(&self, num_labels: usize, n: usize) -> usize {
        self.clusters
            .unwrap_or_else(|| kmeans::capped_cluster_count(num_labels, n))
    }

    pub fn tau_for(&self, k: usize) -> f64 {
        self.tau.unwrap_or(1.0 / (2.0 * k as f64))
    }

    pub fn shrinkage(&self) -> Shrinkage {
        self.eps.map_or(Shrinkage::Auto, Shrinkage::Fixed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub clean_size: usize,
    pub kept_fraction: f64,
    pub selected_clusters: usize,
    pub label_change_ratio: f64,
    pub inertia: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn write_csv(&self, out: impl Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: LdaModel,
    pub history: TrainHistory,
    pub converged: bool,
    /// Final pseudo-labels, in record order.
    pub labels: Vec<usize>,
    pub clusters: usize,
    pub tau: f64,
    pub delta: f64,
}

/// Fraction of positions where the two label vectors differ.
pub fn label_change_ratio(old: &[usize], new: &[usize]) -> Result<f64, TrainError> {
    if old.len() != new.len() {
        return Err(TrainError::LengthMismatch(old.len(), new.len()));
    }
    if old.is_empty() {
        return Ok(0.0);
    }
    let changed = old.iter().zip(new).filter(|(a, b)| a != b).count();
    Ok(changed as f64 / old.len() as f64)
}

pub fn run(dataset: &FeatureDataset, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let points = fuse_dataset(dataset);
    run_on_points(
        &points,
        &dataset.ids(),
        &dataset.pseudo_labels(),
        dataset.num_labels(),
        config,
        None,
        |_, _| {},
    )
}

/// The training loop over precomputed fused vectors.
///
/// `pinned` marks records whose labels are trusted: they are always part of
/// the cleansed set and are never relabeled. `observer` sees every epoch's
/// record and blended model.
pub fn run_on_points(
    points: &[FusedVector],
    ids: &[u64],
    initial_labels: &[usize],
    num_labels: usize,
    config: &TrainConfig,
    pinned: Option<&[bool]>,
    mut observer: impl FnMut(&EpochRecord, &LdaModel),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let n = points.len();
    if initial_labels.len() != n {
        return Err(TrainError::LengthMismatch(n, initial_labels.len()));
    }
    if let Some(p) = pinned {
        if p.len() != n {
            return Err(TrainError::LengthMismatch(n, p.len()));
        }
    }
    let mut seen = vec![false; num_labels];
    for &l in initial_labels {
        if l >= num_labels {
            return Err(TrainError::Config(format!("label {l} out of range")));
        }
        seen[l] = true;
    }
    if let Some(c) = seen.iter().position(|&s| !s) {
        return Err(TrainError::MissingClass(c));
    }

    let k = config.cluster_count(num_labels, n);
    let tau = config.tau_for(k);
    let delta = config.delta.resolve(n);
    let shrinkage = config.shrinkage();

    let mut labels = initial_labels.to_vec();
    let mut model: Option<LdaModel> = None;
    let mut history = TrainHistory::default();
    let mut converged = false;

    for epoch in 1..=config.max_epochs {
        let params = KMeansParams {
            k,
            seed: config.seed,
            stream: epoch as u64,
            max_iter: config.kmeans_max_iter,
            tol: config.kmeans_tol,
        };
        let clusters = kmeans::kmeans_fit(points, ids, &params)?;
        let cleansed =
            cleansing::cleanse_labels(&clusters.assignments, &labels, k, num_labels, tau, pinned)?;

        let missing = cleansing::missing_classes(&labels, &cleansed.kept, num_labels);
        if let (None, Some(&class)) = (&model, missing.first()) {
            return Err(TrainError::ClassVanished { class, epoch });
        }
        if !missing.is_empty() {
            log::warn!(
                "epoch {epoch}: classes {missing:?} absent after cleansing; keeping previous means"
            );
        }

        let clean_points: Vec<&FusedVector> = cleansed.kept.iter().map(|&i| &points[i]).collect();
        let clean_labels: Vec<usize> = cleansed.kept.iter().map(|&i| labels[i]).collect();
        let fit = LdaModel::fit(
            &clean_points,
            &clean_labels,
            num_labels,
            shrinkage,
            model.as_ref(),
        )?;
        let blended =
            LdaModel::moving_average_update(model.as_ref().unwrap_or(&fit), &fit, epoch as u64)?;

        let mut relabeled = blended.predict_batch(points)?;
        if let Some(p) = pinned {
            for (i, l) in relabeled.iter_mut().enumerate() {
                if p[i] {
                    *l = labels[i];
                }
            }
        }
        let ratio = label_change_ratio(&labels, &relabeled)?;
        let record = EpochRecord {
            epoch,
            clean_size: cleansed.kept.len(),
            kept_fraction: cleansed.kept.len() as f64 / n as f64,
            selected_clusters: cleansed.clean_clusters.len(),
            label_change_ratio: ratio,
            inertia: clusters.inertia,
        };
        log::info!(
            "epoch {epoch}: kept {:.4} ({} records, {} clusters), label change {:.4}",
            record.kept_fraction,
            record.clean_size,
            record.selected_clusters,
            ratio
        );
        observer(&record, &blended);
        history.epochs.push(record);
        labels = relabeled;
        model = Some(blended);
        if ratio < delta {
            converged = true;
            break;
        }
    }

    Ok(TrainOutcome {
        model: model.expect("max_epochs >= 1"),
        history,
        converged,
        labels,
        clusters: k,
        tau,
        delta,
    })
}
