//! Cluster-entropy data cleansing.
//!
//! Each cluster gets the distribution of pseudo-labels among its members. Its
//! normalized entropy measures how mixed it is, and the entropy weight
//! `(1 - ent_i) / sum_j (1 - ent_j)` ranks clusters by certainty. Clusters
//! with weight at least `tau` survive. Within those, only members agreeing with
//! the cluster majority are kept.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::feature_store::{FeatureDataset, FeatureError};
use crate::representation::argmax;

#[derive(Debug, Error, PartialEq)]
pub enum CleansingError {
    #[error("cluster {0} is empty")]
    EmptyCluster(usize),
    #[error("every cluster is maximally uncertain; no certain clusters")]
    NoCertainClusters,
    #[error("threshold too strong: no cluster has entropy weight >= {tau}")]
    ThresholdTooStrong { tau: f64 },
    #[error("cleansed dataset is empty")]
    EmptyClean,
    #[error("assignments and labels differ in length ({assignments} vs {labels})")]
    LengthMismatch { assignments: usize, labels: usize },
    #[error("label {label} out of range for {num_labels} labels")]
    LabelOutOfRange { label: usize, num_labels: usize },
    #[error("{0}")]
    Dataset(String),
}

impl From<FeatureError> for CleansingError {
    fn from(e: FeatureError) -> Self {
        CleansingError::Dataset(e.to_string())
    }
}

/// Per-cluster label statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    pub sizes: Vec<usize>,
    pub label_dist: Vec<Vec<f64>>,
    pub norm_ent: Vec<f64>,
    pub ew: Vec<f64>,
    pub majority: Vec<usize>,
}

impl ClusterStats {
    pub fn num_clusters(&self) -> usize {
        self.sizes.len()
    }
}

/// Fraction of cluster `cluster`'s members carrying each pseudo-label.
pub fn cluster_label_distribution(
    assignments: &[usize],
    pseudo_labels: &[usize],
    cluster: usize,
    num_labels: usize,
) -> Result<Vec<f64>, CleansingError> {
    if assignments.len() != pseudo_labels.len() {
        return Err(CleansingError::LengthMismatch {
            assignments: assignments.len(),
            labels: pseudo_labels.len(),
        });
    }
    let mut counts = vec![0usize; num_labels];
    let mut size = 0usize;
    for (&a, &label) in assignments.iter().zip(pseudo_labels) {
        if a != cluster {
            continue;
        }
        if label >= num_labels {
            return Err(CleansingError::LabelOutOfRange { label, num_labels });
        }
        counts[label] += 1;
        size += 1;
    }
    if size == 0 {
        return Err(CleansingError::EmptyCluster(cluster));
    }
    Ok(counts.into_iter().map(|c| c as f64 / size as f64).collect())
}

/// Shannon entropy (natural log) over `log(num_labels)`, clamped to `[0, 1]`.
pub fn normalized_entropy(dist: &[f64], num_labels: usize) -> f64 {
    assert!(
        num_labels >= 2,
        "normalized entropy needs at least two labels"
    );
    if dist.len() == num_labels && dist[0] > 0.0 && dist.iter().all(|&p| p == dist[0]) {
        return 1.0;
    }
    let h: f64 = dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    let ent = h / (num_labels as f64).ln();
    // uniform inputs like 1/3 land a few ulps off 1
    if (ent - 1.0).abs() <= 8.0 * f64::EPSILON {
        1.0
    } else {
        ent.clamp(0.0, 1.0)
    }
}

pub fn entropy_weights(norm_ents: &[f64]) -> Result<Vec<f64>, CleansingError> {
    let certainty: Vec<f64> = norm_ents.iter().map(|e| 1.0 - e).collect();
    let total: f64 = certainty.iter().sum();
    if total <= 0.0 {
        return Err(CleansingError::NoCertainClusters);
    }
    Ok(certainty.into_iter().map(|c| c / total).collect())
}

/// Indices of clusters whose entropy weight reaches `tau`.
pub fn select_clean_clusters(ew: &[f64], tau: f64) -> Result<Vec<usize>, CleansingError> {
    let selected: Vec<usize> = ew
        .iter()
        .enumerate()
        .filter(|(_, &w)| w >= tau)
        .map(|(i, _)| i)
        .collect();
    if selected.is_empty() {
        return Err(CleansingError::ThresholdTooStrong { tau });
    }
    Ok(selected)
}

/// Statistics for clusters `0..num_clusters`, all of which must be non-empty.
pub fn cluster_stats(
    assignments: &[usize],
    pseudo_labels: &[usize],
    num_clusters: usize,
    num_labels: usize,
) -> Result<ClusterStats, CleansingError> {
    if assignments.len() != pseudo_labels.len() {
        return Err(CleansingError::LengthMismatch {
            assignments: assignments.len(),
            labels: pseudo_labels.len(),
        });
    }
    let mut counts = vec![vec![0usize; num_labels]; num_clusters];
    for (&a, &label) in assignments.iter().zip(pseudo_labels) {
        if label >= num_labels {
            return Err(CleansingError::LabelOutOfRange { label, num_labels });
        }
        counts[a][label] += 1;
    }
    let mut sizes = Vec::with_capacity(num_clusters);
    let mut label_dist = Vec::with_capacity(num_clusters);
    for (i, row) in counts.iter().enumerate() {
        let size: usize = row.iter().sum();
        if size == 0 {
            return Err(CleansingError::EmptyCluster(i));
        }
        sizes.push(size);
        label_dist.push(
            row.iter()
                .map(|&c| c as f64 / size as f64)
                .collect::<Vec<_>>(),
        );
    }
    let norm_ent: Vec<f64> = label_dist
        .iter()
        .map(|d| normalized_entropy(d, num_labels))
        .collect();
    let ew = entropy_weights(&norm_ent)?;
    let majority = label_dist.iter().map(|d| argmax(d)).collect();
    Ok(ClusterStats {
        sizes,
        label_dist,
        norm_ent,
        ew,
        majority,
    })
}

/// Positions of records kept by the majority rule inside `clean` clusters.
/// Records flagged in `pinned` are kept whenever their cluster exists,
/// regardless of selection or majority.
pub fn clean_indices(
    assignments: &[usize],
    pseudo_labels: &[usize],
    clean: &[usize],
    stats: &ClusterStats,
    pinned: Option<&[bool]>,
) -> Vec<usize> {
    let mut selected = vec![false; stats.num_clusters()];
    for &c in clean {
        selected[c] = true;
    }
    assignments
        .iter()
        .zip(pseudo_labels)
        .enumerate()
        .filter(|&(i, (&a, &label))| {
            pinned.is_some_and(|p| p[i]) || (selected[a] && label == stats.majority[a])
        })
        .map(|(i, _)| i)
        .collect()
}

/// Labels with no record among `kept`.
pub fn missing_classes(pseudo_labels: &[usize], kept: &[usize], num_labels: usize) -> Vec<usize> {
    let mut present = vec![false; num_labels];
    for &i in kept {
        present[pseudo_labels[i]] = true;
    }
    (0..num_labels).filter(|&c| !present[c]).collect()
}

/// Records of the clean clusters that agree with their cluster majority.
pub fn majority_filter(
    dataset: &FeatureDataset,
    assignments: &[usize],
    clean: &[usize],
    stats: &ClusterStats,
) -> Result<FeatureDataset, CleansingError> {
    let labels = dataset.pseudo_labels();
    let kept = clean_indices(assignments, &labels, clean, stats, None);
    if kept.is_empty() {
        return Err(CleansingError::EmptyClean);
    }
    let missing = missing_classes(&labels, &kept, dataset.num_labels());
    if !missing.is_empty() {
        log::warn!("classes absent from cleansed dataset: {missing:?}");
    }
    Ok(dataset.select(&kept)?)
}

/// Outcome of a full cleansing pass, by record position.
#[derive(Debug, Clone, PartialEq)]
pub struct Cleansed {
    pub stats: ClusterStats,
    pub clean_clusters: Vec<usize>,
    pub kept: Vec<usize>,
}

impl Cleansed {
    /// Records of clean clusters kept, per cluster.
    pub fn kept_per_cluster(&self, assignments: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.stats.num_clusters()];
        for &i in &self.kept {
            counts[assignments[i]] += 1;
        }
        counts
    }

    pub fn dropped(&self, n: usize) -> Vec<usize> {
        let kept: BTreeSet<usize> = self.kept.iter().copied().collect();
        (0..n).filter(|i| !kept.contains(i)).collect()
    }
}

/// Statistics, cluster selection and majority filtering on raw label vectors.
pub fn cleanse_labels(
    assignments: &[usize],
    pseudo_labels: &[usize],
    num_clusters: usize,
    num_labels: usize,
    tau: f64,
    pinned: Option<&[bool]>,
) -> Result<Cleansed, CleansingError> {
    let stats = cluster_stats(assignments, pseudo_labels, num_clusters, num_labels)?;
    let clean_clusters = select_clean_clusters(&stats.ew, tau)?;
    let kept = clean_indices(assignments, pseudo_labels, &clean_clusters, &stats, pinned);
    if kept.is_empty() {
        return Err(CleansingError::EmptyClean);
    }
    Ok(Cleansed {
        stats,
        clean_clusters,
        kept,
    })
}

/// Cleanse a dataset against a clustering of its records.
pub fn cleanse(
    dataset: &FeatureDataset,
    clusters: &crate::kmeans::ClusterModel,
    tau: f64,
) -> Result<(FeatureDataset, ClusterStats), CleansingError> {
    let labels = dataset.pseudo_labels();
    let stats = cluster_stats(
        &clusters.assignments,
        &labels,
        clusters.k(),
        dataset.num_labels(),
    )?;
    let clean = select_clean_clusters(&stats.ew, tau)?;
    let filtered = majority_filter(dataset, &clusters.assignments, &clean, &stats)?;
    Ok((filtered, stats))
}
