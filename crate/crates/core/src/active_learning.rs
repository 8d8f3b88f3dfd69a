//! Centroid-nearest querying and cluster-wide label propagation.
//!
//! The labeling budget is `n_shot × |Y|` queries, one per cluster. Each query
//! is the member nearest its cluster centroid; a human answer for it is copied
//! to every member of that cluster and those records are trusted from then on.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cleansing::{cluster_stats, CleansingError};
use crate::feature_store::{FeatureDataset, FeatureError};
use crate::kmeans::{kmeans_fit, squared_distance, ClusterModel, KMeansError, KMeansParams};
use crate::representation::{fuse_dataset, FusedVector};
use crate::trainer::{self, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum ActiveLearningError {
    #[error("budget of {budget} queries exceeds the {clusters} non-empty clusters")]
    BudgetExceedsClusters { budget: usize, clusters: usize },
    #[error("answer for id {0}, which was not queried")]
    UnqueriedId(u64),
    #[error("answer {label} for id {id} is out of range for {num_labels} labels")]
    LabelOutOfRange {
        id: u64,
        label: u32,
        num_labels: usize,
    },
    #[error("query for id {id} names cluster {file}, but the clustering puts it in {actual}; rerun with the same seed and cluster count")]
    ClusterMismatch { id: u64, file: usize, actual: usize },
    #[error("clustering does not match the dataset ({0})")]
    Shape(String),
    #[error("unknown selection strategy {0:?} (expected \"largest\" or \"highest-entropy\")")]
    UnknownStrategy(String),
    #[error(transparent)]
    KMeans(#[from] KMeansError),
    #[error(transparent)]
    Cleansing(#[from] CleansingError),
    #[error(transparent)]
    Dataset(#[from] FeatureError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("query file: {0}")]
    Csv(#[from] csv::Error),
}

/// Which clusters receive the budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strategy {
    /// Most members first.
    #[default]
    Largest,
    /// Most mixed pseudo-labels first.
    HighestEntropy,
}

impl FromStr for Strategy {
    type Err = ActiveLearningError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "largest" => Ok(Strategy::Largest),
            "highest-entropy" => Ok(Strategy::HighestEntropy),
            other => Err(ActiveLearningError::UnknownStrategy(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: u64,
    pub cluster: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuerySet {
    pub queries: Vec<Query>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn write_csv(&self, out: impl Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        // header even when empty
        w.write_record(["id", "cluster", "distance"])?;
        for q in &self.queries {
            w.write_record([
                q.id.to_string(),
                q.cluster.to_string(),
                q.distance.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(input: impl Read) -> csv::Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let queries = r.deserialize().collect::<Result<Vec<Query>, _>>()?;
        Ok(Self { queries })
    }
}

/// The clustering used for query selection: stream 0 of the run seed.
pub fn query_clustering(
    points: &[FusedVector],
    ids: &[u64],
    k: usize,
    config: &TrainConfig,
) -> Result<ClusterModel, KMeansError> {
    let params = KMeansParams {
        k,
        seed: config.seed,
        stream: 0,
        max_iter: config.kmeans_max_iter,
        tol: config.kmeans_tol,
    };
    kmeans_fit(points, ids, &params)
}

/// Pick `n_shot × num_labels` clusters and return the centroid-nearest member
/// of each. Distances are Euclidean; ties go to the lowest id.
pub fn select_queries(
    clusters: &ClusterModel,
    points: &[FusedVector],
    ids: &[u64],
    pseudo_labels: &[usize],
    num_labels: usize,
    n_shot: usize,
    strategy: Strategy,
) -> Result<QuerySet, ActiveLearningError> {
    if points.len() != clusters.assignments.len() || ids.len() != points.len() {
        return Err(ActiveLearningError::Shape(format!(
            "{} assignments, {} points, {} ids",
            clusters.assignments.len(),
            points.len(),
            ids.len()
        )));
    }
    let sizes = clusters.sizes();
    let non_empty = sizes.iter().filter(|&&s| s > 0).count();
    let budget = n_shot * num_labels;
    if budget > non_empty {
        return Err(ActiveLearningError::BudgetExceedsClusters {
            budget,
            clusters: non_empty,
        });
    }
    if budget == 0 {
        return Ok(QuerySet::default());
    }

    let mut order: Vec<usize> = (0..clusters.k()).filter(|&c| sizes[c] > 0).collect();
    match strategy {
        Strategy::Largest => order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b))),
        Strategy::HighestEntropy => {
            let stats = entropy_by_cluster(clusters, pseudo_labels, num_labels)?;
            order.sort_by(|&a, &b| stats[b].total_cmp(&stats[a]).then(a.cmp(&b)));
        }
    }
    order.truncate(budget);

    let members = clusters.members();
    let queries = order
        .into_iter()
        .map(|c| {
            let centroid = &clusters.centroids[c];
            let best = members[c]
                .iter()
                .map(|&i| (squared_distance(&points[i], centroid), ids[i]))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .expect("cluster is non-empty");
            Query {
                id: best.1,
                cluster: c,
                distance: best.0.sqrt(),
            }
        })
        .collect();
    Ok(QuerySet { queries })
}

fn entropy_by_cluster(
    clusters: &ClusterModel,
    pseudo_labels: &[usize],
    num_labels: usize,
) -> Result<Vec<f64>, ActiveLearningError> {
    if num_labels < 2 {
        return Ok(vec![0.0; clusters.k()]);
    }
    // cluster_stats rejects empty clusters, so score them on the non-empty subset
    let sizes = clusters.sizes();
    let remap: Vec<Option<usize>> = {
        let mut next = 0;
        sizes
            .iter()
            .map(|&s| {
                (s > 0).then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    };
    let compact: Vec<usize> = clusters
        .assignments
        .iter()
        .map(|&a| remap[a].expect("assigned cluster is non-empty"))
        .collect();
    let non_empty = remap.iter().flatten().count();
    let ent = match cluster_stats(&compact, pseudo_labels, non_empty, num_labels) {
        Ok(stats) => stats.norm_ent,
        // every cluster uniform: all equally uncertain
        Err(CleansingError::NoCertainClusters) => vec![1.0; non_empty],
        Err(e) => return Err(e.into()),
    };
    Ok(remap.iter().map(|r| r.map_or(0.0, |j| ent[j])).collect())
}

/// A dataset with propagated labels and the mask of trusted records.
#[derive(Debug, Clone)]
pub struct Propagated {
    pub dataset: FeatureDataset,
    pub trusted: Vec<bool>,
}

/// Copy each answer onto every member of the answered query's cluster.
pub fn propagate_labels(
    dataset: &FeatureDataset,
    clusters: &ClusterModel,
    queries: &QuerySet,
    answers: &BTreeMap<u64, u32>,
) -> Result<Propagated, ActiveLearningError> {
    let n = dataset.len();
    if clusters.assignments.len() != n {
        return Err(ActiveLearningError::Shape(format!(
            "{} assignments for {n} records",
            clusters.assignments.len()
        )));
    }
    let by_id: HashMap<u64, &Query> = queries.queries.iter().map(|q| (q.id, q)).collect();
    let position: HashMap<u64, usize> = dataset
        .ids()
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i))
        .collect();

    let mut cluster_label: BTreeMap<usize, u32> = BTreeMap::new();
    let mut records = dataset.records().to_vec();
    for (&id, &label) in answers {
        let query = by_id.get(&id).ok_or(ActiveLearningError::UnqueriedId(id))?;
        if label as usize >= dataset.num_labels() {
            return Err(ActiveLearningError::LabelOutOfRange {
                id,
                label,
                num_labels: dataset.num_labels(),
            });
        }
        let &i = position
            .get(&id)
            .ok_or(ActiveLearningError::UnqueriedId(id))?;
        let actual = clusters.assignments[i];
        if actual != query.cluster {
            return Err(ActiveLearningError::ClusterMismatch {
                id,
                file: query.cluster,
                actual,
            });
        }
        cluster_label.insert(query.cluster, label);
        records[i].true_label = Some(label);
    }

    let mut trusted = vec![false; n];
    for (i, &a) in clusters.assignments.iter().enumerate() {
        if let Some(&label) = cluster_label.get(&a) {
            records[i].pseudo_label = label;
            trusted[i] = true;
        }
    }
    let dataset = FeatureDataset::new(
        records,
        dataset.hidden_dim(),
        dataset.label_names().to_vec(),
    )?;
    Ok(Propagated { dataset, trusted })
}

/// Propagate answers, then train with the propagated records pinned.
pub fn al_retrain(
    dataset: &FeatureDataset,
    config: &TrainConfig,
    clusters: &ClusterModel,
    queries: &QuerySet,
    answers: &BTreeMap<u64, u32>,
) -> Result<(TrainOutcome, Propagated), ActiveLearningError> {
    let propagated = propagate_labels(dataset, clusters, queries, answers)?;
    let points = fuse_dataset(&propagated.dataset);
    let outcome = trainer::run_on_points(
        &points,
        &propagated.dataset.ids(),
        &propagated.dataset.pseudo_labels(),
        dataset.num_labels(),
        config,
        Some(&propagated.trusted),
        |_, _| {},
    )?;
    Ok((outcome, propagated))
}
