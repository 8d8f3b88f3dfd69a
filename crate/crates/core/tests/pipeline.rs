use std::collections::BTreeMap;

use celda::active_learning::{al_retrain, query_clustering, select_queries, Strategy};
use celda::feature_store::{read_feature_file, write_feature_file};
use celda::representation::fuse_dataset;
use celda::synthetic::{Corruption, MixtureSpec};
use celda::trainer::{run, TrainConfig};

#[test]
fn binary_and_json_lines_train_the_same_model() {
    let ds = MixtureSpec {
        per_class: 50,
        corruption: Corruption::Uniform(0.25),
        seed: 3,
        ..MixtureSpec::default()
    }
    .generate();
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("f.celd");
    let jsonl = dir.path().join("f.jsonl");
    write_feature_file(&ds, &bin).unwrap();
    write_feature_file(&ds, &jsonl).unwrap();
    let a = read_feature_file(&bin).unwrap();
    let b = read_feature_file(&jsonl).unwrap();
    assert_eq!(a, ds);
    assert_eq!(b, ds);
    let config = TrainConfig {
        clusters: Some(16),
        ..TrainConfig::default()
    };
    assert_eq!(
        run(&a, &config).unwrap().model.encode(),
        run(&b, &config).unwrap().model.encode()
    );
}

#[test]
fn answered_clusters_keep_their_labels() {
    let ds = MixtureSpec {
        num_classes: 6,
        per_class: 60,
        corruption: Corruption::Systematic { correct: 0.5 },
        seed: 8,
        ..MixtureSpec::default()
    }
    .generate();
    let config = TrainConfig::default();
    let points = fuse_dataset(&ds);
    let ids = ds.ids();
    let k = config.cluster_count(6, ds.len());
    let clusters = query_clustering(&points, &ids, k, &config).unwrap();
    let queries = select_queries(
        &clusters,
        &points,
        &ids,
        &ds.pseudo_labels(),
        6,
        3,
        Strategy::HighestEntropy,
    )
    .unwrap();
    assert_eq!(queries.len(), 18);
    let answers: BTreeMap<u64, u32> = queries
        .queries
        .iter()
        .map(|q| (q.id, ds.records()[q.id as usize].true_label.unwrap()))
        .collect();
    let (outcome, propagated) = al_retrain(&ds, &config, &clusters, &queries, &answers).unwrap();
    for (i, &trusted) in propagated.trusted.iter().enumerate() {
        if trusted {
            let answer = answers
                .iter()
                .find(|(id, _)| clusters.assignments[**id as usize] == clusters.assignments[i])
                .map(|(_, &l)| l as usize)
                .unwrap();
            assert_eq!(outcome.labels[i], answer);
        }
    }
}
