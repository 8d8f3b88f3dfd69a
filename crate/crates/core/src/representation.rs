//! Verbalizer aggregation and feature fusion.

use std::collections::{BTreeMap, HashMap, HashSet};

use thiserror::Error;

use crate::feature_store::FeatureRecord;

#[derive(Debug, Error, PartialEq)]
pub enum RepresentationError {
    #[error("label {0} has no verbalizer words")]
    EmptyLabel(usize),
    #[error("verbalizer word {word:?} appears under more than one label")]
    SharedWord { word: String },
    #[error("verbalizer has no entry for label {0:?}")]
    MissingLabel(String),
    #[error("verbalizer lists unknown label {0:?}")]
    UnknownLabel(String),
    #[error("no probability for verbalizer word {0:?}")]
    MissingWord(String),
    #[error("negative or non-finite probability for word {0:?}")]
    InvalidProbability(String),
    #[error("verbalizer words carry zero total probability")]
    ZeroMass,
    #[error("non-finite value in input vector")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid verbalizer JSON: {0}")]
    Json(String),
}

/// Per-label word sets. Word identifiers are opaque strings.
#[derive(Debug, Clone, PartialEq)]
pub struct Verbalizer {
    words: Vec<Vec<String>>,
}

impl Verbalizer {
    pub fn new(words: Vec<Vec<String>>) -> Result<Self, RepresentationError> {
        let mut seen = HashSet::new();
        for (label, set) in words.iter().enumerate() {
            if set.is_empty() {
                return Err(RepresentationError::EmptyLabel(label));
            }
            for word in set {
                if !seen.insert(word.as_str()) {
                    return Err(RepresentationError::SharedWord { word: word.clone() });
                }
            }
        }
        Ok(Self { words })
    }

    /// Parse a JSON object `label name -> [words]`, ordering labels as in
    /// `label_names` (the feature file's label order).
    pub fn from_json(text: &str, label_names: &[String]) -> Result<Self, RepresentationError> {
        let mut map: BTreeMap<String, Vec<String>> =
            serde_json::from_str(text).map_err(|e| RepresentationError::Json(e.to_string()))?;
        let mut words = Vec::with_capacity(label_names.len());
        for name in label_names {
            words.push(
                map.remove(name)
                    .ok_or_else(|| RepresentationError::MissingLabel(name.clone()))?,
            );
        }
        if let Some(extra) = map.into_keys().next() {
            return Err(RepresentationError::UnknownLabel(extra));
        }
        Self::new(words)
    }

    pub fn num_labels(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self, label: usize) -> &[String] {
        &self.words[label]
    }
}

/// Label distribution from mask-position word probabilities: the mass on each
/// label's words divided by the mass on all verbalizer words.
pub fn verbalizer_label_distribution(
    word_probs: &HashMap<String, f64>,
    verbalizer: &Verbalizer,
) -> Result<Vec<f64>, RepresentationError> {
    let mut mass = Vec::with_capacity(verbalizer.num_labels());
    for set in &verbalizer.words {
        let mut total = 0.0;
        for word in set {
            let p = *word_probs
                .get(word)
                .ok_or_else(|| RepresentationError::MissingWord(word.clone()))?;
            if !(p.is_finite() && p >= 0.0) {
                return Err(RepresentationError::InvalidProbability(word.clone()));
            }
            total += p;
        }
        mass.push(total);
    }
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Err(RepresentationError::ZeroMass);
    }
    Ok(mass.into_iter().map(|m| m / total).collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn pseudo_label(dist: &[f64]) -> usize {
    argmax(dist)
}

/// Unit-norm copy of `v`. The zero vector maps to itself.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, RepresentationError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(RepresentationError::NonFinite);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(v.to_vec());
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Final representation `[normalize(h_last) ; h_verb]`, length `d + |Y|`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedVector(pub Vec<f64>);

impl FusedVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl AsRef<[f64]> for FusedVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Deref for FusedVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub fn fuse(
    h_last: &[f64],
    h_verb: &[f64],
    hidden_dim: usize,
    num_labels: usize,
) -> Result<FusedVector, RepresentationError> {
    if h_last.len() != hidden_dim {
        return Err(RepresentationError::DimensionMismatch {
            expected: hidden_dim,
            found: h_last.len(),
        });
    }
    if h_verb.len() != num_labels {
        return Err(RepresentationError::DimensionMismatch {
            expected: num_labels,
            found: h_verb.len(),
        });
    }
    if h_verb.iter().any(|x| !x.is_finite()) {
        return Err(RepresentationError::NonFinite);
    }
    let mut out = l2_normalize(h_last)?;
    out.extend_from_slice(h_verb);
    Ok(FusedVector(out))
}

fn fuse_record(record: &FeatureRecord) -> FusedVector {
    let h_last: Vec<f64> = record.h_last.iter().map(|&v| v as f64).collect();
    let h_verb: Vec<f64> = record.h_verb.iter().map(|&v| v as f64).collect();
    fuse(&h_last, &h_verb, h_last.len(), h_verb.len())
        .expect("dataset records are validated finite with matching dimensions")
}

/// Fused vectors for every record, in record order.
pub fn fuse_dataset(dataset: &crate::FeatureDataset) -> Vec<FusedVector> {
    use rayon::prelude::*;
    dataset.records().par_iter().map(fuse_record).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn verbalizer(sets: &[&[&str]]) -> Verbalizer {
        Verbalizer::new(
            sets.iter()
                .map(|s| s.iter().map(|w| w.to_string()).collect())
                .collect(),
        )
        .unwrap()
    }

    fn probs(pairs: &[(&str, f64)]) -> HashMap<String, f64> {
        pairs.iter().map(|(w, p)| (w.to_string(), *p)).collect()
    }

    #[test]
    fn binary_sentiment_ratio() {
        let v = verbalizer(&[&["positive"], &["negative"]]);
        let d = verbalizer_label_distribution(&probs(&[("positive", 0.3), ("negative", 0.1)]), &v)
            .unwrap();
        assert!(close(d[0], 0.75, 1e-15) && close(d[1], 0.25, 1e-15));
    }

    #[test]
    fn equal_probabilities_give_uniform() {
        let v = verbalizer(&[&["a", "b"], &["c", "d"], &["e", "f"]]);
        let p = probs(&[
            ("a", 0.1),
            ("b", 0.1),
            ("c", 0.1),
            ("d", 0.1),
            ("e", 0.1),
            ("f", 0.1),
        ]);
        let d = verbalizer_label_distribution(&p, &v).unwrap();
        for x in d {
            assert!(close(x, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn multi_word_sets_match_brute_force() {
        let v = verbalizer(&[&["w0", "w1"], &["w2", "w3", "w4"], &["w5"]]);
        let owner = [0usize, 0, 1, 1, 1, 2];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let raw: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut p: HashMap<String, f64> = raw
                .iter()
                .enumerate()
                .map(|(i, &x)| (format!("w{i}"), x))
                .collect();
            // an out-of-verbalizer word must not affect the result
            p.insert("unrelated".into(), 0.9);
            let got = verbalizer_label_distribution(&p, &v).unwrap();
            // oracle: walk every word, accumulate by owner, then normalize
            let mut expected = [0.0f64; 3];
            let mut total = 0.0;
            for (i, &x) in raw.iter().enumerate() {
                expected[owner[i]] += x;
                total += x;
            }
            for y in 0..3 {
                assert!(close(got[y], expected[y] / total, 1e-12));
            }
        }
    }

    #[test]
    fn distribution_errors() {
        let v = verbalizer(&[&["a"], &["b"]]);
        assert_eq!(
            verbalizer_label_distribution(&probs(&[("a", 0.2)]), &v),
            Err(RepresentationError::MissingWord("b".into()))
        );
        assert_eq!(
            verbalizer_label_distribution(&probs(&[("a", 0.0), ("b", 0.0)]), &v),
            Err(RepresentationError::ZeroMass)
        );
    }

    #[test]
    fn verbalizer_invariants() {
        assert_eq!(
            Verbalizer::new(vec![vec!["a".into()], vec![]]),
            Err(RepresentationError::EmptyLabel(1))
        );
        assert!(matches!(
            Verbalizer::new(vec![vec!["a".into()], vec!["a".into()]]),
            Err(RepresentationError::SharedWord { .. })
        ));
    }

    #[test]
    fn verbalizer_json_follows_label_order() {
        let names = vec!["negative".to_string(), "positive".to_string()];
        let v = Verbalizer::from_json(
            r#"{"positive": ["great", "good"], "negative": ["bad"]}"#,
            &names,
        )
        .unwrap();
        assert_eq!(v.words(0), ["bad"]);
        assert_eq!(v.words(1), ["great", "good"]);
        assert!(matches!(
            Verbalizer::from_json(r#"{"positive": ["good"]}"#, &names),
            Err(RepresentationError::MissingLabel(_))
        ));
    }

    #[test]
    fn pseudo_label_argmax_and_ties() {
        assert_eq!(pseudo_label(&[0.75, 0.25]), 0);
        assert_eq!(pseudo_label(&[0.5, 0.5]), 0);
        assert_eq!(pseudo_label(&[0.2, 0.4, 0.4]), 1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let raw: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let dist: Vec<f64> = raw.iter().map(|x| x / s).collect();
            let mut best = 0;
            for i in 0..dist.len() {
                if dist[i] > dist[best] {
                    best = i;
                }
            }
            assert_eq!(pseudo_label(&dist), best);
        }
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.6, 0.8]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0; 3]).unwrap(), vec![0.0; 3]);
        assert_eq!(
            l2_normalize(&[1.0, f64::INFINITY]),
            Err(RepresentationError::NonFinite)
        );
    }

    #[test]
    fn fuse_composes_pieces() {
        let f = fuse(&[3.0, 4.0], &[0.75, 0.25], 2, 2).unwrap();
        assert_eq!(f.0, vec![0.6, 0.8, 0.75, 0.25]);
        let f = fuse(&[1.0, 0.0, 0.0], &[0.0, 1.0], 3, 2).unwrap();
        assert_eq!(f.0, vec![1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(
            fuse(&[1.0], &[1.0], 2, 1),
            Err(RepresentationError::DimensionMismatch {
                expected: 2,
                found: 1
            })
        );
    }

    proptest! {
        #[test]
        fn fused_vector_invariants(
            h_last in proptest::collection::vec(-100.0f64..100.0, 1..16),
            w in proptest::collection::vec(0.001f64..1.0, 1..8),
        ) {
            let s: f64 = w.iter().sum();
            let h_verb: Vec<f64> = w.iter().map(|x| x / s).collect();
            let f = fuse(&h_last, &h_verb, h_last.len(), h_verb.len()).unwrap();
            prop_assert_eq!(f.len(), h_last.len() + h_verb.len());
            let norm = f[..h_last.len()].iter().map(|x| x * x).sum::<f64>().sqrt();
            if h_last.iter().any(|&x| x != 0.0) {
                prop_assert!((norm - 1.0).abs() < 1e-9);
            }
            prop_assert!((f[h_last.len()..].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn distribution_is_scale_invariant(
            w in proptest::collection::vec(0.0f64..1.0, 4),
            c in 1e-3f64..1e3,
        ) {
            prop_assume!(w.iter().sum::<f64>() > 1e-6);
            let v = verbalizer(&[&["a", "b"], &["c"], &["d"]]);
            let names = ["a", "b", "c", "d"];
            let p: HashMap<String, f64> =
                names.iter().zip(&w).map(|(n, &x)| (n.to_string(), x)).collect();
            let scaled: HashMap<String, f64> =
                p.iter().map(|(k, &x)| (k.clone(), x * c)).collect();
            let a = verbalizer_label_distribution(&p, &v).unwrap();
            let b = verbalizer_label_distribution(&scaled, &v).unwrap();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn argmax_invariant_under_monotone_transform(
            w in proptest::collection::vec(0.0f64..1.0, 2..12),
        ) {
            let transformed: Vec<f64> = w.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
            prop_assert_eq!(pseudo_label(&w), pseudo_label(&transformed));
        }
    }
}
