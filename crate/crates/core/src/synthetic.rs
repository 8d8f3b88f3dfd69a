//! Synthetic feature datasets with known ground truth.
//!
//! Hidden vectors are drawn from an isotropic Gaussian mixture (one component
//! per class). Pseudo-labels are the true labels passed through a chosen
//! corruption, and the verbalizer distribution peaks on the pseudo-label, as a
//! prompt-based labeler would. Every record carries its true label.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::feature_store::{FeatureDataset, FeatureRecord};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Corruption {
    None,
    /// With this probability the pseudo-label is replaced by a uniformly drawn
    /// different label.
    Uniform(f64),
    /// Keep the true label with probability `correct`, otherwise label class
    /// `c` as `(c + 1) mod |Y|`. Clusters end up with a wrong majority.
    Systematic {
        correct: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub num_classes: usize,
    pub hidden_dim: usize,
    pub per_class: usize,
    /// Expected norm of each class centre.
    pub separation: f64,
    /// Per-coordinate standard deviation around the centre.
    pub spread: f64,
    /// Logit bonus of the pseudo-label in the verbalizer distribution; the
    /// other logits are N(0, 0.3²). Small values keep the distribution soft.
    pub verbalizer_peak: f64,
    pub corruption: Corruption,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            hidden_dim: 8,
            per_class: 100,
            separation: 4.0,
            spread: 0.5,
            verbalizer_peak: 0.2,
            corruption: Corruption::None,
            seed: 0,
        }
    }
}

impl MixtureSpec {
    pub fn generate(&self) -> FeatureDataset {
        let (y, d) = (self.num_classes, self.hidden_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let scale = self.separation / (d as f64).sqrt();
        let centers: Vec<Vec<f64>> = (0..y)
            .map(|_| {
                (0..d)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let noise = Normal::new(0.0, self.spread).expect("spread >= 0");
        let verb_noise = Normal::new(0.0, 0.3).expect("valid");

        let mut truths: Vec<usize> = (0..y)
            .flat_map(|c| std::iter::repeat_n(c, self.per_class))
            .collect();
        truths.shuffle(&mut rng);

        let records = truths
            .iter()
            .enumerate()
            .map(|(i, &truth)| {
                let h_last: Vec<f32> = centers[truth]
                    .iter()
                    .map(|&m| (m + noise.sample(&mut rng)) as f32)
                    .collect();
                let pseudo = match self.corruption {
                    Corruption::None => truth,
                    Corruption::Uniform(rate) => {
                        if y > 1 && rng.random::<f64>() < rate {
                            let other = rng.random_range(0..y - 1);
                            if other >= truth {
                                other + 1
                            } else {
                                other
                            }
                        } else {
                            truth
                        }
                    }
                    Corruption::Systematic { correct } => {
                        if rng.random::<f64>() < correct {
                            truth
                        } else {
                            (truth + 1) % y
                        }
                    }
                };
                FeatureRecord {
                    id: i as u64,
                    h_last,
                    h_verb: verbalizer_distribution(
                        pseudo,
                        y,
                        self.verbalizer_peak,
                        &verb_noise,
                        &mut rng,
                    ),
                    pseudo_label: pseudo as u32,
                    true_label: Some(truth as u32),
                }
            })
            .collect();
        let names = (0..y).map(|c| format!("class{c}")).collect();
        FeatureDataset::new(records, d, names).expect("generated records are valid")
    }
}

/// Soft distribution whose strict argmax is `label`.
fn verbalizer_distribution(
    label: usize,
    y: usize,
    peak: f64,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let mut logits: Vec<f64> = (0..y).map(|_| noise.sample(rng)).collect();
    logits[label] += peak;
    let top = (0..y)
        .max_by(|&a, &b| logits[a].total_cmp(&logits[b]))
        .expect("y >= 1");
    logits.swap(label, top);
    if y > 1 {
        let runner_up = (0..y)
            .filter(|&c| c != label)
            .map(|c| logits[c])
            .fold(f64::NEG_INFINITY, f64::max);
        // keep a visible margin so the f32 rounding cannot create a tie
        logits[label] = logits[label].max(runner_up + 0.05);
    }
    let max = logits[label];
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|v| (v / total) as f32).collect()
}

/// Fraction of positions where `labels` matches the dataset's true labels.
/// Records without a true label are skipped.
pub fn accuracy_against_truth(dataset: &FeatureDataset, labels: &[usize]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (record, &label) in dataset.records().iter().zip(labels) {
        if let Some(t) = record.true_label {
            total += 1;
            hits += (t as usize == label) as usize;
        }
    }
    hits as f64 / total.max(1) as f64
}
