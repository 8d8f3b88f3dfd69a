//! Accuracy reports and multi-seed summaries.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

/// Seeds used for multi-seed runs.
pub const DEFAULT_SEEDS: [u64; 5] = [13, 27, 250, 583, 915];

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("nothing to evaluate")]
    Empty,
    #[error("{predictions} predictions but {truths} truths")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("label {label} out of range for {num_labels} labels")]
    LabelOutOfRange { label: usize, num_labels: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Recall per true class; `None` for classes with no examples.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub count: usize,
}

impl EvalReport {
    pub fn write_confusion_csv(&self, out: impl Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.confusion.len();
        let mut header = vec!["truth".to_string()];
        header.extend((0..n).map(|c| format!("pred_{c}")));
        w.write_record(&header)?;
        for (t, row) in self.confusion.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn evaluate(
    predictions: &[usize],
    truths: &[usize],
    num_labels: usize,
) -> Result<EvalReport, MetricsError> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut confusion = vec![vec![0u64; num_labels]; num_labels];
    for (&p, &t) in predictions.iter().zip(truths) {
        for label in [p, t] {
            if label >= num_labels {
                return Err(MetricsError::LabelOutOfRange { label, num_labels });
            }
        }
        confusion[t][p] += 1;
    }
    let correct: u64 = (0..num_labels).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: u64 = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect();
    Ok(EvalReport {
        accuracy: correct as f64 / predictions.len() as f64,
        per_class_accuracy,
        confusion,
        count: predictions.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub runs: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub accuracies: Vec<f64>,
}

impl std::fmt::Display for SeedSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:.2} ± {:.2} over {} seeds",
            100.0 * self.mean,
            100.0 * self.std,
            self.runs
        )
    }
}

/// Mean and population standard deviation of accuracies across runs.
pub fn aggregate_seeds(reports: &[EvalReport]) -> Result<SeedSummary, MetricsError> {
    let accuracies: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    summarize(&accuracies)
}

pub fn summarize(accuracies: &[f64]) -> Result<SeedSummary, MetricsError> {
    if accuracies.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    Ok(SeedSummary {
        runs: accuracies.len(),
        mean,
        std: var.sqrt(),
        accuracies: accuracies.to_vec(),
    })
}
