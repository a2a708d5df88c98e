//! Split evaluation, confusion matrices, per-class precision/recall and
//! cross-run comparison tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, DatasetManifest, LoadedSplit, PreprocessConfig, Split};
use crate::model::{forward, ArchitectureSpec, Mode, ModelError, ParamCounts, ParameterStore};
use crate::tensor::{Scalar, Tensor};
use crate::training::TrainingHistory;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("LengthMismatch: {predictions} predictions vs {truths} truths")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("BadIndex: class index {index} outside vocabulary of {classes}")]
    BadIndex { index: usize, classes: usize },
    #[error("EmptyInput: nothing to compare")]
    EmptyInput,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode class probabilities for every sample, `n × num_classes`.
pub fn predict_split(
    arch: &ArchitectureSpec,
    params: &ParameterStore<f32>,
    data: &LoadedSplit,
    batch_size: usize,
) -> Result<Vec<f32>, ModelError> {
    let mut out = Vec::with_capacity(data.len() * arch.num_classes());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk);
        out.extend_from_slice(forward(arch, params, &batch.inputs, Mode::Eval, None)?.probabilities.data());
    }
    Ok(out)
}

/// Mean cross-entropy and accuracy of a probability matrix.
pub fn loss_and_accuracy(probs: &[f32], truths: &[usize], num_classes: usize) -> (f64, f64) {
    let mut onehot = vec![0.0f32; truths.len() * num_classes];
    for (r, &t) in truths.iter().enumerate() {
        onehot[r * num_classes + t] = 1.0;
    }
    let loss = crate::model::cross_entropy_rows(probs, &onehot, num_classes);
    let correct = probs
        .chunks_exact(num_classes)
        .zip(truths)
        .filter(|(row, &t)| argmax(row) == t)
        .count();
    (loss, correct as f64 / truths.len() as f64)
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn column_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    /// `trace / total`, or 0 when empty.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            total => self.trace() as f64 / total as f64,
        }
    }
}

/// Undefined ratios (zero denominator) are `None`, rendered as `n/a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub support: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn confusion_and_per_class(
    predictions: &[usize],
    truths: &[usize],
    class_names: &[String],
) -> Result<(ConfusionMatrix, Vec<ClassMetrics>)> {
    if predictions.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    let n = class_names.len();
    if let Some(&index) = predictions.iter().chain(truths).find(|&&i| i >= n) {
        return Err(EvalError::BadIndex { index, classes: n });
    }
    let mut counts = vec![vec![0u64; n]; n];
    for (&p, &t) in predictions.iter().zip(truths) {
        counts[t][p] += 1;
    }
    let cm = ConfusionMatrix {
        class_names: class_names.to_vec(),
        counts,
    };
    let metrics = (0..n)
        .map(|c| {
            let tp = cm.counts[c][c];
            let precision = ratio(tp, cm.column_sum(c));
            let recall = ratio(tp, cm.row_sum(c));
            let f1 = match (precision, recall) {
                (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                (Some(_), Some(_)) => Some(0.0),
                _ => None,
            };
            ClassMetrics {
                name: class_names[c].clone(),
                precision,
                recall,
                f1,
                support: cm.row_sum(c),
            }
        })
        .collect();
    Ok((cm, metrics))
}

fn macro_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub sample_count: usize,
    pub per_class: Vec<ClassMetrics>,
    /// Means over classes where the metric is defined.
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    pub macro_f1: Option<f64>,
    pub confusion: ConfusionMatrix,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"))
}

impl ClassificationReport {
    /// Builds a report from a probability matrix and ground truth.
    pub fn from_probabilities(split: Split, probs: &[f32], truths: &[usize], class_names: &[String]) -> Result<Self> {
        let k = class_names.len();
        if probs.len() != truths.len() * k {
            return Err(EvalError::LengthMismatch {
                predictions: probs.len() / k.max(1),
                truths: truths.len(),
            });
        }
        let predictions: Vec<usize> = probs.chunks_exact(k).map(argmax).collect();
        let (confusion, per_class) = confusion_and_per_class(&predictions, truths, class_names)?;
        let (loss, _) = loss_and_accuracy(probs, truths, k);
        Ok(Self {
            split,
            loss,
            accuracy: confusion.accuracy(),
            sample_count: truths.len(),
            macro_precision: macro_mean(per_class.iter().map(|m| m.precision)),
            macro_recall: macro_mean(per_class.iter().map(|m| m.recall)),
            macro_f1: macro_mean(per_class.iter().map(|m| m.f1)),
            per_class,
            confusion,
        })
    }

    pub fn headline(&self) -> String {
        format!("{} accuracy {:.1}%", self.split, self.accuracy * 100.0)
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} ({} samples, loss {:.4})", self.headline(), self.sample_count, self.loss);
        let width = self.per_class.iter().map(|m| m.name.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(s, "{:<width$}  precision  recall     f1  support", "class");
        for m in &self.per_class {
            let _ = writeln!(
                s,
                "{:<width$}  {:>9}  {:>6}  {:>5}  {:>7}",
                m.name,
                fmt_opt(m.precision),
                fmt_opt(m.recall),
                fmt_opt(m.f1),
                m.support
            );
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>9}  {:>6}  {:>5}  {:>7}",
            "macro",
            fmt_opt(self.macro_precision),
            fmt_opt(self.macro_recall),
            fmt_opt(self.macro_f1),
            self.sample_count
        );
        let _ = writeln!(s, "confusion (rows = true, columns = predicted):");
        for (name, row) in self.confusion.class_names.iter().zip(&self.confusion.counts) {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
            let _ = writeln!(s, "{name:<width$}  {}", cells.join(""));
        }
        s
    }
}

pub fn evaluate_loaded(
    arch: &ArchitectureSpec,
    params: &ParameterStore<f32>,
    data: &LoadedSplit,
    batch_size: usize,
    class_names: &[String],
) -> Result<ClassificationReport> {
    if data.is_empty() {
        return Err(DatasetError::EmptySplit(data.split).into());
    }
    let probs = predict_split(arch, params, data, batch_size)?;
    ClassificationReport::from_probabilities(data.split, &probs, &data.class_indices, class_names)
}

/// Eval-mode report over one split of a manifest.
pub fn evaluate_split(
    arch: &ArchitectureSpec,
    params: &ParameterStore<f32>,
    manifest: &DatasetManifest,
    split: Split,
    batch_size: usize,
    preprocess: &PreprocessConfig,
) -> Result<ClassificationReport> {
    let data = LoadedSplit::load(manifest, split, preprocess)?;
    evaluate_loaded(arch, params, &data, batch_size, manifest.vocabulary.names())
}

/// Probability rows for an arbitrary tensor batch, in eval mode.
pub fn predict_batch(arch: &ArchitectureSpec, params: &ParameterStore<f32>, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
    Ok(forward(arch, params, batch, Mode::Eval, None)?.probabilities)
}

#[derive(Debug, Clone)]
pub struct RunEntry {
    pub history: TrainingHistory,
    pub test_report: ClassificationReport,
    pub counts: ParamCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub total_params: usize,
    pub trainable_params: usize,
    pub epochs_trained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

/// One row per run, ordered by test accuracy (descending, stable on ties).
pub fn compare_runs(entries: &[RunEntry]) -> Result<ComparisonReport> {
    if entries.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut rows: Vec<ComparisonRow> = entries
        .iter()
        .map(|e| ComparisonRow {
            label: e.history.label.clone(),
            best_val_accuracy: e.history.best_val_accuracy(),
            test_accuracy: e.test_report.accuracy,
            test_loss: e.test_report.loss,
            total_params: e.counts.total,
            trainable_params: e.counts.trainable,
            epochs_trained: e.history.epochs.len(),
        })
        .collect();
    rows.sort_by(|a, b| b.test_accuracy.total_cmp(&a.test_accuracy));
    Ok(ComparisonReport { rows })
}

impl ComparisonReport {
    pub fn render_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(3).max(3);
        let mut s = format!(
            "{:<width$}  {:>8}  {:>8}  {:>9}  {:>12}  {:>12}  {:>6}\n",
            "run", "test_acc", "val_acc", "test_loss", "params", "trainable", "epochs"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>7.1}%  {:>7.1}%  {:>9.4}  {:>12}  {:>12}  {:>6}",
                r.label,
                r.test_accuracy * 100.0,
                r.best_val_accuracy * 100.0,
                r.test_loss,
                r.total_params,
                r.trainable_params,
                r.epochs_trained
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }
}
