use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub learning_rate: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
}

/// Closing line of a history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistorySummary {
    pub label: String,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
    pub stage_boundary: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingHistory {
    pub label: String,
    pub epochs: Vec<EpochMetrics>,
    pub stop_reason: StopReason,
    /// 1-based epoch with the lowest validation loss (earliest on ties).
    pub best_epoch: usize,
    /// Number of first-stage epochs in a two-stage run.
    pub stage_boundary: Option<usize>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Line {
    Epoch(EpochMetrics),
    Summary(HistorySummary),
}

impl TrainingHistory {
    /// Earliest epoch holding the minimum validation loss.
    pub fn lowest_val_loss_epoch(epochs: &[EpochMetrics]) -> Option<usize> {
        epochs
            .iter()
            .fold(None::<&EpochMetrics>, |best, e| match best {
                Some(b) if b.val_loss <= e.val_loss => Some(b),
                _ => Some(e),
            })
            .map(|e| e.epoch)
    }

    pub fn best_metrics(&self) -> Option<&EpochMetrics> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    pub fn best_val_accuracy(&self) -> f64 {
        self.epochs.iter().map(|e| e.val_accuracy).fold(0.0, f64::max)
    }

    /// One JSON object per epoch, then the summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("metrics serialize"));
            out.push('\n');
        }
        let summary = HistorySummary {
            label: self.label.clone(),
            stop_reason: self.stop_reason,
            best_epoch: self.best_epoch,
            stage_boundary: self.stage_boundary,
        };
        out.push_str(&serde_json::to_string(&summary).expect("summary serializes"));
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut epochs = Vec::new();
        let mut summary = None;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            if summary.is_some() {
                return Err(TrainError::CorruptHistory(format!("line {}: content after summary", n + 1)));
            }
            match serde_json::from_str(line) {
                Ok(Line::Epoch(e)) => epochs.push(e),
                Ok(Line::Summary(s)) => summary = Some(s),
                Err(e) => return Err(TrainError::CorruptHistory(format!("line {}: {e}", n + 1))),
            }
        }
        let summary = summary.ok_or_else(|| TrainError::CorruptHistory("missing summary line".into()))?;
        Ok(Self {
            label: summary.label,
            epochs,
            stop_reason: summary.stop_reason,
            best_epoch: summary.best_epoch,
            stage_boundary: summary.stage_boundary,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => TrainError::Dataset(crate::dataset::DatasetError::MissingFile(path.to_path_buf())),
            _ => TrainError::Io(e),
        })?;
        Self::from_jsonl(&text)
    }
}
