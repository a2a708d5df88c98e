//! Training-curve plots and single-image prediction.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{load_and_preprocess, DatasetError};
use crate::model::{forward, load_checkpoint, Mode, ModelError};
use crate::tensor::Tensor;
use crate::training::{EpochMetrics, TrainError, TrainingHistory};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("EmptyHistory: history has no epochs")]
    EmptyHistory,
    #[error("BadTopK: top_k must be in 1..={classes}, got {requested}")]
    BadTopK { requested: usize, classes: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ReportError> = std::result::Result<T, E>;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 120.0;
const MARGIN_TOP: f64 = 32.0;
const MARGIN_BOTTOM: f64 = 52.0;

struct Series<'a> {
    name: &'a str,
    color: &'a str,
    values: Vec<f64>,
}

fn render_svg(title: &str, y_label: &str, epochs: &[usize], series: &[Series], boundary: Option<usize>) -> String {
    let x_min = *epochs.first().unwrap() as f64;
    let x_max = (*epochs.last().unwrap() as f64).max(x_min + 1.0);
    let all = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (mut y_min, mut y_max) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    if y_max - y_min < 1e-9 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let pad = (y_max - y_min) * 0.05;
    y_min -= pad;
    y_max += pad;

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x_min) / (x_max - x_min) * plot_w;
    let sy = |y: f64| MARGIN_TOP + (y_max - y) / (y_max - y_min) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, MARGIN_LEFT + plot_w / 2.0);
    let (x0, x1, y0, y1) = (MARGIN_LEFT, MARGIN_LEFT + plot_w, MARGIN_TOP, MARGIN_TOP + plot_h);
    let _ = writeln!(s, r#"<line class="axis" x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line class="axis" x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);

    for i in 0..=4 {
        let v = y_min + (y_max - y_min) * i as f64 / 4.0;
        let y = sy(v);
        let _ = writeln!(s, r#"<line x1="{}" y1="{y:.1}" x2="{x0}" y2="{y:.1}" stroke="black"/>"#, x0 - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, x0 - 6.0, y + 4.0);
    }
    let step = (epochs.len() / 10).max(1);
    for &e in epochs.iter().step_by(step) {
        let x = sx(e as f64);
        let _ = writeln!(s, r#"<line x1="{x:.1}" y1="{y1}" x2="{x:.1}" y2="{}" stroke="black"/>"#, y1 + 4.0);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{e}</text>"#, y1 + 18.0);
    }
    let _ = writeln!(s, r#"<text class="x-label" x="{}" y="{}" text-anchor="middle">epoch</text>"#, x0 + plot_w / 2.0, HEIGHT - 10.0);
    let _ = writeln!(
        s,
        r#"<text class="y-label" x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{y_label}</text>"#,
        y0 + plot_h / 2.0
    );

    if let Some(b) = boundary {
        // Drawn between the last first-stage epoch and the first second-stage one.
        let x = sx(b as f64 + 0.5).min(x1);
        let _ = writeln!(
            s,
            r#"<line class="stage-boundary" data-epoch="{b}" x1="{x:.1}" y1="{y0}" x2="{x:.1}" y2="{y1}" stroke="gray" stroke-dasharray="4 3"/>"#
        );
    }

    for (i, series) in series.iter().enumerate() {
        let points: Vec<String> = epochs
            .iter()
            .zip(&series.values)
            .filter(|(_, v)| v.is_finite())
            .map(|(&e, &v)| format!("{:.1},{:.1}", sx(e as f64), sy(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-name="{}" fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            series.name,
            series.color,
            points.join(" ")
        );
        let ly = y0 + 16.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="2"/>"#,
            x1 + 12.0,
            x1 + 32.0,
            series.color
        );
        let _ = writeln!(s, r#"<text class="legend" x="{}" y="{}">{}</text>"#, x1 + 38.0, ly + 4.0, series.name);
    }
    s.push_str("</svg>\n");
    s
}

fn curves(epochs: &[EpochMetrics], f: impl Fn(&EpochMetrics) -> (f64, f64)) -> [Series<'static>; 2] {
    let (train, val): (Vec<f64>, Vec<f64>) = epochs.iter().map(f).unzip();
    [
        Series {
            name: "train",
            color: "#1f77b4",
            values: train,
        },
        Series {
            name: "val",
            color: "#d62728",
            values: val,
        },
    ]
}

/// Writes `<label>_accuracy.svg` and `<label>_loss.svg` into `out_dir`.
pub fn plot_training_history(history: &TrainingHistory, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if history.epochs.is_empty() {
        return Err(ReportError::EmptyHistory);
    }
    fs::create_dir_all(out_dir)?;
    let epochs: Vec<usize> = history.epochs.iter().map(|e| e.epoch).collect();
    let accuracy = render_svg(
        &format!("{} accuracy", history.label),
        "accuracy",
        &epochs,
        &curves(&history.epochs, |e| (e.train_accuracy, e.val_accuracy)),
        history.stage_boundary,
    );
    let loss = render_svg(
        &format!("{} loss", history.label),
        "loss",
        &epochs,
        &curves(&history.epochs, |e| (e.train_loss, e.val_loss)),
        history.stage_boundary,
    );
    let acc_path = out_dir.join(format!("{}_accuracy.svg", history.label));
    let loss_path = out_dir.join(format!("{}_loss.svg", history.label));
    fs::write(&acc_path, accuracy)?;
    fs::write(&loss_path, loss)?;
    Ok(vec![acc_path, loss_path])
}

/// Loads a JSONL history and plots it.
pub fn plot_history(history_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(history_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DatasetError::MissingFile(history_path.to_path_buf()).into(),
        _ => ReportError::Io(e),
    })?;
    if text.trim().is_empty() {
        return Err(ReportError::EmptyHistory);
    }
    let history = TrainingHistory::from_jsonl(&text)?;
    plot_training_history(&history, out_dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProbability {
    pub class: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub image: String,
    pub checkpoint: String,
    /// Highest probability first; ties keep class-index order.
    pub top: Vec<ClassProbability>,
}

impl PredictionResult {
    pub fn render_text(&self) -> String {
        let mut s = format!("{}\n", self.image);
        for (rank, c) in self.top.iter().enumerate() {
            let _ = writeln!(s, "{:>2}. {:<24} {:>6.2}%", rank + 1, c.class, c.probability * 100.0);
        }
        s
    }
}

/// Ranks the checkpoint's classes for one image, using the checkpoint's own
/// preprocessing.
pub fn predict_image(image: &Path, checkpoint: &Path, top_k: usize) -> Result<PredictionResult> {
    let ckpt = load_checkpoint(checkpoint)?;
    let classes = ckpt.class_names.len();
    if top_k == 0 || top_k > classes {
        return Err(ReportError::BadTopK { requested: top_k, classes });
    }
    let pixels = load_and_preprocess(image, &ckpt.preprocess)?;
    let [h, w, c]: [usize; 3] = pixels.shape().try_into().expect("image tensor is rank 3");
    let batch = Tensor::from_vec(&[1, h, w, c], pixels.into_data());
    let out = forward(&ckpt.arch, &ckpt.params, &batch, Mode::Eval, None)?;

    // Renormalize from logits in f64 so the reported numbers sum to 1 tightly.
    let logits: Vec<f64> = out.logits.data().iter().map(|&v| v as f64).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut ranked: Vec<ClassProbability> = ckpt
        .class_names
        .iter()
        .zip(&exps)
        .map(|(name, e)| ClassProbability {
            class: name.clone(),
            probability: e / total,
        })
        .collect();
    ranked.sort_by(|a, b| b.probability.total_cmp(&a.probability));
    ranked.truncate(top_k);
    Ok(PredictionResult {
        image: image.display().to_string(),
        checkpoint: checkpoint.display().to_string(),
        top: ranked,
    })
}
