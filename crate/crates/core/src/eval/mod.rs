//! Evaluation: confusion counts and derived metrics for both heads,
//! multi-run aggregation, embedding export, and PCA projection.

pub mod embeddings;
pub mod pca;

use serde::{Deserialize, Serialize};

use crate::heads::{binarize_logits, ThresholdRule};
use crate::losses::dice_score_binary;
use crate::model::{HeadKind, IqaModel};
use crate::params::ParamStore;
use crate::tensor::Graph;
use crate::train::{LoadedFrame, TrainError};

/// Confusion counts plus derived metrics. The 0/0 cases (no positive
/// predictions, no positives present, or both) all resolve to 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean per-frame Dice of binarized masks; segmentation mode only.
    pub dice: Option<f64>,
}

impl EvalReport {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let total = tp + fp + tn + fn_;
        let accuracy = if total > 0 { (tp + tn) as f64 / total as f64 } else { 0.0 };
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        EvalReport { tp, fp, tn, fn_, accuracy, precision, recall, f1, dice: None }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn table_row(&self) -> String {
        let dice = self.dice.map_or_else(|| "     /".to_owned(), |d| format!("{d:.4}"));
        format!(
            "acc {:.4}  f1 {:.4}  prec {:.4}  rec {:.4}  dice {}",
            self.accuracy, self.f1, self.precision, self.recall, dice
        )
    }
}

/// Tally a prediction/label sequence into a report.
pub fn confusion(preds: &[u8], labels: &[u8]) -> EvalReport {
    assert_eq!(preds.len(), labels.len());
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &y) in preds.iter().zip(labels.iter()) {
        match (p != 0, y != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    EvalReport::from_counts(tp, fp, tn, fn_)
}

/// Per-frame predictions from a checkpointed model over a frame set.
pub struct Predictions {
    /// Classification logits, one per frame (classification head).
    pub logits: Option<Vec<f32>>,
    /// Binarized masks at working resolution (segmentation head).
    pub masks: Option<Vec<Vec<u8>>>,
    pub labels: Vec<u8>,
}

/// Run the model over `frames` in batches, producing hard labels per the
/// head type: `logit > 0` for classification, the mask-threshold rule for
/// segmentation.
pub fn predict(
    model: &IqaModel,
    store: &ParamStore<f32>,
    frames: &[LoadedFrame],
    rule: &ThresholdRule,
    batch_size: usize,
) -> Result<Predictions, TrainError> {
    let s = model.cfg.encoder.image_size;
    let mut logits_all = Vec::new();
    let mut masks_all = Vec::new();
    let mut labels = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(batch_size.max(1)) {
        let mut g: Graph<f32> = Graph::new();
        let mut buf = Vec::with_capacity(chunk.len() * s * s);
        for f in chunk {
            buf.extend_from_slice(&f.image);
        }
        let images = g.constant(buf, vec![chunk.len(), 1, s, s])?;
        match model.cfg.head {
            HeadKind::Classification => {
                let lg = model.forward_logits(&mut g, store, images)?;
                let vals = g.data(lg);
                logits_all.extend_from_slice(vals);
                labels.extend(vals.iter().map(|&l| u8::from(l > 0.0)));
            }
            HeadKind::Segmentation => {
                let lg = model.forward_mask_logits(&mut g, store, images)?;
                let vals = g.data(lg);
                for f in 0..chunk.len() {
                    let mask = binarize_logits(&vals[f * s * s..(f + 1) * s * s]);
                    labels.push(rule.label_from_count(
                        mask.iter().filter(|&&v| v != 0).count(),
                    ));
                    masks_all.push(mask);
                }
            }
        }
    }
    Ok(Predictions {
        logits: (!logits_all.is_empty()).then_some(logits_all),
        masks: (!masks_all.is_empty()).then_some(masks_all),
        labels,
    })
}

/// Evaluate a model on a frame set. Segmentation mode also reports the
/// mean per-frame Dice of binarized predictions against ground truth.
pub fn evaluate(
    model: &IqaModel,
    store: &ParamStore<f32>,
    frames: &[LoadedFrame],
    rule: &ThresholdRule,
    batch_size: usize,
) -> Result<EvalReport, TrainError> {
    if frames.is_empty() {
        return Err(TrainError::EmptySplit("eval"));
    }
    let preds = predict(model, store, frames, rule, batch_size)?;
    let gt: Vec<u8> = frames.iter().map(|f| f.record.label).collect();
    let mut report = confusion(&preds.labels, &gt);
    if let Some(masks) = &preds.masks {
        let dice_sum: f64 = masks
            .iter()
            .zip(frames.iter())
            .map(|(m, f)| dice_score_binary(m, &f.mask))
            .sum();
        report.dice = Some(dice_sum / frames.len() as f64);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single run.
    pub std: f64,
}

impl MetricSummary {
    fn over(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MetricSummary { mean, std }
    }

    pub fn format(&self) -> String {
        format!("{:.4} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub accuracy: MetricSummary,
    pub precision: MetricSummary,
    pub recall: MetricSummary,
    pub f1: MetricSummary,
    pub dice: Option<MetricSummary>,
}

/// Mean ± sample std across independent runs. Needs at least two reports.
pub fn aggregate(reports: &[EvalReport]) -> Result<AggregateReport, TrainError> {
    if reports.len() < 2 {
        return Err(TrainError::EmptySplit("aggregate needs >= 2 reports"));
    }
    let pick = |f: fn(&EvalReport) -> f64| -> Vec<f64> { reports.iter().map(f).collect() };
    let dice_vals: Vec<f64> = reports.iter().filter_map(|r| r.dice).collect();
    Ok(AggregateReport {
        runs: reports.len(),
        accuracy: MetricSummary::over(&pick(|r| r.accuracy)),
        precision: MetricSummary::over(&pick(|r| r.precision)),
        recall: MetricSummary::over(&pick(|r| r.recall)),
        f1: MetricSummary::over(&pick(|r| r.f1)),
        dice: (dice_vals.len() == reports.len()).then(|| MetricSummary::over(&dice_vals)),
    })
}
