//! Confusion counts and classification metrics, plus whole-dataset
//! evaluation of a trained detector.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::features::schema_hash;
use crate::mlp::MlpModel;
use crate::scenario::{AttackKind, Dataset, Split};

/// Binary confusion counts; positive = malicious.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Count the four outcomes over parallel label/prediction slices.
pub fn confusion(labels: &[u8], predictions: &[u8]) -> Result<ConfusionCounts> {
    if labels.len() != predictions.len() {
        return Err(CoreError::Schema(format!(
            "{} labels vs {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&y, &p) in labels.iter().zip(predictions) {
        if y > 1 || p > 1 {
            return Err(CoreError::Domain("labels and predictions must be 0 or 1".into()));
        }
        match (y, p) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (0, 1) => c.fp += 1,
            (1, 0) => c.fn_ += 1,
            _ => unreachable!(),
        }
    }
    Ok(c)
}

/// Accuracy, precision, recall and F1 from the counts. Ratios with a
/// zero denominator are reported as undefined (`None`), never as 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub fn metrics(counts: &ConfusionCounts) -> Result<MetricsReport> {
    let n = counts.total();
    if n == 0 {
        return Err(CoreError::Domain("no evaluated samples".into()));
    }
    let accuracy = (counts.tp + counts.tn) as f64 / n as f64;
    let precision = if counts.tp + counts.fp > 0 {
        Some(counts.tp as f64 / (counts.tp + counts.fp) as f64)
    } else {
        None
    };
    let recall = if counts.tp + counts.fn_ > 0 {
        Some(counts.tp as f64 / (counts.tp + counts.fn_) as f64)
    } else {
        None
    };
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Ok(MetricsReport {
        counts: *counts,
        accuracy,
        precision,
        recall,
        f1,
    })
}

/// Per-scenario outcome of an evaluation run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerdictRow {
    pub id: u64,
    pub label: u8,
    pub predicted: u8,
    pub probability: f64,
    pub attack_kind: AttackKind,
}

/// Full evaluation output.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub metrics: MetricsReport,
    pub verdicts: Vec<VerdictRow>,
    pub misclassified: Vec<u64>,
}

impl EvalReport {
    /// Recall restricted to one attack kind's rows (all label 1).
    pub fn recall_for_kind(&self, kind: AttackKind) -> Option<f64> {
        let rows: Vec<&VerdictRow> = self
            .verdicts
            .iter()
            .filter(|v| v.attack_kind == kind && v.label == 1)
            .collect();
        if rows.is_empty() {
            return None;
        }
        let hit = rows.iter().filter(|v| v.predicted == 1).count();
        Some(hit as f64 / rows.len() as f64)
    }
}

/// Evaluate a model on the dataset's held-out test split.
pub fn evaluate(model: &MlpModel, dataset: &Dataset, threshold: f64) -> Result<EvalReport> {
    if model.schema_hash != schema_hash(model.feature_mode) {
        return Err(CoreError::Schema("model schema does not match this build".into()));
    }
    // Split hygiene: no scenario id may sit in both splits.
    let mut train_ids: Vec<u64> = dataset
        .scenarios
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| s.id)
        .collect();
    train_ids.sort_unstable();
    for s in dataset.scenarios.iter().filter(|s| s.split == Split::Test) {
        if train_ids.binary_search(&s.id).is_ok() {
            return Err(CoreError::Schema(format!(
                "scenario {} appears in both train and test splits",
                s.id
            )));
        }
    }

    let mut verdicts = Vec::new();
    let mut labels = Vec::new();
    let mut predictions = Vec::new();
    for s in dataset.scenarios.iter().filter(|s| s.split == Split::Test) {
        let x = s.features.project(model.feature_mode);
        let probability = model.forward(&x)?;
        let predicted = u8::from(probability >= threshold);
        labels.push(s.label);
        predictions.push(predicted);
        verdicts.push(VerdictRow {
            id: s.id,
            label: s.label,
            predicted,
            probability,
            attack_kind: s.attack.kind,
        });
    }
    let counts = confusion(&labels, &predictions)?;
    let misclassified = verdicts
        .iter()
        .filter(|v| v.label != v.predicted)
        .map(|v| v.id)
        .collect();
    Ok(EvalReport {
        metrics: metrics(&counts)?,
        verdicts,
        misclassified,
    })
}

fn pct(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.4}%", 100.0 * x),
        None => "undefined".into(),
    }
}

/// Metrics table plus row-normalized confusion matrix as plain text.
pub fn format_report(report: &EvalReport) -> String {
    let m = &report.metrics;
    let c = &m.counts;
    let mut out = String::new();
    out.push_str("metric     | result\n");
    out.push_str("-----------+---------\n");
    out.push_str(&format!("accuracy   | {:.4}%\n", 100.0 * m.accuracy));
    out.push_str(&format!("precision  | {}\n", pct(m.precision)));
    out.push_str(&format!("recall     | {}\n", pct(m.recall)));
    out.push_str(&format!("f1-score   | {}\n", pct(m.f1)));
    out.push('\n');
    out.push_str("confusion (rows = true, cols = predicted)\n");
    out.push_str("             malicious   benign\n");
    let mal_total = c.tp + c.fn_;
    let ben_total = c.tn + c.fp;
    let rate = |num: usize, den: usize| {
        if den == 0 {
            "undefined".to_string()
        } else {
            format!("{:.2}%", 100.0 * num as f64 / den as f64)
        }
    };
    out.push_str(&format!(
        "malicious    {:>9}   {:>6}   ({} / {})\n",
        rate(c.tp, mal_total),
        rate(c.fn_, mal_total),
        c.tp,
        c.fn_,
    ));
    out.push_str(&format!(
        "benign       {:>9}   {:>6}   ({} / {})\n",
        rate(c.fp, ben_total),
        rate(c.tn, ben_total),
        c.fp,
        c.tn,
    ));
    out.push_str(&format!("\nsamples: {}\n", c.total()));
    out
}
