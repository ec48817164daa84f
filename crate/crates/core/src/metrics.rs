//! Confusion matrix, per-class accuracy, OA, AA, and Cohen's kappa.

use serde::{Deserialize, Serialize};

use crate::data::LabelRaster;
use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `confusion[t][p]` counts pixels of true class `t + 1` predicted as `p + 1`.
    pub confusion: Vec<Vec<u64>>,
    /// Recall per class; `None` for classes absent from the evaluated truth.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub overall_accuracy: f64,
    pub average_accuracy: f64,
    pub kappa: f64,
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let c = confusion.len();
        if confusion.iter().any(|r| r.len() != c) {
            return Err(contract("confusion matrix must be square"));
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(contract("confusion matrix is empty"));
        }
        let n = total as f64;
        let trace: u64 = (0..c).map(|i| confusion[i][i]).sum();
        let p_o = trace as f64 / n;
        let row_sums: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let col_sums: Vec<u64> = (0..c).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();
        let p_e: f64 = row_sums.iter().zip(&col_sums).map(|(&r, &c)| (r as f64 / n) * (c as f64 / n)).sum();
        // p_e = 1 forces every pixel into a single true and predicted class,
        // which is perfect agreement.
        let kappa = if (1.0 - p_e).abs() < f64::EPSILON { 1.0 } else { (p_o - p_e) / (1.0 - p_e) };
        let per_class_accuracy: Vec<Option<f64>> = (0..c)
            .map(|i| (row_sums[i] > 0).then(|| confusion[i][i] as f64 / row_sums[i] as f64))
            .collect();
        let present: Vec<f64> = per_class_accuracy.iter().flatten().copied().collect();
        let average_accuracy = present.iter().sum::<f64>() / present.len() as f64;
        Ok(Self { confusion, per_class_accuracy, overall_accuracy: p_o, average_accuracy, kappa })
    }

    pub fn report(&self) -> String {
        let mut out = format!(
            "OA    {:.4}\nAA    {:.4}\nkappa {:.4}\n",
            self.overall_accuracy, self.average_accuracy, self.kappa
        );
        for (i, acc) in self.per_class_accuracy.iter().enumerate() {
            if let Some(a) = acc {
                out.push_str(&format!("class {:>3} {:.4}\n", i + 1, a));
            }
        }
        out
    }
}

/// Scores `pred` (class ids `1..=C`, one per pixel) against `truth` over the
/// pixels in `eval_idx`.
pub fn compute_metrics(pred: &[u16], truth: &LabelRaster, eval_idx: &[usize]) -> Result<Metrics> {
    if eval_idx.is_empty() {
        return Err(contract("no pixels to evaluate"));
    }
    let c = truth.num_classes();
    let mut confusion = vec![vec![0u64; c]; c];
    for &i in eval_idx {
        let t = *truth.labels.get(i).ok_or_else(|| contract(format!("pixel {i} outside the raster")))? as usize;
        let p = *pred.get(i).ok_or_else(|| contract(format!("no prediction for pixel {i}")))? as usize;
        if t == 0 {
            return Err(contract(format!("pixel {i} is unlabeled")));
        }
        if p == 0 || p > c {
            return Err(contract(format!("prediction {p} at pixel {i} outside 1..={c}")));
        }
        confusion[t - 1][p - 1] += 1;
    }
    Metrics::from_confusion(confusion)
}
