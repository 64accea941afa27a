//! Binary classification metrics and continual-learning forgetting measures.
//!
//! The fake class (label 1) is the positive class throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decision threshold on the predicted fake probability.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_predictions(predicted: &[u8], labels: &[u8]) -> Self {
        let mut c = ConfusionCounts::default();
        for (&p, &y) in predicted.iter().zip(labels) {
            match (p, y) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// F1 of the fake class; 0 when it is neither predicted nor present.
    pub fn f1_fake(&self) -> f64 {
        f1(self.tp, self.fp, self.fn_)
    }

    /// F1 of the real class, with real treated as positive.
    pub fn f1_real(&self) -> f64 {
        f1(self.tn, self.fn_, self.fp)
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub f1_real: f64,
    pub f1_fake: f64,
    pub macro_f1: f64,
    pub auc: f64,
}

impl ClassificationMetrics {
    /// Values in the fixed report order: accuracy, auc, macro F1, F1 real, F1 fake.
    pub fn as_array(&self) -> [f64; 5] {
        [
            self.accuracy,
            self.auc,
            self.macro_f1,
            self.f1_real,
            self.f1_fake,
        ]
    }

    pub const NAMES: [&'static str; 5] = ["accuracy", "auc", "macro_f1", "f1_real", "f1_fake"];
}

/// Metrics from predicted fake probabilities and 0/1 labels.
pub fn classification_metrics(probs: &[f64], labels: &[u8]) -> Result<ClassificationMetrics> {
    if probs.is_empty() {
        return Err(Error::Input("metrics need at least one sample".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Input(format!("probability {p} outside [0, 1]")));
    }
    if let Some(y) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Input(format!("label {y} outside {{0, 1}}")));
    }
    let predicted: Vec<u8> = probs.iter().map(|&p| u8::from(p >= THRESHOLD)).collect();
    let c = ConfusionCounts::from_predictions(&predicted, labels);
    let (f1_real, f1_fake) = (c.f1_real(), c.f1_fake());
    Ok(ClassificationMetrics {
        accuracy: c.accuracy(),
        f1_real,
        f1_fake,
        macro_f1: (f1_real + f1_fake) / 2.0,
        auc: auc(probs, labels),
    })
}

/// Rank-statistic AUC with ties counted as one half. Returns 0.5 when one
/// class is absent.
pub fn auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tie groups, 1-based
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.5;
    }
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    u / (n_pos * n_neg) as f64
}

/// `A[k][j]`: accuracy on event `j`'s test split after training through event
/// `k` (both 0-based here). The optional last column is the future split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForgettingMatrix {
    pub rows: Vec<Vec<Option<f64>>>,
}

impl ForgettingMatrix {
    pub fn new(num_events: usize, with_future: bool) -> Self {
        let cols = num_events + usize::from(with_future);
        ForgettingMatrix {
            rows: vec![vec![None; cols]; num_events],
        }
    }

    pub fn set(&mut self, k: usize, j: usize, acc: f64) {
        self.rows[k][j] = Some(acc);
    }

    pub fn get(&self, k: usize, j: usize) -> Option<f64> {
        self.rows.get(k).and_then(|r| r.get(j)).copied().flatten()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_cols(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn column(&self, j: usize) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .map(|r| r.get(j).copied().flatten())
            .collect()
    }
}

/// Peak accuracy on event `j` (0-based) over rows `k ≥ j`, minus the accuracy
/// after the last row.
pub fn forgetting_drop(matrix: &ForgettingMatrix, j: usize) -> Result<f64> {
    let k_last = matrix.num_rows();
    if k_last < 2 {
        return Err(Error::Input("forgetting needs at least two rows".into()));
    }
    let last = matrix
        .get(k_last - 1, j)
        .ok_or_else(|| Error::Input(format!("event {} never evaluated", j + 1)))?;
    let peak = (j.min(k_last - 1)..k_last)
        .filter_map(|k| matrix.get(k, j))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(peak - last)
}
