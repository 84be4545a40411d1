//! Grading metrics: accuracy, ROC-AUC, quadratic-weighted kappa, F1, confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mann-Whitney AUC: `(wins + 0.5 * ties) / (P * N)` over positive/negative pairs.
pub fn auc_binary(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both positive and negative samples".into(),
        ));
    }
    // Walk tie groups in ascending score order; each positive beats all negatives
    // strictly below it and ties with negatives in its own group.
    let (mut wins, mut ties) = (0u64, 0u64);
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let group_pos = idx[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        let group_neg = (j - i) as u64 - group_pos;
        wins += group_pos * neg_below;
        ties += group_pos * group_neg;
        neg_below += group_neg;
        i = j;
    }
    Ok((wins as f64 + 0.5 * ties as f64) / (pos as f64 * neg as f64))
}

/// Per-sample labels and class scores gathered during evaluation.
#[derive(Debug, Clone, Default)]
pub struct EvalBuffer {
    pub num_classes: usize,
    pub labels: Vec<usize>,
    /// Row-major `[n, num_classes]`.
    pub scores: Vec<f64>,
}

impl EvalBuffer {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            ..Default::default()
        }
    }

    pub fn push(&mut self, label: usize, scores: &[f64]) -> Result<()> {
        if scores.len() != self.num_classes {
            return Err(Error::Dimension(format!(
                "expected {} scores, got {}",
                self.num_classes,
                scores.len()
            )));
        }
        if label >= self.num_classes {
            return Err(Error::Validation(format!(
                "label {label} outside 0..{}",
                self.num_classes
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("evaluation scores".into()));
        }
        self.labels.push(label);
        self.scores.extend_from_slice(scores);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.num_classes..(i + 1) * self.num_classes]
    }

    /// Argmax predictions; ties go to the lowest class index.
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.len())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for k in 1..row.len() {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    pub fn class_scores(&self, k: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.row(i)[k]).collect()
    }
}

/// Macro one-vs-rest AUC over classes present in the labels. Returns the
/// value and the list of classes skipped for lack of positives.
pub fn auc_multiclass(buf: &EvalBuffer) -> Result<(f64, Vec<usize>)> {
    let mut present = vec![false; buf.num_classes];
    for &l in &buf.labels {
        present[l] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least two classes present".into(),
        ));
    }
    let mut total = 0.0;
    let mut used = 0;
    let mut skipped = Vec::new();
    for k in 0..buf.num_classes {
        if !present[k] {
            log::warn!("class {k} absent from labels; skipped in macro AUC");
            skipped.push(k);
            continue;
        }
        let labels: Vec<bool> = buf.labels.iter().map(|&l| l == k).collect();
        total += auc_binary(&buf.class_scores(k), &labels)?;
        used += 1;
    }
    Ok((total / used as f64, skipped))
}

/// Quadratic-weighted Cohen's kappa.
pub fn kappa_quadratic(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<f64> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(Error::Dimension(format!(
            "kappa needs equal non-empty inputs, got {} and {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    if k < 2 {
        return Err(Error::UndefinedMetric("kappa needs at least two classes".into()));
    }
    let c = confusion(y_true, y_pred, k)?;
    let n = y_true.len() as f64;
    let hist_t: Vec<f64> = (0..k).map(|i| c[i].iter().sum::<u64>() as f64).collect();
    let hist_p: Vec<f64> = (0..k).map(|j| (0..k).map(|i| c[i][j]).sum::<u64>() as f64).collect();
    let (mut num, mut den) = (0.0, 0.0);
    let scale = ((k - 1) * (k - 1)) as f64;
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64) - (j as f64)).powi(2) / scale;
            num += w * c[i][j] as f64;
            den += w * hist_t[i] * hist_p[j] / n;
        }
    }
    if den == 0.0 {
        // Both marginals sit on one shared class, so agreement is perfect.
        if num == 0.0 {
            return Ok(1.0);
        }
        return Err(Error::UndefinedMetric("kappa has zero expected disagreement".into()));
    }
    Ok(1.0 - num / den)
}

/// `c[true][pred]` counts.
pub fn confusion(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<Vec<Vec<u64>>> {
    let mut c = vec![vec![0u64; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= k || p >= k {
            return Err(Error::Validation(format!("label pair ({t}, {p}) outside 0..{k}")));
        }
        c[t][p] += 1;
    }
    Ok(c)
}

pub fn accuracy(c: &[Vec<u64>]) -> f64 {
    let total: u64 = c.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    let trace: u64 = (0..c.len()).map(|i| c[i][i]).sum();
    trace as f64 / total as f64
}

/// Per-class F1, using 0 whenever precision + recall is 0.
pub fn f1_per_class(c: &[Vec<u64>]) -> Vec<f64> {
    let k = c.len();
    (0..k)
        .map(|i| {
            let tp = c[i][i] as f64;
            let predicted: u64 = (0..k).map(|r| c[r][i]).sum();
            let actual: u64 = c[i].iter().sum();
            let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let r = if actual == 0 { 0.0 } else { tp / actual as f64 };
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .collect()
}

/// `(macro, weighted)` F1.
pub fn f1_scores(c: &[Vec<u64>]) -> (f64, f64) {
    let f1 = f1_per_class(c);
    if f1.is_empty() {
        return (0.0, 0.0);
    }
    let macro_f1 = f1.iter().sum::<f64>() / f1.len() as f64;
    let supports: Vec<f64> = c.iter().map(|row| row.iter().sum::<u64>() as f64).collect();
    let total: f64 = supports.iter().sum();
    let weighted = if total == 0.0 {
        0.0
    } else {
        f1.iter().zip(&supports).map(|(f, s)| f * s).sum::<f64>() / total
    };
    (macro_f1, weighted)
}

/// A metric value or the reason it could not be computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Metric {
    Value(f64),
    Undefined { undefined: String },
}

impl Metric {
    fn from_result(r: Result<f64>) -> Self {
        match r {
            Ok(v) => Metric::Value(v),
            Err(e) => Metric::Undefined {
                undefined: e.to_string(),
            },
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(*v),
            Metric::Undefined { .. } => None,
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::Value(v) => write!(f, "{v:.6}"),
            Metric::Undefined { undefined } => write!(f, "undefined ({undefined})"),
        }
    }
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub task: String,
    pub num_samples: usize,
    pub num_classes: usize,
    pub acc: f64,
    pub auc: Metric,
    pub auc_aggregation: String,
    /// Absent for binary tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_quadratic: Option<Metric>,
    pub f1_macro: f64,
    pub f1_weighted: f64,
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    pub fn from_buffer(buf: &EvalBuffer) -> Result<Self> {
        if buf.is_empty() {
            return Err(Error::UndefinedMetric("no samples to evaluate".into()));
        }
        let k = buf.num_classes;
        let preds = buf.predictions();
        let conf = confusion(&buf.labels, &preds, k)?;
        let (f1_macro, f1_weighted) = f1_scores(&conf);
        let binary = k == 2;
        let (auc, auc_aggregation) = if binary {
            let labels: Vec<bool> = buf.labels.iter().map(|&l| l == 1).collect();
            (
                Metric::from_result(auc_binary(&buf.class_scores(1), &labels)),
                "binary".to_string(),
            )
        } else {
            let r = auc_multiclass(buf);
            let agg = match &r {
                Ok((_, skipped)) if !skipped.is_empty() => {
                    format!("macro one-vs-rest (skipped absent classes {skipped:?})")
                }
                _ => "macro one-vs-rest".to_string(),
            };
            (Metric::from_result(r.map(|(v, _)| v)), agg)
        };
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            task: if binary { "binary" } else { "multiclass" }.into(),
            num_samples: buf.len(),
            num_classes: k,
            acc: accuracy(&conf),
            auc,
            auc_aggregation,
            kappa_quadratic: (!binary)
                .then(|| Metric::from_result(kappa_quadratic(&buf.labels, &preds, k))),
            f1_macro,
            f1_weighted,
            confusion: conf,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `key: value` lines followed by the confusion matrix.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("task: {}\n", self.task));
        s.push_str(&format!("samples: {}\n", self.num_samples));
        s.push_str(&format!("acc: {:.6}\n", self.acc));
        s.push_str(&format!("auc: {}\n", self.auc));
        s.push_str(&format!("auc_aggregation: {}\n", self.auc_aggregation));
        if let Some(k) = &self.kappa_quadratic {
            s.push_str(&format!("kappa_quadratic: {k}\n"));
        }
        s.push_str(&format!("f1_macro: {:.6}\n", self.f1_macro));
        s.push_str(&format!("f1_weighted: {:.6}\n", self.f1_weighted));
        s.push_str("confusion (rows = truth, cols = prediction):\n");
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        s
    }

    /// Model-selection score: kappa for grading tasks, AUC for binary tasks,
    /// accuracy when those are undefined.
    pub fn selection_score(&self) -> f64 {
        let primary = match &self.kappa_quadratic {
            Some(k) => k.value(),
            None => self.auc.value(),
        };
        primary.unwrap_or(self.acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_auc_example() {
        let auc = auc_binary(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(auc, 0.75);
    }

    #[test]
    fn single_class_auc_is_undefined() {
        assert!(matches!(
            auc_binary(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn inverted_labels_complement_auc() {
        let s = [0.3, 0.3, 0.9, 0.1, 0.5];
        let l = [true, false, true, false, false];
        let inv: Vec<bool> = l.iter().map(|x| !x).collect();
        let a = auc_binary(&s, &l).unwrap();
        let b = auc_binary(&s, &inv).unwrap();
        assert!((a + b - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(kappa_quadratic(&[0, 1], &[1, 0], 2).unwrap(), -1.0);
        assert_eq!(kappa_quadratic(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap(), 1.0);
        assert_eq!(kappa_quadratic(&[1, 1], &[1, 1], 3).unwrap(), 1.0);
    }

    #[test]
    fn f1_conventions() {
        let perfect = vec![vec![3, 0], vec![0, 2]];
        assert_eq!(f1_scores(&perfect), (1.0, 1.0));
        assert_eq!(accuracy(&perfect), 1.0);
        // Class 2 never appears: contributes 0 to the macro mean.
        let c = vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 0]];
        let (m, w) = f1_scores(&c);
        assert!((m - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(w, 1.0);
    }

    #[test]
    fn binary_report_omits_kappa() {
        let mut b = EvalBuffer::new(2);
        b.push(0, &[0.9, 0.1]).unwrap();
        b.push(1, &[0.2, 0.8]).unwrap();
        let r = MetricsReport::from_buffer(&b).unwrap();
        assert!(r.kappa_quadratic.is_none());
        assert!(!r.to_json().contains("kappa"));
        assert_eq!(r.auc, Metric::Value(1.0));
    }

    #[test]
    fn undefined_metric_reported_with_reason() {
        let mut b = EvalBuffer::new(3);
        b.push(1, &[0.1, 0.8, 0.1]).unwrap();
        let r = MetricsReport::from_buffer(&b).unwrap();
        assert!(r.auc.value().is_none());
        assert!(r.to_json().contains("undefined"));
        assert!(r.to_text().contains("auc: undefined"));
    }
}
