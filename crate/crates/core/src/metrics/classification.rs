use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Zero-division conventions, printed alongside reports.
pub const CONVENTIONS: &str = "F1 of a class is 0 when its precision and recall are both 0 or undefined; \
WA averages recall over classes with at least one reference sample";

/// Counts indexed `[true class][predicted class]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if c == 0 || counts.iter().any(|r| r.len() != c) {
            return Err(Error::InvalidArgument("confusion matrix must be square and non-empty".into()));
        }
        Ok(Self { counts })
    }

    pub fn from_labels(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::shape(
                "confusion_matrix",
                format!("{} references vs {} predictions", y_true.len(), y_pred.len()),
            ));
        }
        let mut cm = Self::new(n_classes);
        for (&t, &p) in y_true.iter().zip(y_pred) {
            if t >= n_classes || p >= n_classes {
                return Err(Error::InvalidArgument(format!(
                    "label pair ({t}, {p}) out of range for {n_classes} classes"
                )));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|j| self.counts[j][j]).sum()
    }

    /// Reference samples of class `j`.
    pub fn support(&self, j: usize) -> u64 {
        self.counts[j].iter().sum()
    }

    /// Predictions of class `j`.
    pub fn predicted(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    /// Relabels classes: class `j` becomes `perm[j]` on both axes.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let c = self.n_classes();
        let mut seen = vec![false; c];
        if perm.len() != c || perm.iter().any(|&p| p >= c || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation of 0..{c}")));
        }
        let mut out = Self::new(c);
        for t in 0..c {
            for p in 0..c {
                out.counts[perm[t]][perm[p]] = self.counts[t][p];
            }
        }
        Ok(out)
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Empty("confusion matrix has no samples".into()));
        }
        Ok(())
    }

    fn class_metrics(&self, j: usize) -> ClassMetrics {
        let tp = self.counts[j][j] as f64;
        let support = self.support(j);
        let predicted = self.predicted(j);
        let ratio = |den: u64| if den == 0 { 0.0 } else { tp / den as f64 };
        let fp_fn = (support + predicted) as f64;
        ClassMetrics {
            precision: ratio(predicted),
            recall: ratio(support),
            // 2PR / (P + R) simplifies to 2TP / (2TP + FP + FN).
            f1: if tp == 0.0 { 0.0 } else { 2.0 * tp / fp_fn },
            support,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Unweighted mean of per-class F1 over all classes.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.check_nonempty()?;
    let c = cm.n_classes();
    Ok((0..c).map(|j| cm.class_metrics(j).f1).sum::<f64>() / c as f64)
}

/// `(wa, ua)`: balanced accuracy and plain accuracy.
pub fn wa_ua(cm: &ConfusionMatrix) -> Result<(f64, f64)> {
    cm.check_nonempty()?;
    let present: Vec<f64> = (0..cm.n_classes())
        .filter(|&j| cm.support(j) > 0)
        .map(|j| cm.class_metrics(j).recall)
        .collect();
    let wa = present.iter().sum::<f64>() / present.len() as f64;
    let ua = cm.trace() as f64 / cm.total() as f64;
    Ok((wa, ua))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub macro_f1: f64,
    pub wa: f64,
    pub ua: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

impl MetricBundle {
    pub fn from_confusion(cm: ConfusionMatrix) -> Result<Self> {
        let macro_f1 = macro_f1(&cm)?;
        let (wa, ua) = wa_ua(&cm)?;
        Ok(Self {
            macro_f1,
            wa,
            ua,
            per_class: (0..cm.n_classes()).map(|j| cm.class_metrics(j)).collect(),
            confusion: cm,
        })
    }

    pub fn from_labels(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<Self> {
        Self::from_confusion(ConfusionMatrix::from_labels(y_true, y_pred, n_classes)?)
    }
}

impl fmt::Display for MetricBundle {
    /// Percentages with two decimals.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Macro-F1 {:.2}  WA {:.2}  UA {:.2}",
            100.0 * self.macro_f1,
            100.0 * self.wa,
            100.0 * self.ua
        )
    }
}
