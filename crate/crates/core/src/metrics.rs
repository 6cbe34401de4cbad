//! Confusion matrix, OA / AA / kappa, and aggregation over repetitions.

use std::fmt::Write as _;

use crate::error::{GwclError, Result};

/// `c x c` counts; rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(GwclError::Dimension(format!(
                "{} counts for {classes} classes",
                counts.len()
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|j| self.get(k, j)).sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, k)).sum()
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.classes).all(|i| (0..self.classes).all(|j| i == j || self.get(i, j) == 0))
    }
}

/// Tallies predictions against truths; codes are 1-based class codes.
pub fn confusion(preds: &[u16], truths: &[u16], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != truths.len() {
        return Err(GwclError::Dimension(format!(
            "{} predictions for {} truths",
            preds.len(),
            truths.len()
        )));
    }
    let mut counts = vec![0u64; classes * classes];
    for (&p, &t) in preds.iter().zip(truths) {
        for code in [p, t] {
            if code == 0 || code as usize > classes {
                return Err(GwclError::IndexOutOfRange {
                    index: code as usize,
                    len: classes,
                });
            }
        }
        counts[(t as usize - 1) * classes + (p as usize - 1)] += 1;
    }
    ConfusionMatrix::from_counts(classes, counts)
}

pub fn oa(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(GwclError::UndefinedMetric("OA of an empty confusion matrix".into()));
    }
    Ok(cm.trace() as f64 / total as f64)
}

pub fn per_class_recall(cm: &ConfusionMatrix) -> Result<Vec<f64>> {
    (0..cm.classes())
        .map(|k| {
            let row = cm.row_sum(k);
            if row == 0 {
                Err(GwclError::UndefinedMetric(format!("class {} has no test pixels", k + 1)))
            } else {
                Ok(cm.get(k, k) as f64 / row as f64)
            }
        })
        .collect()
}

pub fn aa(cm: &ConfusionMatrix) -> Result<f64> {
    let recall = per_class_recall(cm)?;
    if recall.is_empty() {
        return Err(GwclError::UndefinedMetric("AA with zero classes".into()));
    }
    Ok(recall.iter().sum::<f64>() / recall.len() as f64)
}

/// Chance agreement `P_e = sum_k row_k * col_k / total^2`.
pub fn chance_agreement(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(GwclError::UndefinedMetric("P_e of an empty confusion matrix".into()));
    }
    let num: u128 = (0..cm.classes())
        .map(|k| cm.row_sum(k) as u128 * cm.col_sum(k) as u128)
        .sum();
    Ok(num as f64 / (total as f64 * total as f64))
}

pub fn kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let pe = chance_agreement(cm)?;
    if pe >= 1.0 {
        return Err(GwclError::UndefinedMetric("kappa with chance agreement 1".into()));
    }
    Ok((oa(cm)? - pe) / (1.0 - pe))
}

/// Mean and sample standard deviation of one metric over runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub stddev: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stddev = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, stddev }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub oa: Spread,
    pub aa: Spread,
    pub kappa: Spread,
    pub per_class_recall: Vec<Spread>,
    pub runs: usize,
}

impl MetricReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let single = |v| Spread { mean: v, stddev: 0.0 };
        Ok(Self {
            oa: single(oa(cm)?),
            aa: single(aa(cm)?),
            kappa: single(kappa(cm)?),
            per_class_recall: per_class_recall(cm)?.into_iter().map(single).collect(),
            runs: 1,
        })
    }

    /// `key=value` lines, fixed order and `{:.10}` precision.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "runs={}", self.runs);
        for (name, s) in [("oa", self.oa), ("aa", self.aa), ("kappa", self.kappa)] {
            let _ = writeln!(out, "{name}={:.10}", s.mean);
            let _ = writeln!(out, "{name}_std={:.10}", s.stddev);
        }
        for (k, s) in self.per_class_recall.iter().enumerate() {
            let _ = writeln!(out, "recall_{}={:.10}", k + 1, s.mean);
            let _ = writeln!(out, "recall_{}_std={:.10}", k + 1, s.stddev);
        }
        out
    }

    /// Human-readable percentages, `mean(std)` as usually tabulated.
    pub fn to_text(&self) -> String {
        let pct = |s: Spread| format!("{:.2}({:.2})", 100.0 * s.mean, 100.0 * s.stddev);
        let mut out = String::new();
        let _ = writeln!(out, "runs:  {}", self.runs);
        let _ = writeln!(out, "OA:    {}", pct(self.oa));
        let _ = writeln!(out, "AA:    {}", pct(self.aa));
        let _ = writeln!(out, "kappa: {}", pct(self.kappa));
        for (k, s) in self.per_class_recall.iter().enumerate() {
            let _ = writeln!(out, "class {:>2}: {}", k + 1, pct(*s));
        }
        out
    }
}

/// Per-metric mean and sample (n - 1) standard deviation across runs.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
    let first = reports
        .first()
        .ok_or_else(|| GwclError::InvalidParameter("no reports to aggregate".into()))?;
    let c = first.per_class_recall.len();
    if reports.iter().any(|r| r.per_class_recall.len() != c) {
        return Err(GwclError::Dimension("reports disagree on class count".into()));
    }
    let pick = |f: &dyn Fn(&MetricReport) -> f64| Spread::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(MetricReport {
        oa: pick(&|r| r.oa.mean),
        aa: pick(&|r| r.aa.mean),
        kappa: pick(&|r| r.kappa.mean),
        per_class_recall: (0..c).map(|k| pick(&|r| r.per_class_recall[k].mean)).collect(),
        runs: reports.len(),
    })
}
