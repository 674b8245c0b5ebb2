//! Confusion-matrix metrics: OA, AA, Cohen's kappa, per-class F1 and CF1.
//!
//! Classes with no true pixels in the evaluated region ("zero support") are
//! left out of AA and CF1 rather than counted as zero.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabelMask;
use crate::error::{Error, Result};

/// Class-average F1 of the full model on WHU-OHS as published; kept for
/// reference only, desk-scale runs are not comparable.
pub const REFERENCE_WHU_OHS_CF1: f64 = 0.704;

/// `counts[t * classes + p]` pixels of true class `t` predicted as `p`
/// (both zero-based).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Row-major counts, rows are true classes.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::ShapeMismatch(format!(
                "{classes}x{classes} matrix given {} counts",
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

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.classes..(truth + 1) * self.classes].iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, pred)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// CSV with a header row of predicted labels and one row per true label.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["true\\pred".to_string()];
        header.extend((1..=self.classes).map(|c| c.to_string()));
        w.write_record(&header)?;
        for t in 0..self.classes {
            let mut row = vec![(t + 1).to_string()];
            row.extend((0..self.classes).map(|p| self.get(t, p).to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Counts predictions against labels over the labeled pixels of `region`.
///
/// `pred` holds one-based class labels, one per pixel.
pub fn confusion(pred: &[u16], truth: &LabelMask, region: &[bool]) -> Result<ConfusionMatrix> {
    let n = truth.labels().len();
    if pred.len() != n || region.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} pixels, region {}, labels {n}",
            pred.len(),
            region.len()
        )));
    }
    let classes = truth.class_count() as usize;
    let mut cm = ConfusionMatrix::new(classes);
    for ((&p, &t), &inside) in pred.iter().zip(truth.labels()).zip(region) {
        if !inside || t == 0 {
            continue;
        }
        if p == 0 || p as usize > classes {
            return Err(Error::InvalidParameter(format!("predicted label {p} out of range")));
        }
        cm.record(t as usize - 1, p as usize - 1);
    }
    if cm.total() == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// `None` for classes with zero support.
    pub f1_per_class: Vec<Option<f64>>,
    pub cf1: f64,
    pub confusion: ConfusionMatrix,
}

pub fn report(cm: &ConfusionMatrix) -> Result<EvalReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyRegion);
    }
    let n = total as f64;
    let classes = cm.classes();
    let oa = cm.trace() as f64 / n;

    let mut recalls = Vec::new();
    let mut f1_per_class = Vec::with_capacity(classes);
    let mut chance = 0.0;
    for c in 0..classes {
        let support = cm.row_sum(c);
        let predicted = cm.col_sum(c);
        chance += support as f64 * predicted as f64;
        if support == 0 {
            f1_per_class.push(None);
            continue;
        }
        let tp = cm.get(c, c) as f64;
        let recall = tp / support as f64;
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        recalls.push(recall);
        f1_per_class.push(Some(if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }));
    }
    let p_e = chance / (n * n);
    // p_e == 1 only when truth and prediction are one and the same class.
    let kappa = if p_e >= 1.0 { 0.0 } else { (oa - p_e) / (1.0 - p_e) };
    let supported: Vec<f64> = f1_per_class.iter().flatten().copied().collect();
    Ok(EvalReport {
        oa,
        aa: mean(&recalls),
        kappa,
        cf1: mean(&supported),
        f1_per_class,
        confusion: cm.clone(),
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "OA     {:.4}", self.oa)?;
        writeln!(f, "AA     {:.4}", self.aa)?;
        writeln!(f, "Kappa  {:.4}", self.kappa)?;
        writeln!(f, "CF1    {:.4}", self.cf1)?;
        writeln!(f, "class  F1")?;
        for (c, f1) in self.f1_per_class.iter().enumerate() {
            match f1 {
                Some(v) => writeln!(f, "{:>5}  {v:.4}", c + 1)?,
                None => writeln!(f, "{:>5}  -", c + 1)?,
            }
        }
        Ok(())
    }
}
