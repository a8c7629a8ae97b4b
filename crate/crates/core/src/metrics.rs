//! Confusion-matrix accumulation and IoU reporting.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    ignore_count: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes], ignore_count: 0 }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>, ignore_count: u64) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::Dimension(format!("{} counts for {num_classes} classes", counts.len())));
        }
        Ok(Self { num_classes, counts, ignore_count })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn ignore_count(&self) -> u64 {
        self.ignore_count
    }

    /// Pixels counted in the matrix (ignored pixels excluded).
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one pixel per non-ignored target position.
    pub fn accumulate(&mut self, pred: &LabelMap, target: &LabelMap) -> Result<()> {
        if pred.shape() != target.shape() {
            return Err(Error::Dimension(format!(
                "prediction {:?} and target {:?} differ in shape",
                pred.shape(),
                target.shape()
            )));
        }
        let n = self.num_classes;
        for (&p, &t) in pred.data().iter().zip(target.data()) {
            if t == IGNORE {
                self.ignore_count += 1;
                continue;
            }
            if t as usize >= n || p as usize >= n {
                return Err(Error::Data(format!("class id {} outside 0..{n}", t.max(p))));
            }
            self.counts[t as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Dimension(format!(
                "cannot merge {}-class and {}-class matrices",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignore_count += other.ignore_count;
        Ok(())
    }

    /// TP / (TP + FP + FN) per class; `None` when the denominator is zero.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let n = self.num_classes;
        (0..n)
            .map(|k| {
                let tp = self.count(k, k);
                let fn_ = (0..n).map(|p| self.count(k, p)).sum::<u64>() - tp;
                let fp = (0..n).map(|t| self.count(t, k)).sum::<u64>() - tp;
                let den = tp + fp + fn_;
                (den > 0).then(|| tp as f64 / den as f64)
            })
            .collect()
    }

    /// Mean IoU over present classes; `None` if every class is absent.
    pub fn miou(&self) -> Option<f64> {
        mean_present(&self.iou_per_class())
    }

    /// Share of ground-truth pixels per class.
    pub fn pixel_fractions(&self) -> Vec<f64> {
        let total = self.total();
        let n = self.num_classes;
        (0..n)
            .map(|k| {
                let row: u64 = (0..n).map(|p| self.count(k, p)).sum();
                if total == 0 {
                    0.0
                } else {
                    row as f64 / total as f64
                }
            })
            .collect()
    }
}

pub fn mean_present(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Per-class IoU table.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub iou: Vec<Option<f64>>,
    pub pixel_fraction: Vec<f64>,
    pub miou: Option<f64>,
}

impl EvalReport {
    pub fn new(class_names: &[String], conf: &ConfusionMatrix) -> Result<Self> {
        if class_names.len() != conf.num_classes() {
            return Err(Error::Config(format!(
                "{} class names for a {}-class matrix",
                class_names.len(),
                conf.num_classes()
            )));
        }
        Ok(Self {
            class_names: class_names.to_vec(),
            iou: conf.iou_per_class(),
            pixel_fraction: conf.pixel_fractions(),
            miou: conf.miou(),
        })
    }

    /// One row per class and a closing mIoU row; absent classes print `absent`.
    pub fn to_table(&self) -> String {
        let width = self.class_names.iter().map(String::len).max().unwrap_or(0).max(5);
        let mut s = format!("{:<width$}  {:>8}  {:>14}\n", "class", "IoU", "pixel_fraction");
        for ((name, iou), frac) in self.class_names.iter().zip(&self.iou).zip(&self.pixel_fraction) {
            let _ = writeln!(s, "{name:<width$}  {:>8}  {frac:>14.6}", fmt_opt(*iou));
        }
        let _ = writeln!(s, "{:<width$}  {:>8}", "mIoU", fmt_opt(self.miou));
        s
    }

    /// CSV with columns `class,iou,pixel_fraction` and a final `mIoU` row;
    /// absent values are empty fields.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,iou,pixel_fraction\n");
        for ((name, iou), frac) in self.class_names.iter().zip(&self.iou).zip(&self.pixel_fraction) {
            let _ = writeln!(s, "{name},{},{frac}", iou.map(|v| v.to_string()).unwrap_or_default());
        }
        let _ = writeln!(s, "mIoU,{},", self.miou.map(|v| v.to_string()).unwrap_or_default());
        s
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |v| format!("{v:.4}"))
}
