//! Confusion-matrix segmentation metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::IGNORE_LABEL;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tally `pred` against `gt`; pixels carrying the ignore label are skipped.
    pub fn accumulate(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate",
                left: vec![pred.len()],
                right: vec![gt.len()],
            });
        }
        // validate first so a bad map leaves the matrix untouched
        for (&p, &g) in pred.iter().zip(gt) {
            if p == IGNORE_LABEL || g == IGNORE_LABEL {
                continue;
            }
            for l in [p, g] {
                if l >= self.classes {
                    return Err(Error::LabelOutOfRange {
                        label: l,
                        classes: self.classes,
                    });
                }
            }
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p != IGNORE_LABEL && g != IGNORE_LABEL {
                self.counts[g * self.classes + p] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::ShapeMismatch {
                op: "merge",
                left: vec![self.classes],
                right: vec![other.classes],
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class is absent from both maps.
    pub fn iou(&self, k: usize) -> Option<f64> {
        let tp = self.get(k, k);
        let fn_: u64 = (0..self.classes).map(|p| self.get(k, p)).sum::<u64>() - tp;
        let fp: u64 = (0..self.classes).map(|g| self.get(g, k)).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    /// Mean IoU over defined classes.
    pub fn miou(&self) -> Result<f64> {
        let defined: Vec<f64> = (0..self.classes).filter_map(|k| self.iou(k)).collect();
        if defined.is_empty() {
            return Err(Error::EmptyMean("no class has a defined IoU"));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn report(&self, class_names: &[&str]) -> Result<MetricsReport> {
        Ok(MetricsReport {
            per_class_iou: (0..self.classes)
                .map(|k| {
                    (
                        class_names
                            .get(k)
                            .map_or_else(|| k.to_string(), |s| s.to_string()),
                        self.iou(k),
                    )
                })
                .collect(),
            miou: self.miou()?,
            pixel_count: self.total(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: BTreeMap<String, Option<f64>>,
    pub miou: f64,
    pub pixel_count: u64,
}

impl MetricsReport {
    /// `label,<class names in order…>,miou,pixel_count`
    pub fn csv_header(class_names: &[&str]) -> String {
        let mut cols = vec!["label".to_string()];
        cols.extend(class_names.iter().map(|s| s.to_string()));
        cols.push("miou".into());
        cols.push("pixel_count".into());
        cols.join(",")
    }

    /// IoUs as percentages with 4 decimals; undefined classes are empty cells.
    pub fn csv_row(&self, label: &str, class_names: &[&str]) -> String {
        let mut cols = vec![label.to_string()];
        for name in class_names {
            cols.push(match self.per_class_iou.get(*name).copied().flatten() {
                Some(v) => format!("{:.4}", 100.0 * v),
                None => String::new(),
            });
        }
        cols.push(format!("{:.4}", 100.0 * self.miou));
        cols.push(self.pixel_count.to_string());
        cols.join(",")
    }
}
