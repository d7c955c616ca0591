//! Confusion-matrix segmentation metrics.
//!
//! mIoU averages TP / (TP + FP + FN) over the classes that appear in the
//! ground truth or the prediction; classes absent from both are skipped.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pixel_io::LabelMap;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("prediction is {pred:?}, ground truth is {gt:?}")]
    DimensionMismatch {
        pred: (usize, usize),
        gt: (usize, usize),
    },
    #[error("label {label} outside {num_classes} classes")]
    LabelOutOfRange { label: u8, num_classes: usize },
    #[error("confusion matrices have {0} and {1} classes")]
    ClassCountMismatch(usize, usize),
    #[error("confusion matrix is empty")]
    Empty,
    #[error("num_classes must be in 1..=256, got {0}")]
    InvalidClassCount(usize),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Row = ground truth, column = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Result<Self> {
        if !(1..=256).contains(&num_classes) {
            return Err(MetricsError::InvalidClassCount(num_classes));
        }
        Ok(Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        let (pd, gd) = ((pred.width(), pred.height()), (gt.width(), gt.height()));
        if pd != gd {
            return Err(MetricsError::DimensionMismatch { pred: pd, gt: gd });
        }
        let c = self.num_classes;
        let bad = pred
            .labels()
            .iter()
            .chain(gt.labels())
            .find(|&&l| l as usize >= c);
        if let Some(&label) = bad {
            return Err(MetricsError::LabelOutOfRange {
                label,
                num_classes: c,
            });
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(MetricsError::ClassCountMismatch(
                self.num_classes,
                other.num_classes,
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn gt_total(&self, k: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(k, p)).sum()
    }

    fn pred_total(&self, k: usize) -> u64 {
        (0..self.num_classes).map(|g| self.get(g, k)).sum()
    }

    /// IoU per class; `None` for classes in neither ground truth nor
    /// prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|k| {
                let tp = self.get(k, k);
                let union = self.gt_total(k) + self.pred_total(k) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(MetricsError::Empty);
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(MetricsError::Empty);
        }
        let diag: u64 = (0..self.num_classes).map(|k| self.get(k, k)).sum();
        Ok(diag as f64 / total as f64)
    }

    pub fn report(&self) -> Result<EvalReport> {
        Ok(EvalReport {
            per_class_iou: self.per_class_iou(),
            miou: self.miou()?,
            pixel_accuracy: self.pixel_accuracy()?,
        })
    }
}

pub fn accumulate(cm: &mut ConfusionMatrix, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    cm.accumulate(pred, gt)
}

pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    cm.miou()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `null` for classes absent from both sides.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(w: usize, labels: &[u8]) -> LabelMap {
        LabelMap::new(w, labels.len() / w, labels.to_vec()).unwrap()
    }

    #[test]
    fn perfect_is_diagonal() {
        let gt = map(4, &[0, 1, 2, 3, 3, 2, 1, 0]);
        let mut cm = ConfusionMatrix::new(5).unwrap();
        cm.accumulate(&gt, &gt).unwrap();
        for g in 0..5 {
            for p in 0..5 {
                assert_eq!(cm.get(g, p), if g == p && g < 4 { 2 } else { 0 });
            }
        }
        assert_eq!(cm.miou().unwrap(), 1.0);
        assert_eq!(cm.per_class_iou()[4], None);
    }

    #[test]
    fn single_pixel_off_diagonal() {
        let mut cm = ConfusionMatrix::new(3).unwrap();
        cm.accumulate(&map(1, &[2]), &map(1, &[1])).unwrap();
        assert_eq!(cm.get(1, 2), 1);
        assert_eq!(cm.total(), 1);
        assert_eq!(cm.miou().unwrap(), 0.0);
    }

    #[test]
    fn worked_seven_twelfths() {
        // Class 0: 50 px, all right. Class 1: 50 px, 25 right, 25 called 0.
        let mut gt = vec![0u8; 50];
        gt.extend([1u8; 50]);
        let mut pred = vec![0u8; 75];
        pred.extend([1u8; 25]);
        let mut cm = ConfusionMatrix::new(2).unwrap();
        cm.accumulate(&map(10, &pred), &map(10, &gt)).unwrap();
        let iou = cm.per_class_iou();
        assert_eq!(iou, vec![Some(50.0 / 75.0), Some(25.0 / 50.0)]);
        assert!((cm.miou().unwrap() - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(cm.pixel_accuracy().unwrap(), 0.75);
    }

    #[test]
    fn errors() {
        let mut cm = ConfusionMatrix::new(2).unwrap();
        assert!(matches!(cm.miou(), Err(MetricsError::Empty)));
        assert!(matches!(
            cm.accumulate(&map(2, &[0, 0]), &map(1, &[0, 0])),
            Err(MetricsError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cm.accumulate(&map(1, &[2]), &map(1, &[0])),
            Err(MetricsError::LabelOutOfRange { label: 2, .. })
        ));
        assert!(ConfusionMatrix::new(0).is_err());
        assert!(cm.merge(&ConfusionMatrix::new(3).unwrap()).is_err());
    }

    #[test]
    fn report_json_shape() {
        let mut cm = ConfusionMatrix::new(3).unwrap();
        cm.accumulate(&map(2, &[0, 1]), &map(2, &[0, 1])).unwrap();
        let json = serde_json::to_string(&cm.report().unwrap()).unwrap();
        assert_eq!(
            json,
            r#"{"per_class_iou":[1.0,1.0,null],"miou":1.0,"pixel_accuracy":1.0}"#
        );
    }
}
