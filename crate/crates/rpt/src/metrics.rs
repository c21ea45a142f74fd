//! Segmentation quality metrics: confusion matrix, per-class
//! intersection-over-union, and their mean.

use crate::error::{Result, RptError};
use crate::tensor::{LabelMap, IGNORE_LABEL};

/// Row-major confusion counts: `counts[gt * classes + pred]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Confusion {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Accumulate one prediction/ground-truth pair. Pixels whose ground
    /// truth is the ignore sentinel are skipped; the prediction may not
    /// contain the sentinel or any out-of-range class.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(RptError::Invalid(format!(
                "prediction {}x{} does not match ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        pred.validate_classes(self.classes)?;
        gt.validate_classes(self.classes)?;
        for (p, g) in pred.data.iter().zip(&gt.data) {
            if *g == IGNORE_LABEL {
                continue;
            }
            if *p == IGNORE_LABEL {
                return Err(RptError::Invalid(
                    "prediction contains the ignore sentinel".into(),
                ));
            }
            self.counts[*g as usize * self.classes + *p as usize] += 1;
        }
        Ok(())
    }

    /// Intersection-over-union per class: `TP / (TP + FP + FN)`. Classes
    /// absent from both ground truth and prediction have no score.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.counts[c * self.classes + c];
                let mut fp = 0u64;
                let mut fn_ = 0u64;
                for other in 0..self.classes {
                    if other != c {
                        fp += self.counts[other * self.classes + c];
                        fn_ += self.counts[c * self.classes + other];
                    }
                }
                let denom = tp + fp + fn_;
                if denom == 0 {
                    None
                } else {
                    Some(tp as f64 / denom as f64)
                }
            })
            .collect()
    }

    /// Mean IoU over classes that appear in ground truth or prediction.
    /// `None` when no pixel was accumulated at all.
    pub fn mean_iou(&self) -> Option<f64> {
        let ious: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if ious.is_empty() {
            None
        } else {
            Some(ious.iter().sum::<f64>() / ious.len() as f64)
        }
    }
}
