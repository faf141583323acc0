//! Confusion matrices and mean IoU.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    /// Row = truth, column = prediction.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Accumulate one class map pair. Pixels whose truth is `ignore` are
    /// dropped, as are out-of-range labels on either side.
    pub fn add(&mut self, pred: &[u16], truth: &[u16], ignore: u16) {
        assert_eq!(pred.len(), truth.len(), "prediction/truth length mismatch");
        let k = self.classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if t == ignore || p == ignore {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p < k && t < k {
                self.counts[t * k + p] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// IoU per class; `None` for classes absent from both prediction and truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let fn_: u64 = (0..k).map(|j| self.counts[c * k + j]).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|i| self.counts[i * k + c]).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean over present classes; 0 when nothing was evaluated.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

/// Per-class IoU and their mean over a set of class maps.
pub fn miou(preds: &[Vec<u16>], truths: &[Vec<u16>], classes: usize, ignore: u16) -> (Vec<Option<f64>>, f64) {
    let mut cm = ConfusionMatrix::new(classes);
    for (p, t) in preds.iter().zip(truths) {
        cm.add(p, t, ignore);
    }
    (cm.per_class_iou(), cm.miou())
}

/// Per-pixel argmax of an `H×W×K` score field; ties go to the lowest class.
pub fn argmax_map(scores: &[f64], classes: usize) -> Vec<u16> {
    scores
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u16
        })
        .collect()
}
