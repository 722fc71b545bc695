//! Segmentation and seed-quality metrics.
//!
//! Counts are pooled over the whole evaluation set before any ratio is
//! taken, so per-image results can be merged in any order.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::SeedMask;

/// `β²` of the seed F-measure; values below 1 weight precision more.
pub const BETA_SQUARED: f64 = 0.4;

/// Weighted harmonic mean `(1+β²)·P·R / (β²·P + R)`; 0 when both are 0.
pub fn f_beta(precision: f64, recall: f64, beta_squared: f64) -> f64 {
    let den = beta_squared * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta_squared) * precision * recall / den
    }
}

/// `(M+1)×(M+1)` confusion counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    /// `classes` includes background.
    pub fn new(classes: usize) -> Self {
        Self {
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

    pub fn add_image(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::ShapeMismatch {
                op: "evaluate_segmentation",
                lhs: vec![pred.len()],
                rhs: vec![gt.len()],
            });
        }
        for (index, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            for label in [p, g] {
                if label as usize >= self.classes {
                    return Err(Error::LabelRange {
                        label,
                        classes: self.classes - 1,
                        index,
                    });
                }
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `TP/(TP+FP+FN)` per class; `None` where the class never occurs in
    /// either prediction or ground truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..self.classes).map(|g| self.get(g, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes).map(<[u64]>::to_vec).collect()
    }
}

/// Mean over the defined per-class IoUs.
pub fn mean_iou(per_class: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

/// Pooled seed counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedCounts {
    /// Foreground seeds whose class matches the ground truth.
    pub correct: u64,
    /// All foreground seeds.
    pub seeded: u64,
    /// Ground-truth foreground pixels.
    pub gt_foreground: u64,
}

impl SeedCounts {
    pub fn add_image(&mut self, seeds: &SeedMask, gt: &[u8]) -> Result<()> {
        if seeds.labels().len() != gt.len() {
            return Err(Error::ShapeMismatch {
                op: "evaluate_seeds",
                lhs: vec![seeds.height(), seeds.width()],
                rhs: vec![gt.len()],
            });
        }
        for (&s, &g) in seeds.labels().iter().zip(gt) {
            if g != SeedMask::BACKGROUND {
                self.gt_foreground += 1;
            }
            if s != SeedMask::BACKGROUND && s != SeedMask::UNLABELED {
                self.seeded += 1;
                if s == g {
                    self.correct += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &SeedCounts) {
        self.correct += other.correct;
        self.seeded += other.seeded;
        self.gt_foreground += other.gt_foreground;
    }

    pub fn quality(&self) -> SeedQuality {
        let no_foreground_seeds = self.seeded == 0;
        let precision = if no_foreground_seeds {
            0.0
        } else {
            self.correct as f64 / self.seeded as f64
        };
        let recall = if self.gt_foreground == 0 {
            0.0
        } else {
            self.correct as f64 / self.gt_foreground as f64
        };
        SeedQuality {
            precision,
            recall,
            f_beta: f_beta(precision, recall, BETA_SQUARED),
            no_foreground_seeds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedQuality {
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
    /// Precision is undefined and reported as 0.
    pub no_foreground_seeds: bool,
}

/// Seed quality of a single mask against its ground truth.
pub fn evaluate_seeds(seeds: &SeedMask, gt: &[u8]) -> Result<SeedQuality> {
    let mut c = SeedCounts::default();
    c.add_image(seeds, gt)?;
    Ok(c.quality())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: Vec<Vec<u64>>,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seeds: Option<SeedQuality>,
}

/// Confusion matrix, per-class IoU and mIoU over paired prediction and
/// ground-truth label maps (`0` background, `1..=M` classes).
pub fn evaluate_segmentation<P: AsRef<[u8]>, G: AsRef<[u8]>>(preds: &[P], gts: &[G], num_classes: usize) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch {
            op: "evaluate_segmentation",
            lhs: vec![preds.len()],
            rhs: vec![gts.len()],
        });
    }
    let mut conf = Confusion::new(num_classes + 1);
    for (p, g) in preds.iter().zip(gts) {
        conf.add_image(p.as_ref(), g.as_ref())?;
    }
    Ok(report_from_confusion(&conf))
}

pub fn report_from_confusion(conf: &Confusion) -> MetricsReport {
    let per_class_iou = conf.per_class_iou();
    MetricsReport {
        confusion: conf.rows(),
        miou: mean_iou(&per_class_iou),
        per_class_iou,
        seeds: None,
    }
}
