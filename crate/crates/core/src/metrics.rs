//! Evaluation metrics and feature-map segmentation.

use crate::error::{Error, Result};
use crate::image::ImageBuf;
use crate::objectives::COSINE_EPS;

/// Label of pixels that belong to no class.
pub const BACKGROUND: i32 = -1;

/// Per-pixel class labels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<i32>,
}

impl LabelMap {
    pub fn filled(width: usize, height: usize, label: i32) -> Self {
        Self {
            width,
            height,
            data: vec![label; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> i32 {
        self.data[y * self.width + x]
    }

    /// Most frequent non-background label, lowest id on ties.
    pub fn majority_class(&self) -> Option<i32> {
        let max = self.data.iter().copied().max().unwrap_or(BACKGROUND);
        if max < 0 {
            return None;
        }
        let mut counts = vec![0usize; max as usize + 1];
        for &l in &self.data {
            if l >= 0 {
                counts[l as usize] += 1;
            }
        }
        let best = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
        Some(best.0 as i32)
    }
}

/// Peak signal-to-noise ratio for images in [0, 1]. Identical images give `+∞`.
pub fn psnr(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    if a.data.is_empty() {
        return Err(Error::Dimension("psnr of an empty image".into()));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Label each pixel with the class whose embedding has the highest cosine
/// similarity with the pixel's feature. Ties go to the lowest class id;
/// pixels with a near-zero feature are background.
pub fn segment_feature_map(features: &ImageBuf, table: &[Vec<f64>]) -> Result<LabelMap> {
    let n = features.channels;
    if let Some((k, row)) = table.iter().enumerate().find(|(_, r)| r.len() != n) {
        return Err(Error::Dimension(format!(
            "class {k} embedding has dimension {} but the feature map has {n}",
            row.len()
        )));
    }
    let data = features
        .data
        .chunks(n.max(1))
        .map(|f| {
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0 || norm < COSINE_EPS {
                return BACKGROUND;
            }
            let mut best = BACKGROUND;
            let mut best_score = f64::NEG_INFINITY;
            for (k, row) in table.iter().enumerate() {
                let row_norm = row
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
                    .max(COSINE_EPS);
                let score = f.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() / row_norm;
                if score > best_score {
                    best_score = score;
                    best = k as i32;
                }
            }
            best
        })
        .collect();
    Ok(LabelMap {
        width: features.width,
        height: features.height,
        data,
    })
}

/// Accumulated confusion counts over any number of label maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    /// `counts[gt][pred]`, with the last column for background predictions.
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![vec![0; classes + 1]; classes],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.width != gt.width || pred.height != gt.height {
            return Err(Error::Dimension(format!(
                "label maps {}x{} vs {}x{}",
                pred.width, pred.height, gt.width, gt.height
            )));
        }
        let c = self.classes;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g < 0 || g as usize >= c {
                continue;
            }
            let col = if p < 0 || p as usize >= c {
                c
            } else {
                p as usize
            };
            self.counts[g as usize][col] += 1;
        }
        Ok(())
    }

    /// (mIoU, mAcc) over classes present in the ground truth. Pixels whose
    /// ground truth is background are ignored.
    pub fn miou_macc(&self) -> (f64, f64) {
        let c = self.classes;
        let mut iou_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut present = 0;
        for k in 0..c {
            let gt_total: u64 = self.counts[k].iter().sum();
            if gt_total == 0 {
                continue;
            }
            let tp = self.counts[k][k];
            let pred_total: u64 = (0..c).map(|g| self.counts[g][k]).sum();
            iou_sum += tp as f64 / (gt_total + pred_total - tp) as f64;
            acc_sum += tp as f64 / gt_total as f64;
            present += 1;
        }
        if present == 0 {
            return (0.0, 0.0);
        }
        (iou_sum / present as f64, acc_sum / present as f64)
    }
}

/// (mIoU, mAcc) of one prediction against ground truth with `classes` classes.
pub fn miou_macc(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<(f64, f64)> {
    let mut conf = Confusion::new(classes);
    conf.add(pred, gt)?;
    Ok(conf.miou_macc())
}
