use serde::{Deserialize, Serialize};

use super::{iou, BBox, Layout};
use crate::error::{invalid, Result};

pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub lambda_ol: f64,
    pub lambda_bl: f64,
    pub eps: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lambda_ol: 0.5,
            lambda_bl: 0.5,
            eps: DEFAULT_EPS,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ol >= 0.0 && self.lambda_bl >= 0.0) {
            return Err(invalid("reward weights must be >= 0"));
        }
        if !(self.eps > 0.0) {
            return Err(invalid("eps must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub iou: f64,
    pub overlap: f64,
    pub balance: f64,
    pub total: f64,
}

/// Mean IoU between boxes paired by index.
pub fn reward_iou_boxes(pred: &[BBox], gt: &[BBox], eps: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(invalid(format!(
            "layout lengths differ: {} predicted vs {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(invalid("reward_iou needs at least one box"));
    }
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| iou(p, g, eps)).sum();
    Ok(sum / pred.len() as f64)
}

/// Negative mean pairwise IoU among predicted boxes; 0 for fewer than two.
pub fn reward_overlap_boxes(pred: &[BBox], eps: f64) -> f64 {
    let n = pred.len();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += iou(&pred[i], &pred[j], eps);
        }
    }
    -2.0 * sum / (n * (n - 1)) as f64
}

/// Negative coefficient of variation (population std / mean) of box areas.
pub fn reward_balance_boxes(pred: &[BBox]) -> Result<f64> {
    if pred.is_empty() {
        return Err(invalid("reward_balance needs at least one box"));
    }
    let n = pred.len() as f64;
    let areas: Vec<f64> = pred.iter().map(|b| b.area() as f64).collect();
    let mean = areas.iter().sum::<f64>() / n;
    let var = areas.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    Ok(-var.sqrt() / mean)
}

pub fn reward_iou(pred: &Layout, gt: &Layout, eps: f64) -> Result<f64> {
    reward_iou_boxes(&pred.boxes(), &gt.boxes(), eps)
}

pub fn reward_overlap(pred: &Layout, eps: f64) -> f64 {
    reward_overlap_boxes(&pred.boxes(), eps)
}

pub fn reward_balance(pred: &Layout) -> Result<f64> {
    reward_balance_boxes(&pred.boxes())
}

pub fn total_reward_boxes(pred: &[BBox], gt: &[BBox], w: &RewardWeights) -> Result<RewardBreakdown> {
    w.validate()?;
    let iou = reward_iou_boxes(pred, gt, w.eps)?;
    let overlap = reward_overlap_boxes(pred, w.eps);
    let balance = reward_balance_boxes(pred)?;
    Ok(RewardBreakdown {
        iou,
        overlap,
        balance,
        total: iou + w.lambda_ol * overlap + w.lambda_bl * balance,
    })
}

pub fn total_reward(pred: &Layout, gt: &Layout, w: &RewardWeights) -> Result<RewardBreakdown> {
    total_reward_boxes(&pred.boxes(), &gt.boxes(), w)
}
