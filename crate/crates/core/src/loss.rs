//! Link targets, the loss mask, hard-negative mining, and the masked,
//! positive-weighted binary cross-entropy.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::classes::{default_max_speed, ClassTable};
use crate::error::{BottError, Result};
use crate::geometry::center_distance;
use crate::types::{Box3D, SlidingWindow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Negatives kept per positive by mining.
    pub kappa: usize,
    /// Positive weight; conventionally `kappa / (kappa + 1)`.
    pub beta: f64,
    pub class_max_speed: ClassTable,
    pub clamp_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kappa: 4,
            beta: 0.8,
            class_max_speed: default_max_speed(),
            clamp_eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kappa < 1 {
            return Err(BottError::Config("loss.kappa must be at least 1".into()));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(BottError::Config("loss.beta must lie in (0, 1)".into()));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(BottError::Config("loss.clamp_eps must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Row-major `N x N` targets and mask, rows in featurizer order.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkTargets {
    pub n: usize,
    pub y: Vec<bool>,
    pub mask: Vec<bool>,
}

fn window_boxes(window: &SlidingWindow) -> Vec<&Box3D> {
    window.boxes().collect()
}

/// `y_ij` is set iff both boxes carry the same GT identity.
pub fn build_targets(window: &SlidingWindow) -> Vec<bool> {
    let boxes = window_boxes(window);
    let n = boxes.len();
    let mut y = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            y[i * n + j] = matches!((boxes[i].gt_track_id, boxes[j].gt_track_id), (Some(a), Some(b)) if a == b);
        }
    }
    y
}

/// Links excluded from the loss: different classes, same frame, two false
/// positives, or a displacement beyond `max_speed[class] * |dt|`.
/// `max_speed` is indexed by class id.
pub fn build_mask(window: &SlidingWindow, max_speed: &[f64]) -> Result<Vec<bool>> {
    let boxes = window_boxes(window);
    let n = boxes.len();
    let classes: Vec<usize> = boxes.iter().map(|b| b.class_id()).collect();
    if let Some(c) = classes.iter().find(|c| **c >= max_speed.len()) {
        return Err(BottError::domain(format!("class id {c} has no max speed")));
    }
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (boxes[i], boxes[j]);
            let keep = classes[i] == classes[j]
                && a.frame_idx != b.frame_idx
                && (a.is_labeled() || b.is_labeled())
                && center_distance(a, b) <= max_speed[classes[i]] * (a.t - b.t).abs();
            m[i * n + j] = keep;
            m[j * n + i] = keep;
        }
    }
    Ok(m)
}

pub fn link_targets(window: &SlidingWindow, max_speed: &[f64]) -> Result<LinkTargets> {
    Ok(LinkTargets {
        n: window.num_boxes(),
        y: build_targets(window),
        mask: build_mask(window, max_speed)?,
    })
}

/// Result of mining; counts are over unordered pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedMask {
    pub mask: Vec<bool>,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Keeps every unmasked positive and the `kappa * P` unmasked negatives with
/// the highest linking score, counting each symmetric pair once. Ties go to
/// the lower `(row, col)`.
pub fn hard_negative_mine(ls: &[f64], targets: &LinkTargets, kappa: usize) -> MinedMask {
    let n = targets.n;
    let mut mask = vec![false; n * n];
    let mut n_pos = 0;
    let mut negatives = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let k = i * n + j;
            if !targets.mask[k] {
                continue;
            }
            if targets.y[k] {
                mask[k] = true;
                mask[j * n + i] = true;
                n_pos += 1;
            } else {
                negatives.push((i, j));
            }
        }
    }
    let budget = kappa.saturating_mul(n_pos);
    if negatives.len() > budget {
        // Stable sort keeps (row, col) order among equal scores.
        negatives.sort_by(|a, b| ls[b.0 * n + b.1].total_cmp(&ls[a.0 * n + a.1]));
        negatives.truncate(budget);
    }
    for (i, j) in &negatives {
        mask[i * n + j] = true;
        mask[j * n + i] = true;
    }
    MinedMask {
        mask,
        n_pos,
        n_neg: negatives.len(),
    }
}

/// Unnormalized masked BCE: `(sum of per-entry losses, active entries,
/// d sum / d LS)`. Entries are the ordered pairs of the full matrix.
pub fn masked_bce_sum(ls: &[f64], y: &[bool], mask: &[bool], beta: f64, eps: f64) -> (f64, usize, Vec<f64>) {
    let mut total = 0.0;
    let mut count = 0;
    let mut grad = vec![0.0; ls.len()];
    for k in 0..ls.len() {
        if !mask[k] {
            continue;
        }
        count += 1;
        let clipped = ls[k] < eps || ls[k] > 1.0 - eps;
        let p = ls[k].clamp(eps, 1.0 - eps);
        if y[k] {
            total -= beta * p.ln();
            if !clipped {
                grad[k] = -beta / p;
            }
        } else {
            total -= (1.0 - beta) * (1.0 - p).ln();
            if !clipped {
                grad[k] = (1.0 - beta) / (1.0 - p);
            }
        }
    }
    (total, count, grad)
}

/// Masked BCE normalized by the number of active entries, with its gradient.
pub fn masked_bce(ls: &[f64], y: &[bool], mask: &[bool], beta: f64, eps: f64) -> Result<(f64, Vec<f64>)> {
    let (total, count, mut grad) = masked_bce_sum(ls, y, mask, beta, eps);
    if count == 0 {
        return Err(BottError::domain("loss mask has no active entries"));
    }
    let inv = 1.0 / count as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((total * inv, grad))
}

/// Records the loss on the tape as a scalar whose gradient flows into `ls`.
/// `normalizer` is the active-entry count of the whole batch.
pub fn loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    ls: Var,
    y: &[bool],
    mask: &[bool],
    cfg: &LossConfig,
    normalizer: usize,
) -> Result<Var> {
    if normalizer == 0 {
        return Err(BottError::domain("loss mask has no active entries"));
    }
    let lsv = tape.value(ls);
    let values = lsv.to_f64_vec();
    let shape = lsv.shape.clone();
    let (total, _, grad) = masked_bce_sum(&values, y, mask, cfg.beta, cfg.clamp_eps);
    let inv = 1.0 / normalizer as f64;
    let grad = Tensor::from_vec(&shape, grad.iter().map(|g| T::of(g * inv)).collect())?;
    tape.scalar_head(ls, T::of(total * inv), grad)
}
