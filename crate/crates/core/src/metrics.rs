//! Desk-scale CLEAR-MOT evaluation on center-distance matches.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::hungarian;
use crate::error::{BottError, Result};
use crate::geometry::center_distance;
use crate::io::{gt_track_frames, TrackFrame, TrackedBox};
use crate::types::SceneDB;

pub const MATCH_RADIUS: f64 = 2.0;
/// Score thresholds averaged by `samota`.
pub const SAMOTA_POINTS: usize = 40;

/// Matches predictions to GT boxes of one frame, class by class, minimizing
/// total center distance. Returns `(pred, gt)` index pairs within `radius`.
pub fn match_frame(pred: &[TrackedBox], gt: &[TrackedBox], radius: f64) -> Result<Vec<(usize, usize)>> {
    let mut classes: Vec<usize> = gt.iter().map(|g| g.bbox.class_id()).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::new();
    for c in classes {
        let p: Vec<usize> = (0..pred.len()).filter(|&i| pred[i].bbox.class_id() == c).collect();
        let g: Vec<usize> = (0..gt.len()).filter(|&j| gt[j].bbox.class_id() == c).collect();
        if p.is_empty() {
            continue;
        }
        // Out-of-radius pairs cost more than any in-radius assignment can save.
        let big = radius * (p.len().max(g.len()) as f64 + 1.0) + 1.0;
        let cost: Vec<Vec<f64>> = p
            .iter()
            .map(|&i| {
                g.iter()
                    .map(|&j| {
                        let d = center_distance(&pred[i].bbox, &gt[j].bbox);
                        if d <= radius {
                            d
                        } else {
                            big
                        }
                    })
                    .collect()
            })
            .collect();
        for (a, b) in hungarian(&cost)? {
            if cost[a][b] <= radius {
                out.push((p[a], g[b]));
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Additive CLEAR-MOT counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub gt: u64,
    pub matches: u64,
    pub fp: u64,
    pub fn_: u64,
    pub ids: u64,
}

impl Counts {
    fn add(&mut self, o: &Counts) {
        self.gt += o.gt;
        self.matches += o.matches;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.ids += o.ids;
    }

    pub fn mota(&self) -> f64 {
        1.0 - (self.fn_ + self.fp + self.ids) as f64 / self.gt as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub counts: Counts,
    pub mota: f64,
    pub recall: f64,
    /// IDS per GT match.
    pub mismatch_ratio: f64,
    pub samota: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub overall: ClassMetrics,
    /// Only classes with GT boxes appear.
    pub per_class: BTreeMap<String, ClassMetrics>,
}

/// One scene's predictions paired with its ground truth, aligned by frame index.
pub struct ScenePair<'a> {
    pub pred: &'a [TrackFrame],
    pub gt: Vec<TrackFrame>,
}

impl<'a> ScenePair<'a> {
    pub fn new(pred: &'a [TrackFrame], scene: &SceneDB) -> Self {
        ScenePair {
            pred,
            gt: gt_track_frames(scene),
        }
    }
}

/// Per-class counts for one scene, keeping predictions with
/// `det_score >= min_score`.
fn scene_counts(pair: &ScenePair, min_score: f64, n_classes: usize) -> Result<Vec<Counts>> {
    let mut counts = vec![Counts::default(); n_classes];
    let pred_at: HashMap<i64, &TrackFrame> = pair.pred.iter().map(|f| (f.frame_idx, f)).collect();
    let mut last_match: HashMap<u64, u64> = HashMap::new();
    for gf in &pair.gt {
        let pred: Vec<TrackedBox> = pred_at
            .get(&gf.frame_idx)
            .map(|f| f.tracks.iter().filter(|t| t.bbox.det_score >= min_score).cloned().collect())
            .unwrap_or_default();
        let matches = match_frame(&pred, &gf.tracks, MATCH_RADIUS)?;
        let mut gt_hit = vec![false; gf.tracks.len()];
        let mut pred_hit = vec![false; pred.len()];
        for &(p, g) in &matches {
            gt_hit[g] = true;
            pred_hit[p] = true;
            let c = &mut counts[gf.tracks[g].bbox.class_id()];
            c.matches += 1;
            let gid = gf.tracks[g].track_id;
            if let Some(prev) = last_match.insert(gid, pred[p].track_id) {
                if prev != pred[p].track_id {
                    c.ids += 1;
                }
            }
        }
        for (g, hit) in gt_hit.iter().enumerate() {
            let c = &mut counts[gf.tracks[g].bbox.class_id()];
            c.gt += 1;
            if !hit {
                c.fn_ += 1;
            }
        }
        for (p, hit) in pred_hit.iter().enumerate() {
            if !hit {
                if let Some(c) = counts.get_mut(pred[p].bbox.class_id()) {
                    c.fp += 1;
                }
            }
        }
    }
    Ok(counts)
}

fn summed(pairs: &[ScenePair], min_score: f64, n_classes: usize) -> Result<Vec<Counts>> {
    let per_scene: Vec<Vec<Counts>> = pairs
        .par_iter()
        .map(|p| scene_counts(p, min_score, n_classes))
        .collect::<Result<_>>()?;
    let mut total = vec![Counts::default(); n_classes];
    for s in &per_scene {
        for (t, c) in total.iter_mut().zip(s) {
            t.add(c);
        }
    }
    Ok(total)
}

/// Score thresholds at evenly spaced quantiles of the given scores.
fn quantile_thresholds(mut scores: Vec<f64>) -> Vec<f64> {
    if scores.is_empty() {
        return vec![f64::NEG_INFINITY];
    }
    scores.sort_by(f64::total_cmp);
    (0..SAMOTA_POINTS)
        .map(|q| scores[q * (scores.len() - 1) / SAMOTA_POINTS])
        .collect()
}

fn metrics_of(c: Counts, samota: f64) -> ClassMetrics {
    ClassMetrics {
        counts: c,
        mota: c.mota(),
        recall: c.matches as f64 / c.gt as f64,
        mismatch_ratio: if c.matches == 0 { 0.0 } else { c.ids as f64 / c.matches as f64 },
        samota,
    }
}

/// Evaluates tracker output over a set of scenes sharing one taxonomy.
///
/// `samota` averages MOTA clamped to `[0, 1]` over predictions re-filtered
/// at 40 detection-score quantiles, per class on that class's scores.
pub fn evaluate(pairs: &[ScenePair], class_names: &[String]) -> Result<EvalResult> {
    let n = class_names.len();
    let base = summed(pairs, f64::NEG_INFINITY, n)?;
    let total = base.iter().fold(Counts::default(), |mut a, c| {
        a.add(c);
        a
    });
    if total.gt == 0 {
        return Err(BottError::domain("evaluation needs at least one GT box"));
    }

    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut all_scores = Vec::new();
    for p in pairs {
        for tb in p.pred.iter().flat_map(|f| &f.tracks) {
            if let Some(s) = scores.get_mut(tb.bbox.class_id()) {
                s.push(tb.bbox.det_score);
                all_scores.push(tb.bbox.det_score);
            }
        }
    }
    let clamp = |c: &Counts| c.mota().clamp(0.0, 1.0);

    let mut per_class = BTreeMap::new();
    for (k, name) in class_names.iter().enumerate() {
        if base[k].gt == 0 {
            continue;
        }
        let ths = quantile_thresholds(std::mem::take(&mut scores[k]));
        let mut acc = 0.0;
        for &th in &ths {
            acc += clamp(&summed(pairs, th, n)?[k]);
        }
        per_class.insert(name.clone(), metrics_of(base[k], acc / ths.len() as f64));
    }

    let ths = quantile_thresholds(all_scores);
    let mut acc = 0.0;
    for &th in &ths {
        let c = summed(pairs, th, n)?.iter().fold(Counts::default(), |mut a, c| {
            a.add(c);
            a
        });
        acc += clamp(&c);
    }
    Ok(EvalResult {
        overall: metrics_of(total, acc / ths.len() as f64),
        per_class,
    })
}

/// Convenience for one scene.
pub fn evaluate_scene(pred: &[TrackFrame], scene: &SceneDB) -> Result<EvalResult> {
    evaluate(&[ScenePair::new(pred, scene)], &scene.class_names)
}
