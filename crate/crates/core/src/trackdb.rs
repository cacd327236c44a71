//! Training database generation: detection filtering, ground-truth
//! interpolation, detection-to-GT labeling, and window enumeration.

use serde::{Deserialize, Serialize};

use crate::assignment::hungarian;
use crate::classes::{default_nms_iou, default_score_min, ClassTable};
use crate::error::{BottError, Result};
use crate::geometry::{bev_iou, lerp_angle};
use crate::types::{tracks_from_labels, Box3D, DetectionFrame, SceneDB, SlidingWindow, Track};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DbGenConfig {
    pub nms_iou: ClassTable,
    pub score_min: ClassTable,
    /// Matches at or below this IoU are rejected.
    pub match_iou_min: f64,
    pub target_hz: f64,
}

impl Default for DbGenConfig {
    fn default() -> Self {
        DbGenConfig {
            nms_iou: default_nms_iou(),
            score_min: default_score_min(),
            match_iou_min: 1e-4,
            target_hz: 10.0,
        }
    }
}

/// Class-wise score filtering followed by greedy BEV NMS. `nms_iou` and
/// `score_min` are indexed by class id.
pub fn nms_filter(frame: &DetectionFrame, nms_iou: &[f64], score_min: &[f64]) -> Result<DetectionFrame> {
    let mut order: Vec<&Box3D> = Vec::with_capacity(frame.boxes.len());
    for b in &frame.boxes {
        let c = b.class_id();
        let (Some(min), Some(_)) = (score_min.get(c), nms_iou.get(c)) else {
            return Err(BottError::domain(format!("no NMS thresholds for class id {c}")));
        };
        if b.det_score >= *min {
            order.push(b);
        }
    }
    order.sort_by(|a, b| b.det_score.total_cmp(&a.det_score).then(a.box_id.cmp(&b.box_id)));
    let mut kept: Vec<&Box3D> = Vec::new();
    for b in order {
        let c = b.class_id();
        let mut suppressed = false;
        for k in kept.iter().filter(|k| k.class_id() == c) {
            if bev_iou(b, k)? > nms_iou[c] {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(b);
        }
    }
    // Preserve the input order of survivors.
    let ids: std::collections::HashSet<u64> = kept.iter().map(|b| b.box_id).collect();
    Ok(DetectionFrame {
        frame_idx: frame.frame_idx,
        t: frame.t,
        boxes: frame.boxes.iter().filter(|b| ids.contains(&b.box_id)).cloned().collect(),
    })
}

fn lerp_box(a: &Box3D, b: &Box3D, s: f64) -> Box3D {
    let l = |p: f64, q: f64| p + (q - p) * s;
    Box3D {
        x: l(a.x, b.x),
        y: l(a.y, b.y),
        z: l(a.z, b.z),
        w: l(a.w, b.w),
        l: l(a.l, b.l),
        h: l(a.h, b.h),
        yaw: lerp_angle(a.yaw, b.yaw, s),
        t: l(a.t, b.t),
        interpolated: true,
        ..a.clone()
    }
}

/// Fills each GT track up to `target_hz` by linear interpolation of center
/// and size and shortest-arc interpolation of yaw. Frame indices are
/// re-derived as `round(t * target_hz)` when the rate changes; box ids of
/// inserted boxes continue after the largest existing id. Velocities of all
/// output boxes come from central differences of centers.
pub fn interpolate_gt(tracks: &[Track], source_hz: f64, target_hz: f64) -> Result<Vec<Track>> {
    if !(source_hz > 0.0) || target_hz < source_hz {
        return Err(BottError::domain(format!(
            "cannot interpolate from {source_hz} Hz to {target_hz} Hz"
        )));
    }
    if target_hz == source_hz {
        return Ok(tracks.to_vec());
    }
    let dt = 1.0 / target_hz;
    let mut next_id = tracks.iter().flat_map(|t| &t.boxes).map(|b| b.box_id).max().map_or(0, |m| m + 1);
    let mut out = Vec::with_capacity(tracks.len());
    for track in tracks {
        let mut boxes = Vec::new();
        for pair in track.boxes.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            boxes.push(a.clone());
            let span = b.t - a.t;
            let mut m = 1;
            while a.t + m as f64 * dt < b.t - 1e-6 * dt {
                let mut nb = lerp_box(a, b, m as f64 * dt / span);
                nb.box_id = next_id;
                next_id += 1;
                boxes.push(nb);
                m += 1;
            }
        }
        boxes.push(track.tail().clone());
        for b in &mut boxes {
            b.frame_idx = (b.t * target_hz).round() as i64;
        }
        if boxes.len() > 1 {
            let centers: Vec<(f64, f64, f64)> = boxes.iter().map(|b| (b.x, b.y, b.t)).collect();
            for (i, b) in boxes.iter_mut().enumerate() {
                let (p, q) = (centers[i.saturating_sub(1)], centers[(i + 1).min(centers.len() - 1)]);
                b.velocity = Some([(q.0 - p.0) / (q.2 - p.2), (q.1 - p.1) / (q.2 - p.2)]);
            }
        }
        boxes.dedup_by_key(|b| b.frame_idx);
        out.push(Track {
            boxes,
            ..track.clone()
        });
    }
    Ok(out)
}

/// Class-aware Hungarian matching on `1 - IoU`; matched detections take
/// the GT identity, the rest become false positives.
pub fn associate_gt(dets: &DetectionFrame, gts: &DetectionFrame, match_iou_min: f64) -> Result<DetectionFrame> {
    let mut out = dets.clone();
    for b in &mut out.boxes {
        b.gt_track_id = None;
    }
    let classes: std::collections::BTreeSet<usize> = dets.boxes.iter().map(Box3D::class_id).collect();
    for c in classes {
        let di: Vec<usize> = (0..dets.boxes.len()).filter(|i| dets.boxes[*i].class_id() == c).collect();
        let gi: Vec<usize> = (0..gts.boxes.len()).filter(|i| gts.boxes[*i].class_id() == c).collect();
        if gi.is_empty() {
            continue;
        }
        let mut iou = vec![vec![0.0; gi.len()]; di.len()];
        for (r, d) in di.iter().enumerate() {
            for (s, g) in gi.iter().enumerate() {
                iou[r][s] = bev_iou(&dets.boxes[*d], &gts.boxes[*g])?;
            }
        }
        let cost: Vec<Vec<f64>> = iou.iter().map(|row| row.iter().map(|v| 1.0 - v).collect()).collect();
        for (r, s) in hungarian(&cost)? {
            if iou[r][s] > match_iou_min {
                out.boxes[di[r]].gt_track_id = gts.boxes[gi[s]].gt_track_id;
            }
        }
    }
    Ok(out)
}

/// Builds a labeled scene from raw detections and ground truth. Ground truth
/// is interpolated to `target_hz` and matched to the detection frame at the
/// same timestamp.
pub fn generate_db(dets: &SceneDB, gt: &SceneDB, cfg: &DbGenConfig) -> Result<SceneDB> {
    if dets.class_names != gt.class_names {
        return Err(BottError::domain("detections and ground truth use different class names"));
    }
    let nms = cfg.nms_iou.resolve(&dets.class_names)?;
    let smin = cfg.score_min.resolve(&dets.class_names)?;
    let gt_boxes: Vec<&Box3D> = gt.frames.iter().flat_map(|f| &f.boxes).collect();
    let gt_tracks = interpolate_gt(&tracks_from_labels(gt_boxes), gt.frequency_hz, cfg.target_hz.max(gt.frequency_hz))?;

    let tol = 0.25 / dets.frequency_hz;
    let mut by_frame: Vec<DetectionFrame> = dets.frames.iter().map(|f| DetectionFrame::new(f.frame_idx, f.t)).collect();
    let mut out_tracks: Vec<Track> = Vec::new();
    for track in gt_tracks {
        let mut boxes = Vec::new();
        for b in &track.boxes {
            let pos = dets.frames.partition_point(|f| f.t < b.t - tol);
            if let Some(f) = dets.frames.get(pos).filter(|f| (f.t - b.t).abs() <= tol) {
                let mut nb = b.clone();
                nb.frame_idx = f.frame_idx;
                nb.t = f.t;
                by_frame[pos].boxes.push(nb.clone());
                boxes.push(nb);
            }
        }
        if !boxes.is_empty() {
            out_tracks.push(Track {
                last_update_t: boxes.last().map_or(track.last_update_t, |b: &Box3D| b.t),
                boxes,
                ..track
            });
        }
    }

    let mut frames = Vec::with_capacity(dets.frames.len());
    for (f, g) in dets.frames.iter().zip(&by_frame) {
        let filtered = nms_filter(f, &nms, &smin)?;
        frames.push(associate_gt(&filtered, g, cfg.match_iou_min)?);
    }
    let scene = SceneDB {
        scene_id: dets.scene_id.clone(),
        frequency_hz: dets.frequency_hz,
        class_names: dets.class_names.clone(),
        frames,
        gt_tracks: out_tracks,
    };
    scene.validate()?;
    Ok(scene)
}

/// Start indices of the windows `[i, i + k)` for `i = 0, stride, ...`.
pub fn window_starts(n_frames: usize, k: usize, stride: usize) -> Vec<usize> {
    if k == 0 || n_frames < k {
        return Vec::new();
    }
    (0..=n_frames - k).step_by(stride.max(1)).collect()
}

pub fn window_at(scene: &SceneDB, start: usize, k: usize) -> Result<SlidingWindow> {
    let frames = scene
        .frames
        .get(start..start + k)
        .ok_or_else(|| BottError::domain(format!("window [{start}, {}) outside scene", start + k)))?;
    SlidingWindow::new(frames.to_vec())
}

pub fn build_windows(scene: &SceneDB, k: usize, stride: usize) -> Result<Vec<SlidingWindow>> {
    window_starts(scene.frames.len(), k, stride)
        .into_iter()
        .map(|s| window_at(scene, s, k))
        .collect()
}
