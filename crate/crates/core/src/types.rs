//! Domain values shared by every stage of the tracker.

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{BottError, Result};
use crate::geometry::wrap_angle;

/// One detected or ground-truth 3D box in the global frame.
///
/// `w` is the extent across the heading, `l` the extent along it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub box_id: u64,
    pub frame_idx: i64,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
    pub class_scores: Vec<f64>,
    #[serde(default = "one")]
    pub det_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<[f64; 2]>,
    /// `None` marks a false positive or an unlabeled box. A negative id on
    /// input is read as `None`.
    #[serde(
        default,
        deserialize_with = "de_track_id",
        skip_serializing_if = "Option::is_none"
    )]
    pub gt_track_id: Option<i64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub interpolated: bool,
}

fn one() -> f64 {
    1.0
}

fn de_track_id<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<i64>, D::Error> {
    let raw: Option<i64> = Option::deserialize(d)?;
    Ok(raw.filter(|id| *id >= 0))
}

impl Box3D {
    /// A unit-scored box of class `class_id` out of `n_classes`; handy for
    /// tests and generators.
    pub fn new(class_id: usize, n_classes: usize) -> Self {
        let mut class_scores = vec![0.0; n_classes];
        class_scores[class_id] = 1.0;
        Box3D {
            box_id: 0,
            frame_idx: 0,
            t: 0.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
            w: 1.0,
            l: 1.0,
            h: 1.0,
            yaw: 0.0,
            class_scores,
            det_score: 1.0,
            velocity: None,
            gt_track_id: None,
            interpolated: false,
        }
    }

    /// Argmax of the class scores; lowest index wins ties.
    pub fn class_id(&self) -> usize {
        let mut best = 0;
        for (i, s) in self.class_scores.iter().enumerate() {
            if *s > self.class_scores[best] {
                best = i;
            }
        }
        best
    }

    pub fn is_labeled(&self) -> bool {
        self.gt_track_id.is_some()
    }

    /// Static flag used by the position constraint: a reported speed below
    /// `thresh`. Boxes without velocity are never static.
    pub fn is_static(&self, thresh: f64) -> bool {
        match self.velocity {
            Some([vx, vy]) => vx.hypot(vy) < thresh,
            None => false,
        }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let bad = |what: &str| {
            Err(BottError::domain(format!(
                "box {} (frame {}): {what}",
                self.box_id, self.frame_idx
            )))
        };
        let finite = [self.x, self.y, self.z, self.w, self.l, self.h, self.yaw, self.t];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("non-finite field");
        }
        if !(self.w > 0.0 && self.l > 0.0 && self.h > 0.0) {
            return bad("size must be positive");
        }
        if wrap_angle(self.yaw) != self.yaw {
            return bad("yaw outside (-pi, pi]");
        }
        if self.class_scores.len() != n_classes {
            return bad("class score count does not match taxonomy");
        }
        if self.class_scores.iter().any(|c| !(*c >= 0.0)) {
            return bad("negative class score");
        }
        Ok(())
    }
}

/// All boxes reported for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFrame {
    pub frame_idx: i64,
    pub t: f64,
    pub boxes: Vec<Box3D>,
}

impl DetectionFrame {
    pub fn new(frame_idx: i64, t: f64) -> Self {
        DetectionFrame {
            frame_idx,
            t,
            boxes: Vec::new(),
        }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        for b in &self.boxes {
            b.validate(n_classes)?;
            if b.frame_idx != self.frame_idx || b.t != self.t {
                return Err(BottError::domain(format!(
                    "box {} does not share frame {} timestamp/index",
                    b.box_id, self.frame_idx
                )));
            }
            if !ids.insert(b.box_id) {
                return Err(BottError::domain(format!(
                    "duplicate box id {} in frame {}",
                    b.box_id, self.frame_idx
                )));
            }
        }
        Ok(())
    }
}

/// K consecutive frames: the unit of network input.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidingWindow {
    pub frames: Vec<DetectionFrame>,
}

impl SlidingWindow {
    pub fn new(frames: Vec<DetectionFrame>) -> Result<Self> {
        if frames.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(BottError::domain("window frames must be strictly increasing in t"));
        }
        Ok(SlidingWindow { frames })
    }

    pub fn k(&self) -> usize {
        self.frames.len()
    }

    pub fn num_boxes(&self) -> usize {
        self.frames.iter().map(|f| f.boxes.len()).sum()
    }

    /// Boxes in row order: frame order, then within-frame order.
    pub fn boxes(&self) -> impl Iterator<Item = &Box3D> {
        self.frames.iter().flat_map(|f| f.boxes.iter())
    }

    /// Time spanned from first to last frame, in seconds.
    pub fn duration(&self) -> f64 {
        match (self.frames.first(), self.frames.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackStatus {
    Unconfirmed,
    Confirmed,
    Terminated,
}

/// A time-ordered list of boxes sharing one identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: u64,
    pub boxes: Vec<Box3D>,
    pub status: TrackStatus,
    pub last_update_t: f64,
    pub class_id: usize,
}

impl Track {
    pub fn new(id: u64, first: Box3D) -> Self {
        Track {
            id,
            class_id: first.class_id(),
            last_update_t: first.t,
            boxes: vec![first],
            status: TrackStatus::Unconfirmed,
        }
    }

    pub fn tail(&self) -> &Box3D {
        self.boxes.last().expect("tracks are never empty")
    }

    /// Inserts a box, keeping time order. A box for a frame already on the
    /// track is rejected.
    pub fn push(&mut self, b: Box3D) -> Result<()> {
        if self.boxes.iter().any(|o| o.frame_idx == b.frame_idx) {
            return Err(BottError::domain(format!(
                "track {} already has a box in frame {}",
                self.id, b.frame_idx
            )));
        }
        let pos = self.boxes.partition_point(|o| o.t < b.t);
        self.last_update_t = self.last_update_t.max(b.t);
        self.boxes.insert(pos, b);
        self.debug_check_sorted();
        Ok(())
    }

    pub fn set_status(&mut self, next: TrackStatus) {
        use TrackStatus::*;
        let ok = matches!(
            (self.status, next),
            (Unconfirmed, Confirmed) | (Unconfirmed, Terminated) | (Confirmed, Terminated)
        ) || self.status == next;
        debug_assert!(ok, "illegal track transition {:?} -> {:?}", self.status, next);
        if ok {
            self.status = next;
        }
    }

    /// Sortedness hook run after every mutation in debug builds.
    #[inline]
    pub fn debug_check_sorted(&self) {
        debug_assert!(
            self.boxes
                .windows(2)
                .all(|w| w[0].t < w[1].t && w[0].frame_idx < w[1].frame_idx),
            "track {} boxes out of order",
            self.id
        );
    }
}

/// Per-scene store of detection frames, ground-truth tracks and the
/// detection labels linking the two.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDB {
    pub scene_id: String,
    pub frequency_hz: f64,
    pub class_names: Vec<String>,
    pub frames: Vec<DetectionFrame>,
    pub gt_tracks: Vec<Track>,
}

impl SceneDB {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frequency_hz > 0.0) {
            return Err(BottError::domain("frequency_hz must be positive"));
        }
        let period = 1.0 / self.frequency_hz;
        for w in self.frames.windows(2) {
            let dt = w[1].t - w[0].t;
            if (dt - period).abs() > 0.01 * period {
                return Err(BottError::domain(format!(
                    "frames {} and {} are {dt:.6}s apart, expected {period:.6}s",
                    w[0].frame_idx, w[1].frame_idx
                )));
            }
        }
        let c = self.num_classes();
        for f in &self.frames {
            f.validate(c)?;
        }
        let gt_ids: std::collections::HashSet<i64> =
            self.gt_tracks.iter().map(|t| t.id as i64).collect();
        for b in self.frames.iter().flat_map(|f| &f.boxes) {
            if let Some(id) = b.gt_track_id {
                if !gt_ids.contains(&id) {
                    return Err(BottError::domain(format!(
                        "box {} references unknown gt track {id}",
                        b.box_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Ground-truth boxes regrouped per frame, aligned with `frames`.
    pub fn gt_frames(&self) -> Vec<DetectionFrame> {
        let mut out: Vec<DetectionFrame> = self
            .frames
            .iter()
            .map(|f| DetectionFrame::new(f.frame_idx, f.t))
            .collect();
        let index: std::collections::HashMap<i64, usize> = self
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| (f.frame_idx, i))
            .collect();
        for track in &self.gt_tracks {
            for b in &track.boxes {
                if let Some(&i) = index.get(&b.frame_idx) {
                    out[i].boxes.push(b.clone());
                }
            }
        }
        for f in &mut out {
            f.boxes.sort_by_key(|b| (b.gt_track_id, b.box_id));
        }
        out
    }

    /// Keeps every `step`-th frame (and the GT boxes on those frames),
    /// dividing the frequency accordingly.
    pub fn resample(&self, step: usize) -> SceneDB {
        let step = step.max(1);
        let frames: Vec<DetectionFrame> = self.frames.iter().step_by(step).cloned().collect();
        let kept: std::collections::HashSet<i64> = frames.iter().map(|f| f.frame_idx).collect();
        let gt_tracks = self
            .gt_tracks
            .iter()
            .filter_map(|t| {
                let boxes: Vec<Box3D> = t
                    .boxes
                    .iter()
                    .filter(|b| kept.contains(&b.frame_idx))
                    .cloned()
                    .collect();
                (!boxes.is_empty()).then(|| Track {
                    last_update_t: boxes.last().map(|b| b.t).unwrap_or(t.last_update_t),
                    boxes,
                    ..t.clone()
                })
            })
            .collect();
        SceneDB {
            scene_id: self.scene_id.clone(),
            frequency_hz: self.frequency_hz / step as f64,
            class_names: self.class_names.clone(),
            frames,
            gt_tracks,
        }
    }
}

/// Groups labeled boxes by `gt_track_id` into confirmed, time-ordered tracks.
pub fn tracks_from_labels<'a>(boxes: impl IntoIterator<Item = &'a Box3D>) -> Vec<Track> {
    let mut by_id: std::collections::BTreeMap<i64, Vec<Box3D>> = Default::default();
    for b in boxes {
        if let Some(id) = b.gt_track_id {
            by_id.entry(id).or_default().push(b.clone());
        }
    }
    by_id
        .into_iter()
        .map(|(id, mut boxes)| {
            boxes.sort_by(|a, b| a.t.total_cmp(&b.t));
            boxes.dedup_by_key(|b| b.frame_idx);
            Track {
                id: id as u64,
                class_id: boxes[0].class_id(),
                last_update_t: boxes.last().unwrap().t,
                boxes,
                status: TrackStatus::Confirmed,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(frame: i64, t: f64) -> Box3D {
        let mut b = Box3D::new(0, 2);
        b.frame_idx = frame;
        b.t = t;
        b
    }

    #[test]
    fn track_push_keeps_order() {
        let mut tr = Track::new(1, at(5, 0.5));
        tr.push(at(2, 0.2)).unwrap();
        tr.push(at(9, 0.9)).unwrap();
        let frames: Vec<i64> = tr.boxes.iter().map(|b| b.frame_idx).collect();
        assert_eq!(frames, vec![2, 5, 9]);
        assert!(tr.push(at(5, 0.5)).is_err());
        assert_eq!(tr.last_update_t, 0.9);
    }

    #[test]
    fn negative_track_id_reads_as_false_positive() {
        let mut b = Box3D::new(1, 2);
        b.gt_track_id = Some(3);
        let mut v = serde_json::to_value(&b).unwrap();
        v["gt_track_id"] = serde_json::json!(-1);
        let back: Box3D = serde_json::from_value(v).unwrap();
        assert_eq!(back.gt_track_id, None);
    }

    #[test]
    fn class_id_is_argmax() {
        let mut b = Box3D::new(0, 3);
        b.class_scores = vec![0.1, 0.7, 0.2];
        assert_eq!(b.class_id(), 1);
    }

    #[test]
    fn box_validation() {
        let mut b = Box3D::new(0, 2);
        assert!(b.validate(2).is_ok());
        assert!(b.validate(3).is_err());
        b.w = 0.0;
        assert!(b.validate(2).is_err());
        b.w = 1.0;
        b.yaw = -std::f64::consts::PI;
        assert!(b.validate(2).is_err());
    }

    #[test]
    fn window_rejects_unordered_frames() {
        let f0 = DetectionFrame::new(0, 0.0);
        let f1 = DetectionFrame::new(1, 0.0);
        assert!(SlidingWindow::new(vec![f0, f1]).is_err());
    }
}
