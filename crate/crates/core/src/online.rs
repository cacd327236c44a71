//! Frame-by-frame tracking from windowed linking scores: gating, track
//! affinities, Hungarian association and track management.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::assignment::hungarian;
use crate::classes::{default_distance_threshold, default_max_speed, default_min_link_score, ClassTable};
use crate::error::{BottError, Result};
use crate::geometry::center_distance;
use crate::io::{TrackFrame, TrackedBox};
use crate::network::{AttentionDump, LinkScoreMatrix, Network};
use crate::types::{Box3D, DetectionFrame, SlidingWindow, Track, TrackStatus};

/// How the per-class distance thresholds combine with the speed limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceRule {
    /// `distance <= max(max_speed * dt, threshold)`.
    Floor,
    /// `distance <= min(max_speed * dt, threshold)`.
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineConfig {
    pub k: usize,
    /// Boxes needed before a track is published.
    pub n_birth: usize,
    /// Idle seconds after which a track is terminated.
    pub t_term: f64,
    pub max_speed: ClassTable,
    pub distance_threshold: ClassTable,
    pub distance_rule: DistanceRule,
    pub min_link_score: ClassTable,
    /// Zero affinities below the class minimum before the assignment
    /// instead of only rejecting such matches afterwards.
    pub threshold_before_assignment: bool,
    pub static_speed_thresh: f64,
    pub static_max_dist: f64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            k: 16,
            n_birth: 1,
            t_term: 2.0,
            max_speed: default_max_speed(),
            distance_threshold: default_distance_threshold(),
            distance_rule: DistanceRule::Hard,
            min_link_score: default_min_link_score(),
            threshold_before_assignment: true,
            static_speed_thresh: 0.5,
            static_max_dist: 2.0,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n_birth == 0 {
            return Err(BottError::Config("online: k and n_birth must be positive".into()));
        }
        if !(self.t_term > 0.0) {
            return Err(BottError::Config("online: t_term must be positive".into()));
        }
        if self.min_link_score.values.values().chain(&self.min_link_score.default).any(|s| !(0.0..=1.0).contains(s)) {
            return Err(BottError::Config("online: min_link_score values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, class_names: &[String]) -> Result<Gates> {
        Ok(Gates {
            max_speed: self.max_speed.resolve(class_names)?,
            distance_threshold: self.distance_threshold.resolve(class_names)?,
            min_link_score: self.min_link_score.resolve(class_names)?,
            rule: self.distance_rule,
            static_speed_thresh: self.static_speed_thresh,
            static_max_dist: self.static_max_dist,
        })
    }
}

/// Gating constants resolved to class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Gates {
    pub max_speed: Vec<f64>,
    pub distance_threshold: Vec<f64>,
    pub min_link_score: Vec<f64>,
    pub rule: DistanceRule,
    pub static_speed_thresh: f64,
    pub static_max_dist: f64,
}

/// Whether `det` may link to the earlier box `hist`: same class, within the
/// class speed limit (with distance threshold), and not a long link
/// involving a static-flagged box.
pub fn gate(det: &Box3D, hist: &Box3D, g: &Gates) -> bool {
    let dt = det.t - hist.t;
    let c = det.class_id();
    if dt <= 0.0 || c != hist.class_id() || c >= g.max_speed.len() {
        return false;
    }
    let dist = center_distance(det, hist);
    let reach = match g.rule {
        DistanceRule::Floor => (g.max_speed[c] * dt).max(g.distance_threshold[c]),
        DistanceRule::Hard => (g.max_speed[c] * dt).min(g.distance_threshold[c]),
    };
    if dist > reach {
        return false;
    }
    let is_static = det.is_static(g.static_speed_thresh) || hist.is_static(g.static_speed_thresh);
    !(is_static && dist > g.static_max_dist)
}

/// `AS[d][j]`: for detection row `dets[d]` and track `j`, the maximum gated
/// linking score to the track's boxes in earlier frames of the window.
pub fn affinity(
    ls: &LinkScoreMatrix,
    window: &SlidingWindow,
    dets: &[usize],
    tracks: &[&Track],
    gates: &Gates,
) -> Vec<Vec<f64>> {
    let boxes: Vec<&Box3D> = window.boxes().collect();
    let last = window.k().saturating_sub(1);
    let row_of: HashMap<u64, usize> = ls
        .box_ref
        .iter()
        .enumerate()
        .filter(|(i, _)| ls.frame_of[*i] < last)
        .map(|(i, id)| (*id, i))
        .collect();
    dets.iter()
        .map(|&d| {
            tracks
                .iter()
                .map(|tr| {
                    if tr.class_id != boxes[d].class_id() {
                        return 0.0;
                    }
                    tr.boxes
                        .iter()
                        .filter_map(|b| row_of.get(&b.box_id))
                        .filter(|&&k| gate(boxes[d], boxes[k], gates))
                        .map(|&k| ls.get(d, k))
                        .fold(0.0, f64::max)
                })
                .collect()
        })
        .collect()
}

/// Hungarian on `1 - AS`, then rejection of pairs below the detection
/// class's minimum score. With `threshold_first`, sub-threshold scores are
/// zeroed before the assignment so they cannot pull it away from strong
/// pairs. Returns `(matches, unmatched dets, unmatched tracks)`.
pub fn associate(
    scores: &[Vec<f64>],
    det_classes: &[usize],
    min_link_score: &[f64],
    threshold_first: bool,
) -> Result<(Vec<(usize, usize)>, Vec<usize>, Vec<usize>)> {
    let n_tracks = scores.first().map_or(0, Vec::len);
    let pruned: Vec<Vec<f64>>;
    let scores = if threshold_first {
        pruned = scores
            .iter()
            .zip(det_classes)
            .map(|(r, c)| {
                let thr = min_link_score.get(*c).copied().unwrap_or(1.0);
                r.iter().map(|&s| if s >= thr { s } else { 0.0 }).collect()
            })
            .collect();
        &pruned
    } else {
        scores
    };
    let cost: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|s| 1.0 - s).collect()).collect();
    let pairs = if n_tracks == 0 { Vec::new() } else { hungarian(&cost)? };
    let mut matches = Vec::new();
    for (d, t) in pairs {
        let thr = min_link_score.get(det_classes[d]).copied().unwrap_or(1.0);
        if scores[d][t] > 0.0 && scores[d][t] >= thr {
            matches.push((d, t));
        }
    }
    let (md, mt): (Vec<usize>, Vec<usize>) = matches.iter().copied().unzip();
    let un_d = (0..scores.len()).filter(|d| !md.contains(d)).collect();
    let un_t = (0..n_tracks).filter(|t| !mt.contains(t)).collect();
    Ok((matches, un_d, un_t))
}

/// Greedy nearest-neighbor association on center distance to each track's
/// latest box, restricted to gated pairs. Ties break by (det, track).
pub fn associate_nearest(frame: &DetectionFrame, tracks: &[&Track], gates: &Gates) -> Vec<(usize, usize)> {
    let mut cands = Vec::new();
    for (d, det) in frame.boxes.iter().enumerate() {
        for (j, tr) in tracks.iter().enumerate() {
            if tr.class_id == det.class_id() && gate(det, tr.tail(), gates) {
                cands.push((center_distance(det, tr.tail()), d, j));
            }
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let (mut used_d, mut used_t) = (vec![false; frame.boxes.len()], vec![false; tracks.len()]);
    let mut out = Vec::new();
    for (_, d, j) in cands {
        if !used_d[d] && !used_t[j] {
            used_d[d] = true;
            used_t[j] = true;
            out.push((d, j));
        }
    }
    out.sort_unstable();
    out
}

/// Association strategy of a tracker.
#[derive(Clone, Copy)]
pub enum Associator<'a> {
    /// Learned linking scores.
    Network(&'a Network),
    /// Gated greedy nearest neighbor, the reference baseline.
    NearestNeighbor,
}

/// Output of one tracking step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub published: TrackFrame,
    pub attention: Option<AttentionDump>,
}

/// Per-stream tracker state.
pub struct OnlineTracker<'a> {
    assoc: Associator<'a>,
    cfg: OnlineConfig,
    gates: Gates,
    buffer: VecDeque<DetectionFrame>,
    tracks: Vec<Track>,
    next_id: u64,
    current_t: Option<f64>,
    forwards: u64,
    steps: u64,
}

impl<'a> OnlineTracker<'a> {
    pub fn new(assoc: Associator<'a>, cfg: OnlineConfig, class_names: &[String]) -> Result<Self> {
        cfg.validate()?;
        if let Associator::Network(net) = &assoc {
            let want = crate::featurizer::input_dim(class_names.len());
            if net.cfg.input_dim != want {
                return Err(BottError::domain(format!(
                    "model expects input width {}, scene classes give {want}",
                    net.cfg.input_dim
                )));
            }
        }
        Ok(OnlineTracker {
            gates: cfg.resolve(class_names)?,
            assoc,
            cfg,
            buffer: VecDeque::new(),
            tracks: Vec::new(),
            next_id: 0,
            current_t: None,
            forwards: 0,
            steps: 0,
        })
    }

    /// Live (non-terminated) tracks.
    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// `(network forwards, steps)` so far.
    pub fn counters(&self) -> (u64, u64) {
        (self.forwards, self.steps)
    }

    pub fn step(&mut self, frame: &DetectionFrame) -> Result<TrackFrame> {
        Ok(self.step_full(frame, false)?.published)
    }

    /// Processes one frame; with `want_attention`, also returns the
    /// attention weights of this step's forward pass, if one ran.
    pub fn step_full(&mut self, frame: &DetectionFrame, want_attention: bool) -> Result<StepOutput> {
        if let Some(t) = self.current_t {
            if frame.t <= t {
                return Err(BottError::domain(format!(
                    "frame {} at t={} is not after t={t}",
                    frame.frame_idx, frame.t
                )));
            }
        }
        if frame.boxes.iter().any(|b| b.frame_idx != frame.frame_idx || b.t != frame.t) {
            return Err(BottError::domain(format!("frame {} holds boxes of another frame", frame.frame_idx)));
        }
        self.current_t = Some(frame.t);
        self.steps += 1;
        self.buffer.push_back(frame.clone());
        while self.buffer.len() > self.cfg.k {
            self.buffer.pop_front();
        }

        let live: Vec<&Track> = self.tracks.iter().collect();
        let mut attention = None;
        let matches: Vec<(usize, usize)> = if frame.boxes.is_empty() || live.is_empty() {
            Vec::new()
        } else {
            match &self.assoc {
                Associator::NearestNeighbor => associate_nearest(frame, &live, &self.gates),
                Associator::Network(net) => {
                    let window = SlidingWindow::new(self.buffer.iter().cloned().collect())?;
                    let (ls, attn) = if want_attention {
                        let (ls, a) = net.forward_with_attention(&window)?;
                        (ls, Some(a))
                    } else {
                        (net.forward(&window)?, None)
                    };
                    self.forwards += 1;
                    attention = attn;
                    // The current frame's boxes are the last rows.
                    let first_det = ls.n - frame.boxes.len();
                    let dets: Vec<usize> = (first_det..ls.n).collect();
                    let scores = affinity(&ls, &window, &dets, &live, &self.gates);
                    let classes: Vec<usize> = frame.boxes.iter().map(Box3D::class_id).collect();
                    associate(&scores, &classes, &self.gates.min_link_score, self.cfg.threshold_before_assignment)?.0
                }
            }
        };

        let mut matched_det = vec![false; frame.boxes.len()];
        for (d, j) in &matches {
            matched_det[*d] = true;
            self.tracks[*j].push(frame.boxes[*d].clone())?;
        }
        for (d, b) in frame.boxes.iter().enumerate() {
            if !matched_det[d] {
                self.tracks.push(Track::new(self.next_id, b.clone()));
                self.next_id += 1;
            }
        }
        for tr in &mut self.tracks {
            if tr.status == TrackStatus::Unconfirmed && tr.boxes.len() >= self.cfg.n_birth {
                tr.set_status(TrackStatus::Confirmed);
            }
            if frame.t - tr.last_update_t > self.cfg.t_term {
                tr.set_status(TrackStatus::Terminated);
            }
        }
        self.tracks.retain(|t| t.status != TrackStatus::Terminated);

        let mut published: Vec<TrackedBox> = self
            .tracks
            .iter()
            .filter(|t| t.status == TrackStatus::Confirmed && t.tail().frame_idx == frame.frame_idx)
            .map(|t| TrackedBox {
                track_id: t.id,
                bbox: t.tail().clone(),
            })
            .collect();
        published.sort_by_key(|b| b.track_id);
        Ok(StepOutput {
            published: TrackFrame {
                frame_idx: frame.frame_idx,
                t: frame.t,
                tracks: published,
            },
            attention,
        })
    }
}

/// Runs a fresh tracker over a whole frame sequence.
pub fn track_frames(
    assoc: Associator,
    cfg: &OnlineConfig,
    class_names: &[String],
    frames: &[DetectionFrame],
) -> Result<Vec<TrackFrame>> {
    let mut tr = OnlineTracker::new(assoc, cfg.clone(), class_names)?;
    frames.iter().map(|f| tr.step(f)).collect()
}
