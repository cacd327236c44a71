//! Scene-wide tracking with access to future frames: max-aggregated links
//! over all windows, thresholding, link NMS, consistent union into tracks,
//! and gap interpolation.

use std::collections::{BTreeMap, HashMap, HashSet};

use rayon::prelude::*;

use crate::error::Result;
use crate::geometry::lerp_angle;
use crate::io::{TrackFrame, TrackedBox};
use crate::network::Network;
use crate::online::{gate, Gates};
use crate::trackdb::{window_at, window_starts};
use crate::types::{Box3D, SceneDB, Track, TrackStatus};

/// A scored link between boxes of two different frames, `frame_i < frame_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkCandidate {
    pub box_i: u64,
    pub box_j: u64,
    pub frame_i: i64,
    pub frame_j: i64,
    pub class_id: usize,
    pub score: f64,
}

/// Maximum linking score of every gated box pair over all stride-1 windows
/// (one window covering the scene when it is shorter than `k`). Sorted by
/// `(box_i, box_j)`.
pub fn aggregate_links(scene: &SceneDB, net: &Network, k: usize, gates: &Gates) -> Result<Vec<LinkCandidate>> {
    let n = scene.frames.len();
    let k = k.min(n).max(1);
    let starts = window_starts(n, k, 1);
    let per_window: Vec<Vec<(u64, u64, f64, i64, i64, usize)>> = starts
        .par_iter()
        .map(|&s| {
            let w = window_at(scene, s, k)?;
            if w.num_boxes() == 0 {
                return Ok(Vec::new());
            }
            let ls = net.forward(&w)?;
            let boxes: Vec<&Box3D> = w.boxes().collect();
            let mut out = Vec::new();
            for i in 0..ls.n {
                for j in 0..ls.n {
                    let (a, b) = (boxes[i], boxes[j]);
                    if a.frame_idx < b.frame_idx && gate(b, a, gates) {
                        out.push((a.box_id, b.box_id, ls.get(i, j), a.frame_idx, b.frame_idx, a.class_id()));
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut best: BTreeMap<(u64, u64), LinkCandidate> = BTreeMap::new();
    for (bi, bj, s, fi, fj, c) in per_window.into_iter().flatten() {
        best.entry((bi, bj))
            .and_modify(|e| e.score = e.score.max(s))
            .or_insert(LinkCandidate {
                box_i: bi,
                box_j: bj,
                frame_i: fi,
                frame_j: fj,
                class_id: c,
                score: s,
            });
    }
    Ok(best.into_values().collect())
}

/// Drops candidates below their class threshold, then greedily accepts in
/// descending score; accepting `(b_i@f_i, b_j@f_j)` rejects every other
/// candidate linking `b_i` to frame `f_j` or `b_j` to frame `f_i`.
pub fn select_links(cands: &[LinkCandidate], thresholds: &[f64]) -> Vec<LinkCandidate> {
    let mut kept: Vec<&LinkCandidate> = cands
        .iter()
        .filter(|c| c.score >= thresholds.get(c.class_id).copied().unwrap_or(1.0))
        .collect();
    kept.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.box_i, a.box_j).cmp(&(b.box_i, b.box_j))));
    let mut blocked: HashSet<(u64, i64)> = HashSet::new();
    let mut out = Vec::new();
    for c in kept {
        if blocked.contains(&(c.box_i, c.frame_j)) || blocked.contains(&(c.box_j, c.frame_i)) {
            continue;
        }
        blocked.insert((c.box_i, c.frame_j));
        blocked.insert((c.box_j, c.frame_i));
        out.push(c.clone());
    }
    out
}

struct Groups {
    parent: Vec<usize>,
    frames: Vec<HashSet<i64>>,
}

impl Groups {
    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Merges the groups of `a` and `b` unless that puts two boxes in one frame.
    fn union_consistent(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb || !self.frames[ra].is_disjoint(&self.frames[rb]) {
            return false;
        }
        let (keep, gone) = if ra < rb { (ra, rb) } else { (rb, ra) };
        let moved = std::mem::take(&mut self.frames[gone]);
        self.frames[keep].extend(moved);
        self.parent[gone] = keep;
        true
    }
}

/// Unions boxes along links in the given order (highest score first),
/// skipping any union that would give a group two boxes in one frame.
/// Every box ends in exactly one track; ids follow each track's first box.
pub fn build_tracks(links: &[LinkCandidate], scene: &SceneDB) -> Vec<Track> {
    let boxes: Vec<&Box3D> = scene.frames.iter().flat_map(|f| &f.boxes).collect();
    let index: HashMap<u64, usize> = boxes.iter().enumerate().map(|(i, b)| (b.box_id, i)).collect();
    let mut g = Groups {
        parent: (0..boxes.len()).collect(),
        frames: boxes.iter().map(|b| HashSet::from([b.frame_idx])).collect(),
    };
    for l in links {
        if let (Some(&a), Some(&b)) = (index.get(&l.box_i), index.get(&l.box_j)) {
            g.union_consistent(a, b);
        }
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..boxes.len() {
        let r = g.find(i);
        members.entry(r).or_default().push(i);
    }
    let mut groups: Vec<Vec<&Box3D>> = members
        .into_values()
        .map(|m| {
            let mut v: Vec<&Box3D> = m.into_iter().map(|i| boxes[i]).collect();
            v.sort_by_key(|b| (b.frame_idx, b.box_id));
            v
        })
        .collect();
    groups.sort_by_key(|v| (v[0].frame_idx, v[0].box_id));
    groups
        .into_iter()
        .enumerate()
        .map(|(id, v)| {
            let mut tr = Track::new(id as u64, v[0].clone());
            for b in &v[1..] {
                tr.push((*b).clone()).expect("groups hold one box per frame");
            }
            tr.set_status(TrackStatus::Confirmed);
            tr
        })
        .collect()
}

/// Inserts interpolated boxes for every frame missing strictly between two
/// boxes of a track. Timestamps come from the scene's frames.
pub fn interpolate_tracks(tracks: &[Track], scene: &SceneDB) -> Vec<Track> {
    let frame_t: HashMap<i64, f64> = scene.frames.iter().map(|f| (f.frame_idx, f.t)).collect();
    let mut next_id = scene
        .frames
        .iter()
        .flat_map(|f| &f.boxes)
        .map(|b| b.box_id)
        .max()
        .map_or(0, |m| m + 1);
    tracks
        .iter()
        .map(|tr| {
            let mut out = tr.clone();
            for pair in tr.boxes.windows(2) {
                let (a, b) = (&pair[0], &pair[1]);
                for f in a.frame_idx + 1..b.frame_idx {
                    let s = (f - a.frame_idx) as f64 / (b.frame_idx - a.frame_idx) as f64;
                    let l = |p: f64, q: f64| p + (q - p) * s;
                    let nb = Box3D {
                        box_id: next_id,
                        frame_idx: f,
                        t: frame_t.get(&f).copied().unwrap_or_else(|| l(a.t, b.t)),
                        x: l(a.x, b.x),
                        y: l(a.y, b.y),
                        z: l(a.z, b.z),
                        w: l(a.w, b.w),
                        l: l(a.l, b.l),
                        h: l(a.h, b.h),
                        yaw: lerp_angle(a.yaw, b.yaw, s),
                        class_scores: a.class_scores.iter().zip(&b.class_scores).map(|(p, q)| l(*p, *q)).collect(),
                        det_score: l(a.det_score, b.det_score),
                        velocity: match (a.velocity, b.velocity) {
                            (Some(p), Some(q)) => Some([l(p[0], q[0]), l(p[1], q[1])]),
                            _ => None,
                        },
                        gt_track_id: None,
                        interpolated: true,
                    };
                    next_id += 1;
                    out.push(nb).expect("gap frames are free");
                }
            }
            out
        })
        .collect()
}

/// Regroups tracks into per-frame output aligned with the scene's frames.
pub fn tracks_to_frames(tracks: &[Track], scene: &SceneDB) -> Vec<TrackFrame> {
    let mut by_frame: HashMap<i64, Vec<TrackedBox>> = HashMap::new();
    for tr in tracks {
        for b in &tr.boxes {
            by_frame.entry(b.frame_idx).or_default().push(TrackedBox {
                track_id: tr.id,
                bbox: b.clone(),
            });
        }
    }
    scene
        .frames
        .iter()
        .map(|f| {
            let mut tracks = by_frame.remove(&f.frame_idx).unwrap_or_default();
            tracks.sort_by_key(|t| t.track_id);
            TrackFrame {
                frame_idx: f.frame_idx,
                t: f.t,
                tracks,
            }
        })
        .collect()
}

/// Full offline pipeline for one scene.
pub fn track_scene(scene: &SceneDB, net: &Network, k: usize, gates: &Gates, thresholds: &[f64]) -> Result<Vec<TrackFrame>> {
    let cands = aggregate_links(scene, net, k, gates)?;
    let links = select_links(&cands, thresholds);
    let tracks = interpolate_tracks(&build_tracks(&links, scene), scene);
    Ok(tracks_to_frames(&tracks, scene))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::DetectionFrame;

    fn cand(i: u64, j: u64, fi: i64, fj: i64, s: f64) -> LinkCandidate {
        LinkCandidate {
            box_i: i,
            box_j: j,
            frame_i: fi,
            frame_j: fj,
            class_id: 0,
            score: s,
        }
    }

    fn scene(frames: &[&[(u64, f64)]]) -> SceneDB {
        SceneDB {
            scene_id: "s".into(),
            frequency_hz: 10.0,
            class_names: vec!["car".into()],
            frames: frames
                .iter()
                .enumerate()
                .map(|(k, bs)| {
                    let mut f = DetectionFrame::new(k as i64, k as f64 * 0.1);
                    for (id, x) in *bs {
                        let mut b = Box3D::new(0, 1);
                        b.box_id = *id;
                        b.frame_idx = k as i64;
                        b.t = f.t;
                        b.x = *x;
                        f.boxes.push(b);
                    }
                    f
                })
                .collect(),
            gt_tracks: vec![],
        }
    }

    #[test]
    fn nms_keeps_best_per_frame_pair() {
        let c = [cand(1, 2, 0, 1, 0.9), cand(1, 3, 0, 1, 0.7), cand(4, 5, 2, 3, 0.8)];
        let out = select_links(&c, &[0.5]);
        assert_eq!(out, vec![c[0].clone(), c[2].clone()]);
        assert!(select_links(&[cand(1, 2, 0, 1, 0.3)], &[0.5]).is_empty());
        // Same box, different target frame: both survive.
        let c = [cand(1, 2, 0, 1, 0.9), cand(1, 3, 0, 2, 0.8)];
        assert_eq!(select_links(&c, &[0.5]).len(), 2);
    }

    #[test]
    fn chain_and_conflict() {
        let s = scene(&[&[(1, 0.0)], &[(2, 1.0), (4, 5.0)], &[(3, 2.0)]]);
        let tr = build_tracks(&[cand(1, 2, 0, 1, 0.9), cand(2, 3, 1, 2, 0.8)], &s);
        assert_eq!(tr.len(), 2);
        assert_eq!(tr[0].boxes.iter().map(|b| b.box_id).collect::<Vec<_>>(), vec![1, 2, 3]);
        // 1-2 then 1-4 (same frame as 2) must be skipped.
        let tr = build_tracks(&[cand(1, 2, 0, 1, 0.9), cand(1, 4, 0, 1, 0.8)], &s);
        assert_eq!(tr.len(), 3);
        assert_eq!(build_tracks(&[], &s).len(), 4);
    }

    #[test]
    fn gaps_filled_on_segment() {
        let s = scene(&[&[], &[], &[], &[(1, 0.0)], &[], &[], &[(2, 3.0)]]);
        let mut tracks = build_tracks(&[cand(1, 2, 3, 6, 0.9)], &s);
        tracks[0].boxes[1].y = 6.0;
        let out = interpolate_tracks(&tracks, &s);
        let b = &out[0].boxes;
        assert_eq!(b.iter().map(|b| b.frame_idx).collect::<Vec<_>>(), vec![3, 4, 5, 6]);
        assert!(b[1].interpolated && b[2].interpolated && !b[0].interpolated);
        for m in &b[1..3] {
            // (x, y) lies on the segment from (0, 0) to (3, 6).
            assert!((m.y - 2.0 * m.x).abs() < 1e-9);
        }
        assert!((b[1].t - 0.4).abs() < 1e-12);
        let contiguous = build_tracks(&[cand(1, 2, 3, 6, 0.9)], &scene(&[&[(1, 0.0)], &[(2, 1.0)]]));
        assert_eq!(interpolate_tracks(&contiguous, &s), contiguous);
    }
}
