//! Raw per-box features for a sliding window, and training-time
//! augmentation of windows.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BottError, Result};
use crate::geometry::wrap_angle;
use crate::types::{Box3D, SlidingWindow};

/// Features before the class scores: centered xyz, wlh, sin/cos yaw, dt.
pub const GEOM_FEATURES: usize = 9;

pub fn input_dim(n_classes: usize) -> usize {
    GEOM_FEATURES + n_classes
}

/// `N x (9 + C)` row-major feature matrix with per-row bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatureMatrix {
    pub values: Vec<f64>,
    pub n: usize,
    pub dim: usize,
    /// Index of the row's frame inside the window.
    pub frame_of: Vec<usize>,
    pub class_of: Vec<usize>,
    pub box_ref: Vec<u64>,
}

impl RawFeatureMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// Builds the feature matrix. Rows follow frame order, then box order.
pub fn featurize(window: &SlidingWindow) -> Result<RawFeatureMatrix> {
    let n = window.num_boxes();
    if n == 0 {
        return Err(BottError::domain("cannot featurize an empty window"));
    }
    let n_classes = window.boxes().next().map_or(0, |b| b.class_scores.len());
    let dim = input_dim(n_classes);
    let (mut x_min, mut y_min, mut z_min) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    for b in window.boxes() {
        x_min = x_min.min(b.x);
        y_min = y_min.min(b.y);
        z_min = z_min.min(b.z);
    }
    let t_mid = (window.frames[0].t + window.frames[window.k() - 1].t) / 2.0;

    let mut values = Vec::with_capacity(n * dim);
    let mut frame_of = Vec::with_capacity(n);
    let mut class_of = Vec::with_capacity(n);
    let mut box_ref = Vec::with_capacity(n);
    for (fi, frame) in window.frames.iter().enumerate() {
        for b in &frame.boxes {
            if b.class_scores.len() != n_classes {
                return Err(BottError::domain(format!(
                    "box {} has {} class scores, expected {n_classes}",
                    b.box_id,
                    b.class_scores.len()
                )));
            }
            let (s, c) = b.yaw.sin_cos();
            values.extend_from_slice(&[
                b.x - x_min,
                b.y - y_min,
                b.z - z_min,
                b.w,
                b.l,
                b.h,
                s,
                c,
                b.t - t_mid,
            ]);
            values.extend_from_slice(&b.class_scores);
            frame_of.push(fi);
            class_of.push(b.class_id());
            box_ref.push(b.box_id);
        }
    }
    Ok(RawFeatureMatrix {
        values,
        n,
        dim,
        frame_of,
        class_of,
        box_ref,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub max_boxes: usize,
    pub flip_x_prob: f64,
    pub flip_y_prob: f64,
    /// Rotation is drawn from `U(-yaw_range, yaw_range)`.
    pub yaw_range: f64,
    /// Probability of dropping each GT identity (and each FP box).
    pub drop_track_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_boxes: 3000,
            flip_x_prob: 0.5,
            flip_y_prob: 0.5,
            yaw_range: FRAC_PI_2,
            drop_track_prob: 0.1,
        }
    }
}

impl AugmentConfig {
    /// Only recentering, no randomness.
    pub fn identity() -> Self {
        AugmentConfig {
            max_boxes: usize::MAX,
            flip_x_prob: 0.0,
            flip_y_prob: 0.0,
            yaw_range: 0.0,
            drop_track_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_boxes == 0 {
            return Err(BottError::Config("augment.max_boxes must be positive".into()));
        }
        if !(0.0..=PI).contains(&self.yaw_range) {
            return Err(BottError::Config("augment.yaw_range must lie in [0, pi]".into()));
        }
        for p in [self.flip_x_prob, self.flip_y_prob, self.drop_track_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(BottError::Config("augment probabilities must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Unit {
    Track(i64),
    FalsePositive(u64, i64),
}

fn unit_of(b: &Box3D) -> Unit {
    match b.gt_track_id {
        Some(id) => Unit::Track(id),
        None => Unit::FalsePositive(b.box_id, b.frame_idx),
    }
}

/// Reflection across the x axis.
pub fn flip_x(b: &mut Box3D) {
    b.y = -b.y;
    b.yaw = wrap_angle(-b.yaw);
    if let Some(v) = &mut b.velocity {
        v[1] = -v[1];
    }
}

/// Reflection across the y axis.
pub fn flip_y(b: &mut Box3D) {
    b.x = -b.x;
    b.yaw = wrap_angle(PI - b.yaw);
    if let Some(v) = &mut b.velocity {
        v[0] = -v[0];
    }
}

/// Rotation about the origin by `angle`.
pub fn rotate(b: &mut Box3D, angle: f64) {
    let (s, c) = angle.sin_cos();
    let (x, y) = (b.x, b.y);
    b.x = x * c - y * s;
    b.y = x * s + y * c;
    b.yaw = wrap_angle(b.yaw + angle);
    if let Some([vx, vy]) = b.velocity {
        b.velocity = Some([vx * c - vy * s, vx * s + vy * c]);
    }
}

/// Applies, in order: identity/FP dropping down to `max_boxes`, recentering
/// on the xy bounding-box middle, optional x/y flips, and a global rotation.
pub fn augment(window: &SlidingWindow, cfg: &AugmentConfig, rng: &mut impl Rng) -> SlidingWindow {
    let mut out = window.clone();

    // Whole identities and single FP boxes are the drop units.
    let mut counts: BTreeMap<Unit, usize> = BTreeMap::new();
    for b in out.boxes() {
        *counts.entry(unit_of(b)).or_default() += 1;
    }
    let mut dropped = std::collections::BTreeSet::new();
    let mut total = out.num_boxes();
    if cfg.drop_track_prob > 0.0 {
        for (u, c) in &counts {
            if rng.random::<f64>() < cfg.drop_track_prob {
                dropped.insert(*u);
                total -= c;
            }
        }
    }
    if total > cfg.max_boxes {
        let mut remaining: Vec<Unit> = counts.keys().filter(|u| !dropped.contains(u)).copied().collect();
        while total > cfg.max_boxes && !remaining.is_empty() {
            let u = remaining.swap_remove(rng.random_range(0..remaining.len()));
            total -= counts[&u];
            dropped.insert(u);
        }
    }
    if !dropped.is_empty() {
        for f in &mut out.frames {
            f.boxes.retain(|b| !dropped.contains(&unit_of(b)));
        }
    }

    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for b in out.boxes() {
        x_lo = x_lo.min(b.x);
        x_hi = x_hi.max(b.x);
        y_lo = y_lo.min(b.y);
        y_hi = y_hi.max(b.y);
    }
    let (cx, cy) = if x_lo.is_finite() {
        ((x_hi + x_lo) / 2.0, (y_hi + y_lo) / 2.0)
    } else {
        (0.0, 0.0)
    };

    let do_flip_x = rng.random::<f64>() < cfg.flip_x_prob;
    let do_flip_y = rng.random::<f64>() < cfg.flip_y_prob;
    let angle = if cfg.yaw_range > 0.0 {
        rng.random_range(-cfg.yaw_range..=cfg.yaw_range)
    } else {
        0.0
    };

    for b in out.frames.iter_mut().flat_map(|f| f.boxes.iter_mut()) {
        b.x -= cx;
        b.y -= cy;
        if do_flip_x {
            flip_x(b);
        }
        if do_flip_y {
            flip_y(b);
        }
        if angle != 0.0 {
            rotate(b, angle);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::DetectionFrame;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn window(k: usize, hz: f64, per_frame: &[(f64, f64, Option<i64>)]) -> SlidingWindow {
        let mut frames = Vec::new();
        let mut id = 0;
        for f in 0..k {
            let t = 100.0 + f as f64 / hz;
            let mut fr = DetectionFrame::new(f as i64, t);
            for (j, (x, y, gt)) in per_frame.iter().enumerate() {
                let mut b = Box3D::new(j % 2, 2);
                b.frame_idx = f as i64;
                b.t = t;
                b.x = x + f as f64;
                b.y = *y;
                b.z = 0.5;
                b.yaw = 0.3;
                b.box_id = id;
                b.gt_track_id = *gt;
                b.velocity = Some([1.0, 0.5]);
                id += 1;
                fr.boxes.push(b);
            }
            frames.push(fr);
        }
        SlidingWindow::new(frames).unwrap()
    }

    fn count_positive_links(w: &SlidingWindow) -> usize {
        let ids: Vec<Option<i64>> = w.boxes().map(|b| b.gt_track_id).collect();
        let mut n = 0;
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                n += (ids[i].is_some() && ids[i] == ids[j]) as usize;
            }
        }
        n
    }

    #[test]
    fn single_box_is_its_own_minimum() {
        let w = window(1, 10.0, &[(10.0, 20.0, None)]);
        let f = featurize(&w).unwrap();
        assert_eq!(&f.row(0)[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(f.dim, 11);
    }

    #[test]
    fn empty_window_is_error() {
        let w = SlidingWindow::new(vec![DetectionFrame::new(0, 0.0)]).unwrap();
        assert!(featurize(&w).is_err());
    }

    #[test]
    fn time_feature_uses_window_midpoint() {
        let w = window(16, 10.0, &[(0.0, 0.0, Some(1))]);
        let f = featurize(&w).unwrap();
        let last = f.row(15)[8];
        assert!((last - 0.75).abs() < 1e-9, "{last}");
        assert!((f.row(0)[8] + 0.75).abs() < 1e-9);
    }

    #[test]
    fn translation_gives_identical_features() {
        let w = window(4, 10.0, &[(1.0, 2.0, Some(1)), (-3.0, 5.0, None)]);
        let mut moved = w.clone();
        for b in moved.frames.iter_mut().flat_map(|f| f.boxes.iter_mut()) {
            b.x += 100.0;
            b.y -= 50.0;
            b.z += 3.0;
        }
        assert_eq!(featurize(&w).unwrap(), featurize(&moved).unwrap());
    }

    #[test]
    fn row_bookkeeping() {
        let w = window(3, 10.0, &[(1.0, 2.0, Some(1)), (-3.0, 5.0, None)]);
        let f = featurize(&w).unwrap();
        assert_eq!(f.frame_of, vec![0, 0, 1, 1, 2, 2]);
        assert_eq!(f.class_of, vec![0, 1, 0, 1, 0, 1]);
        assert_eq!(f.box_ref, (0..6).collect::<Vec<u64>>());
        for i in 0..f.n {
            let r = f.row(i);
            assert!((r[6] * r[6] + r[7] * r[7] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_augment_only_recenters() {
        let w = window(3, 10.0, &[(1.0, 2.0, Some(1)), (-3.0, 6.0, None)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = augment(&w, &AugmentConfig::identity(), &mut rng);
        // x spans [-3, 3], y spans [2, 6] -> center (0, 4).
        for (orig, aug) in w.boxes().zip(a.boxes()) {
            assert_eq!(aug.x, orig.x);
            assert_eq!(aug.y, orig.y - 4.0);
            assert_eq!(aug.yaw, orig.yaw);
        }
    }

    #[test]
    fn x_flip_algebra() {
        let mut b = Box3D::new(0, 1);
        b.x = 1.0;
        b.y = 2.0;
        b.yaw = 0.3;
        flip_x(&mut b);
        assert_eq!((b.x, b.y, b.z, b.yaw), (1.0, -2.0, 0.0, -0.3));
        flip_x(&mut b);
        assert_eq!((b.x, b.y, b.yaw), (1.0, 2.0, 0.3));
    }

    #[test]
    fn quarter_turn() {
        let mut b = Box3D::new(0, 1);
        b.x = 1.0;
        rotate(&mut b, FRAC_PI_2);
        assert!(b.x.abs() < 1e-12 && (b.y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn box_cap_drops_whole_identities() {
        let w = window(8, 10.0, &[(0.0, 0.0, Some(1)), (5.0, 0.0, Some(2)), (9.0, 9.0, None)]);
        let cfg = AugmentConfig {
            max_boxes: 10,
            drop_track_prob: 0.0,
            ..AugmentConfig::identity()
        };
        let a = augment(&w, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert!(a.num_boxes() <= 10);
        for id in [1, 2] {
            let c = a.boxes().filter(|b| b.gt_track_id == Some(id)).count();
            assert!(c == 0 || c == 8, "identity {id} partially dropped: {c}");
        }
    }

    proptest! {
        #[test]
        fn double_flip_is_identity(x in -50.0..50.0f64, y in -50.0..50.0f64, yaw in -3.14..3.14f64) {
            let mut b = Box3D::new(0, 1);
            b.x = x; b.y = y; b.yaw = yaw;
            let orig = b.clone();
            flip_y(&mut b);
            flip_y(&mut b);
            prop_assert!((b.yaw - orig.yaw).abs() < 1e-12 || (b.yaw - orig.yaw).abs() > 6.28);
            prop_assert_eq!(b.x, orig.x);
            flip_x(&mut b);
            flip_x(&mut b);
            prop_assert_eq!(b.y, orig.y);
        }

        #[test]
        fn augment_preserves_box_attributes(seed in 0u64..1000) {
            let w = window(5, 10.0, &[(0.0, 0.0, Some(1)), (5.0, 1.0, Some(2)), (9.0, 9.0, None)]);
            let cfg = AugmentConfig { drop_track_prob: 0.0, ..AugmentConfig::default() };
            let a = augment(&w, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(a.num_boxes(), w.num_boxes());
            prop_assert_eq!(count_positive_links(&a), count_positive_links(&w));
            for (o, b) in w.boxes().zip(a.boxes()) {
                prop_assert_eq!((o.w, o.l, o.h, o.t, o.gt_track_id), (b.w, b.l, b.h, b.t, b.gt_track_id));
                prop_assert_eq!(&o.class_scores, &b.class_scores);
                prop_assert!(b.yaw > -PI && b.yaw <= PI);
            }
        }

        #[test]
        fn features_translation_invariant(tx in -1e4..1e4f64, ty in -1e4..1e4f64, tz in -100.0..100.0f64) {
            let w = window(4, 10.0, &[(1.0, 2.0, Some(1)), (-3.0, 5.0, None)]);
            let mut moved = w.clone();
            for b in moved.frames.iter_mut().flat_map(|f| f.boxes.iter_mut()) {
                b.x += tx; b.y += ty; b.z += tz;
            }
            let (a, b) = (featurize(&w).unwrap(), featurize(&moved).unwrap());
            for (p, q) in a.values.iter().zip(&b.values) {
                prop_assert!((p - q).abs() <= 1e-9);
            }
        }
    }
}
