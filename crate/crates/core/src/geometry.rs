//! Ground-plane box geometry: rotated-rectangle IoU and planar distances.

use std::cmp::Ordering;
use std::f64::consts::{PI, TAU};

use crate::error::{BottError, Result};
use crate::types::Box3D;

type Pt = [f64; 2];

/// Maps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % TAU;
    if r > PI {
        r -= TAU;
    } else if r <= -PI {
        r += TAU;
    }
    r
}

/// Interpolates between two headings along the shorter arc.
pub fn lerp_angle(a: f64, b: f64, s: f64) -> f64 {
    let d = wrap_angle(b - a);
    wrap_angle(a + s * d)
}

/// Euclidean distance between box centers in the xy plane.
pub fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Corners of the box footprint in counter-clockwise order.
pub fn footprint(b: &Box3D) -> [Pt; 4] {
    footprint_about(b, [0.0, 0.0])
}

/// Footprint corners relative to `origin`.
fn footprint_about(b: &Box3D, origin: Pt) -> [Pt; 4] {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.l / 2.0, b.w / 2.0);
    let (cx, cy) = (b.x - origin[0], b.y - origin[1]);
    let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    local.map(|[u, v]| [cx + u * c - v * s, cy + u * s + v * c])
}

/// Shoelace area, positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[Pt]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let o = poly[0];
    let mut acc = 0.0;
    for i in 1..n - 1 {
        acc += cross(o, poly[i], poly[i + 1]);
    }
    acc / 2.0
}

fn cross(o: Pt, a: Pt, b: Pt) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segment_hit(p: Pt, q: Pt, a: Pt, b: Pt) -> Pt {
    // Intersection of segment p->q with the infinite line a->b.
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let s = dp / (dp - dq);
    [p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])]
}

/// Sutherland-Hodgman clipping of `subject` against the convex CCW polygon
/// `clip`.
pub fn clip_convex(subject: &[Pt], clip: &[Pt]) -> Vec<Pt> {
    let mut out: Vec<Pt> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    out.push(segment_hit(prev, cur, a, b));
                }
                out.push(cur);
            } else if prev_in {
                out.push(segment_hit(prev, cur, a, b));
            }
        }
    }
    out
}

fn footprint_key(b: &Box3D) -> [f64; 5] {
    [b.x, b.y, b.w, b.l, b.yaw]
}

fn cmp_keys(a: &[f64; 5], b: &[f64; 5]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Intersection-over-union of the two yaw-rotated footprints.
///
/// The pair is put in a canonical order before clipping so the result is
/// bitwise symmetric.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> Result<f64> {
    for bx in [a, b] {
        if !(bx.w * bx.l > 0.0) {
            return Err(BottError::domain(format!(
                "degenerate footprint on box {} (w={}, l={})",
                bx.box_id, bx.w, bx.l
            )));
        }
    }
    let (ka, kb) = (footprint_key(a), footprint_key(b));
    let (p, q) = match cmp_keys(&ka, &kb) {
        Ordering::Equal => return Ok(1.0),
        Ordering::Less => (a, b),
        Ordering::Greater => (b, a),
    };
    // Cheap reject on circumscribed circles.
    let reach = (p.w.hypot(p.l) + q.w.hypot(q.l)) / 2.0;
    if center_distance(p, q) >= reach {
        return Ok(0.0);
    }
    let origin = [p.x, p.y];
    let inter = polygon_area(&clip_convex(&footprint_about(p, origin), &footprint_about(q, origin)))
        .max(0.0);
    let union = p.w * p.l + q.w * q.l - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}
