//! Forward-pass timing by window box count.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BottError, Result};
use crate::network::Network;
use crate::types::{Box3D, DetectionFrame, SlidingWindow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub boxes: Vec<usize>,
    pub k: usize,
    /// Timed forwards per box count, after one warm-up call.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            boxes: vec![100, 200, 400, 800],
            k: 16,
            repeats: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub boxes: usize,
    pub frames: usize,
    pub median_ms: f64,
    pub min_ms: f64,
}

/// A window of `n` random boxes spread evenly over `k` frames at 10 Hz.
pub fn random_window(n: usize, k: usize, n_classes: usize, seed: u64) -> Result<SlidingWindow> {
    if k == 0 || n_classes == 0 {
        return Err(BottError::domain("bench window needs frames and classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames: Vec<DetectionFrame> = (0..k).map(|f| DetectionFrame::new(f as i64, f as f64 * 0.1)).collect();
    for i in 0..n {
        let f = i % k;
        let mut b = Box3D::new(rng.random_range(0..n_classes), n_classes);
        b.box_id = i as u64;
        b.frame_idx = f as i64;
        b.t = frames[f].t;
        b.x = rng.random_range(-50.0..50.0);
        b.y = rng.random_range(-50.0..50.0);
        b.yaw = rng.random_range(-3.0..3.0);
        frames[f].boxes.push(b);
    }
    SlidingWindow::new(frames)
}

/// Times `net.forward` on random windows of each requested size.
pub fn run_bench(net: &Network, n_classes: usize, cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.repeats == 0 {
        return Err(BottError::Config("bench.repeats must be positive".into()));
    }
    let mut out = Vec::new();
    for &n in &cfg.boxes {
        let w = random_window(n, cfg.k, n_classes, cfg.seed)?;
        net.forward(&w)?;
        let mut ms: Vec<f64> = (0..cfg.repeats)
            .map(|_| {
                let t0 = Instant::now();
                net.forward(&w).map(|_| t0.elapsed().as_secs_f64() * 1e3)
            })
            .collect::<Result<_>>()?;
        ms.sort_by(f64::total_cmp);
        out.push(BenchRow {
            boxes: n,
            frames: cfg.k,
            median_ms: ms[ms.len() / 2],
            min_ms: ms[0],
        });
    }
    Ok(out)
}

/// Plain-text table, one row per box count.
pub fn format_table(rows: &[BenchRow]) -> String {
    let mut s = format!("{:>8} {:>7} {:>12} {:>10}\n", "boxes", "frames", "median_ms", "min_ms");
    for r in rows {
        s.push_str(&format!("{:>8} {:>7} {:>12.3} {:>10.3}\n", r.boxes, r.frames, r.median_ms, r.min_ms));
    }
    s
}
