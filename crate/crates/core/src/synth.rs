//! Synthetic labeled scenes: simulated agents, noisy detections with misses,
//! and Poisson clutter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::classes::default_max_speed;
use crate::error::{BottError, Result};
use crate::geometry::{center_distance, wrap_angle};
use crate::types::{tracks_from_labels, Box3D, DetectionFrame, SceneDB};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub n_agents: usize,
    /// Speed range in m/s for moving agents.
    pub speed: (f64, f64),
    /// Nominal (w, l, h) in meters; instances vary by +-10%.
    pub size: (f64, f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: Vec<ClassSpec>,
    pub duration_s: f64,
    pub frequency_hz: f64,
    /// Probabilities of static, constant-velocity and constant-turn-rate motion.
    pub motion_mix: (f64, f64, f64),
    /// Turn rates are drawn from `U(-max, max)` rad/s.
    pub max_turn_rate: f64,
    pub center_sigma: f64,
    pub size_sigma: f64,
    pub yaw_sigma: f64,
    pub velocity_sigma: f64,
    pub miss_prob: f64,
    /// Expected false positives per frame.
    pub clutter_rate: f64,
    /// Fraction of clutter placed next to a visible agent of the same class.
    pub clutter_near_frac: f64,
    /// Distance range from the agent for near clutter, meters.
    pub clutter_near_range: (f64, f64),
    /// Fraction of agents whose lifetime starts late or ends early.
    pub partial_life_frac: f64,
    /// Half-width of the square arena agents start in, in meters.
    pub arena: f64,
    pub tp_score: (f64, f64),
    pub fp_score: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: vec![
                ClassSpec {
                    name: "car".into(),
                    n_agents: 6,
                    speed: (3.0, 15.0),
                    size: (1.9, 4.5, 1.6),
                },
                ClassSpec {
                    name: "pedestrian".into(),
                    n_agents: 4,
                    speed: (0.5, 2.0),
                    size: (0.7, 0.7, 1.75),
                },
                ClassSpec {
                    name: "bicycle".into(),
                    n_agents: 2,
                    speed: (2.0, 7.0),
                    size: (0.6, 1.8, 1.5),
                },
            ],
            duration_s: 4.0,
            frequency_hz: 10.0,
            motion_mix: (0.2, 0.5, 0.3),
            max_turn_rate: 0.4,
            center_sigma: 0.15,
            size_sigma: 0.05,
            yaw_sigma: 0.05,
            velocity_sigma: 0.3,
            miss_prob: 0.1,
            clutter_rate: 3.0,
            clutter_near_frac: 0.6,
            clutter_near_range: (0.3, 2.5),
            partial_life_frac: 0.3,
            arena: 25.0,
            tp_score: (0.5, 1.0),
            fp_score: (0.2, 0.6),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn n_frames(&self) -> usize {
        (self.duration_s * self.frequency_hz).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BottError::Config(format!("synth: {m}")));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.classes.is_empty() {
            return bad("at least one class is required");
        }
        if !(self.frequency_hz > 0.0) || self.n_frames() == 0 {
            return bad("duration and frequency must give at least one frame");
        }
        let (a, b, c) = self.motion_mix;
        if !(prob(a) && prob(b) && prob(c)) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return bad("motion_mix must be probabilities summing to 1");
        }
        if !(prob(self.miss_prob) && prob(self.clutter_near_frac) && prob(self.partial_life_frac)) {
            return bad("probabilities must lie in [0, 1]");
        }
        for s in [self.center_sigma, self.size_sigma, self.yaw_sigma, self.velocity_sigma] {
            if !(s >= 0.0) {
                return bad("noise sigmas must be non-negative");
            }
        }
        if !(self.clutter_rate >= 0.0 && self.arena > 0.0 && self.max_turn_rate >= 0.0) {
            return bad("clutter_rate, arena and max_turn_rate must be non-negative");
        }
        let (near_lo, near_hi) = self.clutter_near_range;
        if !(0.0 <= near_lo && near_lo <= near_hi && near_hi.is_finite()) {
            return bad("clutter_near_range must satisfy 0 <= lo <= hi");
        }
        for (lo, hi) in [self.tp_score, self.fp_score] {
            if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                return bad("score ranges must satisfy 0 < lo <= hi <= 1");
            }
        }
        for c in &self.classes {
            let (w, l, h) = c.size;
            if !(c.speed.0 >= 0.0 && c.speed.0 <= c.speed.1 && w > 0.0 && l > 0.0 && h > 0.0) {
                return bad(&format!("class {} has an invalid speed range or size", c.name));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Motion {
    Static,
    ConstantVelocity,
    ConstantTurn(f64),
}

struct Agent {
    class: usize,
    size: (f64, f64, f64),
    x0: f64,
    y0: f64,
    z: f64,
    yaw0: f64,
    speed: f64,
    motion: Motion,
    first: usize,
    last: usize,
}

impl Agent {
    /// `(x, y, yaw, vx, vy)` at time `t` since the scene start.
    fn state(&self, t: f64) -> (f64, f64, f64, f64, f64) {
        match self.motion {
            Motion::Static => (self.x0, self.y0, self.yaw0, 0.0, 0.0),
            Motion::ConstantVelocity => {
                let (s, c) = self.yaw0.sin_cos();
                let (vx, vy) = (self.speed * c, self.speed * s);
                (self.x0 + vx * t, self.y0 + vy * t, self.yaw0, vx, vy)
            }
            Motion::ConstantTurn(w) => {
                let yaw = self.yaw0 + w * t;
                let (x, y) = if w.abs() < 1e-9 {
                    (self.x0 + self.speed * t * self.yaw0.cos(), self.y0 + self.speed * t * self.yaw0.sin())
                } else {
                    let r = self.speed / w;
                    (
                        self.x0 + r * (yaw.sin() - self.yaw0.sin()),
                        self.y0 - r * (yaw.cos() - self.yaw0.cos()),
                    )
                };
                (x, y, wrap_angle(yaw), self.speed * yaw.cos(), self.speed * yaw.sin())
            }
        }
    }
}

fn one_hot(class: usize, n: usize, score: f64) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[class] = score;
    v
}

fn jitter(rng: &mut ChaCha8Rng, v: f64, frac: f64) -> f64 {
    v * (1.0 + rng.random_range(-frac..=frac))
}

/// Generates one scene. GT tracks are exact agent states; detections are
/// noisy copies labeled with the agent id, plus clutter labeled as FP.
pub fn gen_scene(cfg: &SynthConfig, scene_id: &str, rng: &mut ChaCha8Rng) -> Result<SceneDB> {
    cfg.validate()?;
    let n_classes = cfg.classes.len();
    let n_frames = cfg.n_frames();
    let dt = 1.0 / cfg.frequency_hz;
    let max_speed = default_max_speed();

    let mut agents = Vec::new();
    for (ci, spec) in cfg.classes.iter().enumerate() {
        for _ in 0..spec.n_agents {
            let u: f64 = rng.random();
            let (a, b, _) = cfg.motion_mix;
            let motion = if u < a {
                Motion::Static
            } else if u < a + b {
                Motion::ConstantVelocity
            } else {
                let w = if cfg.max_turn_rate > 0.0 {
                    rng.random_range(-cfg.max_turn_rate..=cfg.max_turn_rate)
                } else {
                    0.0
                };
                Motion::ConstantTurn(w)
            };
            let speed = match motion {
                Motion::Static => 0.0,
                _ if spec.speed.1 > spec.speed.0 => rng.random_range(spec.speed.0..=spec.speed.1),
                _ => spec.speed.0,
            };
            let (mut first, mut last) = (0, n_frames - 1);
            if n_frames > 2 && rng.random::<f64>() < cfg.partial_life_frac {
                if rng.random::<bool>() {
                    first = rng.random_range(0..n_frames / 2);
                } else {
                    last = rng.random_range(n_frames / 2..n_frames);
                }
            }
            agents.push(Agent {
                class: ci,
                size: (jitter(rng, spec.size.0, 0.1), jitter(rng, spec.size.1, 0.1), jitter(rng, spec.size.2, 0.1)),
                x0: rng.random_range(-cfg.arena..=cfg.arena),
                y0: rng.random_range(-cfg.arena..=cfg.arena),
                z: rng.random_range(-0.2..=0.2) + spec.size.2 / 2.0,
                yaw0: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                speed,
                motion,
                first,
                last,
            });
        }
    }

    let normal = |s: f64| Normal::new(0.0, s).expect("sigma validated");
    let (n_center, n_size, n_yaw, n_vel) = (
        normal(cfg.center_sigma),
        normal(cfg.size_sigma),
        normal(cfg.yaw_sigma),
        normal(cfg.velocity_sigma),
    );
    let clutter = (cfg.clutter_rate > 0.0).then(|| Poisson::new(cfg.clutter_rate).expect("rate validated"));

    let mut next_box = 0u64;
    let mut frames = Vec::with_capacity(n_frames);
    let mut gt_boxes = Vec::new();
    for k in 0..n_frames {
        let t = k as f64 * dt;
        let mut frame = DetectionFrame::new(k as i64, t);
        let mut visible = Vec::new();
        for (id, ag) in agents.iter().enumerate() {
            if k < ag.first || k > ag.last {
                continue;
            }
            let (x, y, yaw, vx, vy) = ag.state(t);
            let mut g = Box3D::new(ag.class, n_classes);
            g.box_id = next_box;
            next_box += 1;
            g.frame_idx = k as i64;
            g.t = t;
            (g.x, g.y, g.z) = (x, y, ag.z);
            (g.w, g.l, g.h) = ag.size;
            g.yaw = yaw;
            g.velocity = Some([vx, vy]);
            g.gt_track_id = Some(id as i64);
            visible.push(g.clone());
            gt_boxes.push(g.clone());

            if rng.random::<f64>() < cfg.miss_prob {
                continue;
            }
            let mut d = g;
            d.box_id = next_box;
            next_box += 1;
            d.x += n_center.sample(rng);
            d.y += n_center.sample(rng);
            d.z += n_center.sample(rng);
            d.w = (d.w + n_size.sample(rng)).max(0.1);
            d.l = (d.l + n_size.sample(rng)).max(0.1);
            d.h = (d.h + n_size.sample(rng)).max(0.1);
            d.yaw = wrap_angle(d.yaw + n_yaw.sample(rng));
            d.velocity = Some([vx + n_vel.sample(rng), vy + n_vel.sample(rng)]);
            d.det_score = rng.random_range(cfg.tp_score.0..=cfg.tp_score.1);
            d.class_scores = one_hot(ag.class, n_classes, d.det_score);
            frame.boxes.push(d);
        }

        let n_fp = clutter.as_ref().map_or(0, |p| p.sample(rng) as usize);
        for _ in 0..n_fp {
            let near = !visible.is_empty() && rng.random::<f64>() < cfg.clutter_near_frac;
            let (class, x, y, z) = if near {
                let a = &visible[rng.random_range(0..visible.len())];
                let r = rng.random_range(cfg.clutter_near_range.0..=cfg.clutter_near_range.1);
                let th: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                (a.class_id(), a.x + r * th.cos(), a.y + r * th.sin(), a.z)
            } else {
                let c = rng.random_range(0..n_classes);
                (
                    c,
                    rng.random_range(-cfg.arena..=cfg.arena),
                    rng.random_range(-cfg.arena..=cfg.arena),
                    cfg.classes[c].size.2 / 2.0,
                )
            };
            let spec = &cfg.classes[class];
            let mut d = Box3D::new(class, n_classes);
            d.box_id = next_box;
            next_box += 1;
            d.frame_idx = k as i64;
            d.t = t;
            (d.x, d.y, d.z) = (x, y, z);
            d.w = jitter(rng, spec.size.0, 0.2);
            d.l = jitter(rng, spec.size.1, 0.2);
            d.h = jitter(rng, spec.size.2, 0.2);
            d.yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            d.velocity = Some([n_vel.sample(rng) * 3.0, n_vel.sample(rng) * 3.0]);
            d.det_score = rng.random_range(cfg.fp_score.0..=cfg.fp_score.1);
            d.class_scores = one_hot(class, n_classes, d.det_score);
            frame.boxes.push(d);
        }
        frames.push(frame);
    }

    let gt_tracks = tracks_from_labels(&gt_boxes);
    let class_names = cfg.class_names();
    let limits = max_speed.resolve(&class_names).unwrap_or_else(|_| vec![f64::INFINITY; n_classes]);
    for tr in &gt_tracks {
        for w in tr.boxes.windows(2) {
            let v = center_distance(&w[0], &w[1]) / (w[1].t - w[0].t);
            if v > limits[tr.class_id] {
                return Err(BottError::domain(format!(
                    "synthetic agent {} moves at {v:.2} m/s, above its class limit",
                    tr.id
                )));
            }
        }
    }
    let scene = SceneDB {
        scene_id: scene_id.to_string(),
        frequency_hz: cfg.frequency_hz,
        class_names,
        frames,
        gt_tracks,
    };
    scene.validate()?;
    Ok(scene)
}

/// `count` scenes named `<prefix>_<i>`, each from its own stream derived
/// from `cfg.seed` and the scene index.
pub fn gen_scenes(cfg: &SynthConfig, prefix: &str, count: usize) -> Result<Vec<SceneDB>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            gen_scene(cfg, &format!("{prefix}_{i:04}"), &mut rng)
        })
        .collect()
}
