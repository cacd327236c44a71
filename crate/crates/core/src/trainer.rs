//! Window batching with zero padding, Adam with a one-cycle schedule, and
//! the training loop with per-epoch checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::{read_tensors, save_model, write_tensors, ModelMeta};
use crate::error::{BottError, Result};
use crate::featurizer::{augment, featurize, AugmentConfig, RawFeatureMatrix};
use crate::io::{read_json, write_json};
use crate::loss::{hard_negative_mine, link_targets, masked_bce_sum, LinkTargets, LossConfig};
use crate::network::{
    degenerate_rows, encode_boxes, feature_tensor, link_scores_on_rows, link_scores_on_tape, record_params, Network, Params,
};
use crate::trackdb::{window_at, window_starts};
use crate::types::SceneDB;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the one-cycle schedule.
    pub lr_max: f64,
    pub warmup_frac: f64,
    pub start_div: f64,
    pub final_div: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm cap.
    pub grad_clip: f64,
    pub k: usize,
    pub stride: usize,
    /// Stops after this many optimizer steps; the schedule spans them.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub loss: LossConfig,
    /// `None` trains on windows as recorded.
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 4,
            lr_max: 1e-3,
            warmup_frac: 0.3,
            start_div: 25.0,
            final_div: 1e4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            k: 16,
            stride: 1,
            max_steps: None,
            seed: 0,
            loss: LossConfig::default(),
            augment: Some(AugmentConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BottError::Config(format!("train: {m}")));
        if self.batch_size == 0 || self.k == 0 || self.stride == 0 {
            return bad("batch_size, k and stride must be positive");
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return bad("warmup_frac must lie in (0, 1)");
        }
        if !(self.lr_max > 0.0 && self.start_div >= 1.0 && self.final_div >= 1.0) {
            return bad("lr_max must be positive and divisors at least 1");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        self.loss.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// Cosine warm-up from `lr_max / start_div` to `lr_max` over the first
/// `floor(warmup_frac * total)` steps, then cosine decay reaching
/// `lr_max / final_div` at `total - 1`.
pub fn one_cycle_lr(step: usize, total: usize, cfg: &TrainConfig) -> Result<f64> {
    if step >= total {
        return Err(BottError::domain(format!("step {step} outside schedule of {total}")));
    }
    let lo = cfg.lr_max / cfg.start_div;
    let end = cfg.lr_max / cfg.final_div;
    let peak = ((cfg.warmup_frac * total as f64).floor() as usize).min(total - 1);
    let cos_interp = |from: f64, to: f64, p: f64| to + (from - to) * (1.0 + (std::f64::consts::PI * p).cos()) / 2.0;
    if step < peak {
        Ok(cos_interp(lo, cfg.lr_max, step as f64 / peak as f64))
    } else if total - 1 == peak {
        Ok(cfg.lr_max)
    } else {
        Ok(cos_interp(cfg.lr_max, end, (step - peak) as f64 / (total - 1 - peak) as f64))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &Params<f32>) -> Self {
        AdamState {
            m: params.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
            v: params.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
            t: 0,
        }
    }
}

/// Bias-corrected Adam. Non-finite gradients reject the update and leave
/// both parameters and state untouched.
pub fn adam_step(
    params: &mut Params<f32>,
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || grads.iter().zip(&params.tensors).any(|(g, p)| g.shape != p.shape) {
        return Err(BottError::Shape {
            op: "adam_step",
            detail: "gradients do not mirror parameters".into(),
        });
    }
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(BottError::NonFinite("gradient"));
    }
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..grads.len() {
        let (p, g, m, v) = (&mut params.tensors[i], &grads[i], &mut state.m[i], &mut state.v[i]);
        for j in 0..g.len() {
            let gj = g.data[j] as f64;
            let mj = b1 * m.data[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v.data[j] as f64 + (1.0 - b2) * gj * gj;
            m.data[j] = mj as f32;
            v.data[j] = vj as f32;
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + cfg.adam_eps);
            p.data[j] = (p.data[j] as f64 - update) as f32;
        }
    }
    Ok(())
}

/// A window reference: `(scene index, first frame)`.
pub type WindowRef = (usize, usize);

/// All training windows; scenes shorter than `k` are skipped with a warning.
pub fn enumerate_windows(scenes: &[SceneDB], k: usize, stride: usize) -> (Vec<WindowRef>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for (si, s) in scenes.iter().enumerate() {
        let starts = window_starts(s.frames.len(), k, stride);
        if starts.is_empty() {
            warn!("scene {} has {} frames, fewer than k = {k}; skipped", s.scene_id, s.frames.len());
            skipped += 1;
        }
        out.extend(starts.into_iter().map(|st| (si, st)));
    }
    (out, skipped)
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Window order for one epoch, split into batches.
pub fn make_batches(windows: &[WindowRef], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<WindowRef>> {
    let mut order = windows.to_vec();
    order.shuffle(&mut rng_for(seed, epoch as u64));
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// A window ready for the network: features, targets and mask.
#[derive(Debug, Clone)]
pub struct PreparedWindow {
    pub features: RawFeatureMatrix,
    pub targets: LinkTargets,
}

/// Windows of one batch; every window is zero-padded to `n_pad` rows.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    pub windows: Vec<PreparedWindow>,
    pub n_pad: usize,
}

impl PaddedBatch {
    pub fn new(windows: Vec<PreparedWindow>) -> Self {
        let n_pad = windows.iter().map(|w| w.features.n).max().unwrap_or(0);
        PaddedBatch { windows, n_pad }
    }

    /// Padded slots per window.
    pub fn pad_counts(&self) -> Vec<usize> {
        self.windows.iter().map(|w| self.n_pad - w.features.n).collect()
    }
}

/// Loss and mining statistics of one forward over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub n_pos: usize,
    pub n_neg_active: usize,
    pub active_entries: usize,
    pub skipped_windows: usize,
    /// Real boxes left out of the loss because their embedding had no direction.
    pub degenerate_rows: usize,
}

struct WindowPass {
    tape: Tape<f32>,
    ls: Var,
    vars: Vec<Var>,
    loss_sum: f64,
    count: usize,
    grad: Vec<f64>,
    n_pos: usize,
    n_neg: usize,
    degenerate: usize,
}

fn window_pass(net: &Network, w: &PreparedWindow, n_pad: usize, cfg: &LossConfig) -> Result<Option<WindowPass>> {
    if w.features.n == 0 {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let p = record_params(&mut tape, &net.params, true);
    let (x, mask) = feature_tensor(&w.features, n_pad)?;
    let enc = encode_boxes(&mut tape, &net.cfg, &p, x, &mask)?;
    let n = w.features.n;
    let dead = degenerate_rows(&tape, enc.embeddings, n);
    // Directionless embeddings carry no gradient through the normalization,
    // so their pairs leave the loss.
    let (ls, live_targets) = if dead.is_empty() {
        (link_scores_on_tape(&mut tape, enc.embeddings, n)?, None)
    } else {
        let live: Vec<usize> = (0..n).filter(|i| dead.binary_search(i).is_err()).collect();
        if live.is_empty() {
            return Ok(None);
        }
        let sub = restrict_targets(&w.targets, &live);
        (link_scores_on_rows(&mut tape, enc.embeddings, &live)?, Some(sub))
    };
    let targets = live_targets.as_ref().unwrap_or(&w.targets);
    let values = tape.value(ls).to_f64_vec();
    let mined = hard_negative_mine(&values, targets, cfg.kappa);
    let (loss_sum, count, grad) = masked_bce_sum(&values, &targets.y, &mined.mask, cfg.beta, cfg.clamp_eps);
    if count == 0 {
        return Ok(None);
    }
    Ok(Some(WindowPass {
        vars: p.vars().to_vec(),
        tape,
        ls,
        loss_sum,
        count,
        grad,
        n_pos: mined.n_pos,
        n_neg: mined.n_neg,
        degenerate: dead.len(),
    }))
}

fn restrict_targets(t: &LinkTargets, rows: &[usize]) -> LinkTargets {
    let m = rows.len();
    let mut y = Vec::with_capacity(m * m);
    let mut mask = Vec::with_capacity(m * m);
    for &i in rows {
        for &j in rows {
            y.push(t.y[i * t.n + j]);
            mask.push(t.mask[i * t.n + j]);
        }
    }
    LinkTargets { n: m, y, mask }
}

/// Forward over a batch; with `want_grads` also the batch-normalized
/// parameter gradients. `None` stats mean no window had an active entry.
pub fn batch_forward(
    net: &Network,
    batch: &PaddedBatch,
    cfg: &LossConfig,
    want_grads: bool,
) -> Result<Option<(BatchStats, Option<Vec<Tensor<f32>>>)>> {
    let passes: Vec<Option<WindowPass>> = batch
        .windows
        .par_iter()
        .map(|w| window_pass(net, w, batch.n_pad, cfg))
        .collect::<Result<_>>()?;
    let skipped = passes.iter().filter(|p| p.is_none()).count();
    let passes: Vec<WindowPass> = passes.into_iter().flatten().collect();
    let total: usize = passes.iter().map(|p| p.count).sum();
    if total == 0 {
        return Ok(None);
    }
    let stats = BatchStats {
        loss: passes.iter().map(|p| p.loss_sum).sum::<f64>() / total as f64,
        n_pos: passes.iter().map(|p| p.n_pos).sum(),
        n_neg_active: passes.iter().map(|p| p.n_neg).sum(),
        active_entries: total,
        skipped_windows: skipped,
        degenerate_rows: passes.iter().map(|p| p.degenerate).sum(),
    };
    if !want_grads {
        return Ok(Some((stats, None)));
    }
    let inv = 1.0 / total as f64;
    let per_window: Vec<Vec<Tensor<f32>>> = passes
        .into_par_iter()
        .map(|mut p| {
            let shape = p.tape.value(p.ls).shape.clone();
            let seed = Tensor::from_vec(&shape, p.grad.iter().map(|g| (g * inv) as f32).collect())?;
            let mut g = p.tape.backward_seeded(&[(p.ls, seed)])?;
            Ok(p.vars
                .iter()
                .zip(&net.params.tensors)
                .map(|(v, t)| g.take(*v).unwrap_or_else(|| Tensor::zeros(&t.shape)))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut sum: Vec<Tensor<f32>> = net.params.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect();
    for grads in &per_window {
        for (acc, g) in sum.iter_mut().zip(grads) {
            acc.add_assign(g);
        }
    }
    Ok(Some((stats, Some(sum))))
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One optimizer step's log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub n_pos: usize,
    pub n_neg_active: usize,
    pub pos_frac: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs_completed: usize,
    pub windows: usize,
    pub skipped_scenes: usize,
    pub skipped_windows: usize,
    pub skipped_batches: usize,
    pub rejected_batches: usize,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResumeState {
    epochs_completed: usize,
    step: usize,
    adam_t: u64,
    summary: TrainSummary,
}

pub const MODEL_FILE: &str = "model.bott";
const ADAM_FILE: &str = "adam.bott";
const STATE_FILE: &str = "train_state.json";
pub const LOG_FILE: &str = "train_log.jsonl";

/// Training state over a fixed set of scenes.
pub struct Trainer<'a> {
    pub net: Network,
    pub adam: AdamState,
    pub cfg: TrainConfig,
    pub meta: ModelMeta,
    pub summary: TrainSummary,
    pub records: Vec<StepRecord>,
    scenes: &'a [SceneDB],
    max_speed: Vec<f64>,
    windows: Vec<WindowRef>,
    step: usize,
    out_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(scenes: &'a [SceneDB], net: Network, cfg: TrainConfig, out_dir: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        let class_names = scenes
            .first()
            .map(|s| s.class_names.clone())
            .ok_or_else(|| BottError::domain("no training scenes"))?;
        if scenes.iter().any(|s| s.class_names != class_names) {
            return Err(BottError::domain("training scenes disagree on class names"));
        }
        let max_speed = cfg.loss.class_max_speed.resolve(&class_names)?;
        let (windows, skipped_scenes) = enumerate_windows(scenes, cfg.k, cfg.stride);
        if windows.is_empty() {
            return Err(BottError::domain(format!("no scene has at least k = {} frames", cfg.k)));
        }
        let meta = ModelMeta {
            network: net.cfg.clone(),
            class_names,
            train_k: cfg.k,
            train_hz: scenes[0].frequency_hz,
        };
        if let Some(d) = out_dir {
            std::fs::create_dir_all(d).map_err(|e| BottError::io(d, e))?;
        }
        Ok(Trainer {
            adam: AdamState::new(&net.params),
            net,
            summary: TrainSummary {
                windows: windows.len(),
                skipped_scenes,
                ..Default::default()
            },
            meta,
            records: Vec::new(),
            scenes,
            max_speed,
            windows,
            cfg,
            step: 0,
            out_dir: out_dir.map(Path::to_path_buf),
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.windows.len().div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        let full = self.cfg.epochs * self.steps_per_epoch();
        self.cfg.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn batches(&self, epoch: usize) -> Vec<Vec<WindowRef>> {
        make_batches(&self.windows, self.cfg.batch_size, self.cfg.seed, epoch)
    }

    /// Augments (per window, from a stream keyed by epoch and position),
    /// featurizes and labels a batch.
    pub fn prepare_batch(&self, refs: &[WindowRef], epoch: usize, batch_idx: usize) -> Result<PaddedBatch> {
        let windows = refs
            .par_iter()
            .enumerate()
            .map(|(i, (si, start))| {
                let mut w = window_at(&self.scenes[*si], *start, self.cfg.k)?;
                if let Some(a) = &self.cfg.augment {
                    let pos = (batch_idx * self.cfg.batch_size + i) as u64;
                    let mut rng = rng_for(self.cfg.seed, (1 << 63) | ((epoch as u64) << 32) | pos);
                    w = augment(&w, a, &mut rng);
                }
                if w.num_boxes() == 0 {
                    return Ok(PreparedWindow {
                        features: RawFeatureMatrix {
                            values: vec![],
                            n: 0,
                            dim: self.net.cfg.input_dim,
                            frame_of: vec![],
                            class_of: vec![],
                            box_ref: vec![],
                        },
                        targets: LinkTargets {
                            n: 0,
                            y: vec![],
                            mask: vec![],
                        },
                    });
                }
                Ok(PreparedWindow {
                    features: featurize(&w)?,
                    targets: link_targets(&w, &self.max_speed)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PaddedBatch::new(windows))
    }

    /// Runs one optimizer step on a prepared batch. Returns `None` when the
    /// batch had no active loss entries or its gradient was rejected.
    pub fn train_batch(&mut self, batch: &PaddedBatch, epoch: usize) -> Result<Option<StepRecord>> {
        let total = self.total_steps();
        let lr = one_cycle_lr(self.step.min(total - 1), total, &self.cfg)?;
        let outcome = batch_forward(&self.net, batch, &self.cfg.loss, true)?;
        self.step += 1;
        let Some((stats, Some(mut grads))) = outcome else {
            self.summary.skipped_batches += 1;
            self.summary.skipped_windows += batch.windows.len();
            return Ok(None);
        };
        self.summary.skipped_windows += stats.skipped_windows;
        clip_global_norm(&mut grads, self.cfg.grad_clip);
        match adam_step(&mut self.net.params, &grads, &mut self.adam, lr, &self.cfg) {
            Ok(()) => {}
            Err(BottError::NonFinite(_)) => {
                warn!("non-finite gradient at step {}; batch rejected", self.step - 1);
                self.summary.rejected_batches += 1;
                return Ok(None);
            }
            Err(e) => return Err(e),
        }
        let rec = StepRecord {
            step: self.step - 1,
            epoch,
            lr,
            loss: stats.loss,
            n_pos: stats.n_pos,
            n_neg_active: stats.n_neg_active,
            pos_frac: stats.n_pos as f64 / (stats.n_pos + stats.n_neg_active).max(1) as f64,
        };
        self.summary.final_loss = Some(stats.loss);
        Ok(Some(rec))
    }

    fn log(&self, rec: &StepRecord) -> Result<()> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        let path = dir.join(LOG_FILE);
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| BottError::io(&path, e))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer(&mut w, rec)?;
        writeln!(w).map_err(|e| BottError::io(&path, e))
    }

    /// Runs remaining epochs (or until `max_steps`), checkpointing after each
    /// completed epoch.
    pub fn run(&mut self) -> Result<TrainSummary> {
        self.run_until(self.cfg.epochs)
    }

    /// Like [`Trainer::run`] but stops once `epochs` epochs are complete.
    /// The schedule still spans the configured run, so a later `resume`
    /// continues exactly where this left off.
    pub fn run_until(&mut self, epochs: usize) -> Result<TrainSummary> {
        let total = self.total_steps();
        if self.summary.epochs_completed == 0 && self.step == 0 {
            if let Some(dir) = &self.out_dir {
                let path = dir.join(LOG_FILE);
                File::create(&path).map_err(|e| BottError::io(&path, e))?;
            }
        }
        'epochs: for epoch in self.summary.epochs_completed..epochs.min(self.cfg.epochs) {
            for (bi, refs) in self.batches(epoch).iter().enumerate() {
                if self.step >= total {
                    break 'epochs;
                }
                let batch = self.prepare_batch(refs, epoch, bi)?;
                if let Some(rec) = self.train_batch(&batch, epoch)? {
                    self.log(&rec)?;
                    self.records.push(rec);
                }
            }
            self.summary.epochs_completed = epoch + 1;
            self.summary.steps = self.step;
            info!(
                "epoch {} done: step {}, loss {:?}",
                epoch + 1,
                self.step,
                self.summary.final_loss
            );
            self.save_checkpoint()?;
        }
        self.summary.steps = self.step;
        if let Some(dir) = &self.out_dir {
            save_model(&dir.join(MODEL_FILE), &self.net, &self.meta)?;
        }
        Ok(self.summary.clone())
    }

    fn save_checkpoint(&self) -> Result<()> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        save_model(&dir.join(MODEL_FILE), &self.net, &self.meta)?;
        let names: Vec<String> = self
            .net
            .params
            .names
            .iter()
            .map(|n| format!("m.{n}"))
            .chain(self.net.params.names.iter().map(|n| format!("v.{n}")))
            .collect();
        let tensors: Vec<Tensor<f32>> = self.adam.m.iter().chain(&self.adam.v).cloned().collect();
        write_tensors(&dir.join(ADAM_FILE), &names, &tensors)?;
        write_json(
            &ResumeState {
                epochs_completed: self.summary.epochs_completed,
                step: self.step,
                adam_t: self.adam.t,
                summary: self.summary.clone(),
            },
            &dir.join(STATE_FILE),
        )
    }

    /// Restores parameters, optimizer moments and progress from the
    /// checkpoint written at the end of an epoch.
    pub fn resume(&mut self, dir: &Path) -> Result<()> {
        let (net, meta) = crate::checkpoint::load_model(&dir.join(MODEL_FILE))?;
        if meta.network != self.net.cfg || meta.class_names != self.meta.class_names {
            return Err(BottError::Checkpoint("checkpoint does not match the training setup".into()));
        }
        let state: ResumeState = read_json(&dir.join(STATE_FILE))?;
        let (_, tensors) = read_tensors(&dir.join(ADAM_FILE))?;
        let n = net.params.len();
        if tensors.len() != 2 * n {
            return Err(BottError::Checkpoint("optimizer state has the wrong tensor count".into()));
        }
        let (m, v) = tensors.split_at(n);
        self.net = net;
        self.adam = AdamState {
            m: m.to_vec(),
            v: v.to_vec(),
            t: state.adam_t,
        };
        self.step = state.step;
        self.summary = state.summary;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg();
        let total = 1000;
        assert!((one_cycle_lr(0, total, &c).unwrap() - 4e-5).abs() < 1e-15);
        assert!((one_cycle_lr(300, total, &c).unwrap() - 1e-3).abs() < 1e-15);
        assert!((one_cycle_lr(999, total, &c).unwrap() - 1e-7).abs() < 1e-9);
        assert!(one_cycle_lr(1000, total, &c).is_err());
        let mut prev = one_cycle_lr(0, total, &c).unwrap();
        for s in 1..total {
            let lr = one_cycle_lr(s, total, &c).unwrap();
            assert!((lr - prev).abs() <= 1e-3 / 100.0);
            prev = lr;
        }
        assert_eq!(one_cycle_lr(0, 1, &c).unwrap(), 1e-3);
    }

    fn scalar_params(v: f32) -> Params<f32> {
        Params::new(vec!["w".into()], vec![Tensor::from_vec(&[1], vec![v]).unwrap()]).unwrap()
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = scalar_params(0.7);
        let mut st = AdamState::new(&p);
        let g = vec![Tensor::zeros(&[1])];
        for _ in 0..10 {
            adam_step(&mut p, &g, &mut st, 1e-2, &cfg()).unwrap();
        }
        assert_eq!(p.tensors[0].data[0], 0.7);
    }

    #[test]
    fn adam_constant_gradient_steps_by_lr() {
        let mut p = scalar_params(0.0);
        let mut st = AdamState::new(&p);
        let g = vec![Tensor::from_vec(&[1], vec![3.0f32]).unwrap()];
        let mut prev = 0.0f64;
        for _ in 0..200 {
            adam_step(&mut p, &g, &mut st, 1e-3, &cfg()).unwrap();
            let now = p.tensors[0].data[0] as f64;
            let step = prev - now;
            assert!((step - 1e-3).abs() < 1e-5, "{step}");
            prev = now;
        }
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = scalar_params(1.0);
        let mut st = AdamState::new(&p);
        let before = (p.clone(), st.clone());
        let g = vec![Tensor::from_vec(&[1], vec![f32::NAN]).unwrap()];
        assert!(matches!(adam_step(&mut p, &g, &mut st, 1e-3, &cfg()), Err(BottError::NonFinite(_))));
        assert_eq!((p, st), before);
    }

    #[test]
    fn batches_deterministic_and_complete() {
        let w: Vec<WindowRef> = (0..10).map(|i| (0, i)).collect();
        let a = make_batches(&w, 4, 7, 0);
        assert_eq!(a, make_batches(&w, 4, 7, 0));
        assert_ne!(a, make_batches(&w, 4, 7, 1));
        assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<WindowRef> = a.concat();
        all.sort();
        assert_eq!(all, w);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::from_vec(&[2], vec![30.0f32, 40.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 5.0), 50.0);
        assert!((g[0].data[0] - 3.0).abs() < 1e-6 && (g[0].data[1] - 4.0).abs() < 1e-6);
    }
}
