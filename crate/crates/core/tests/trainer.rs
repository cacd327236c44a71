use std::path::Path;

use bott::featurizer::{input_dim, RawFeatureMatrix};
use bott::loss::LinkTargets;
use bott::network::{init_params, Network, NetworkConfig};
use bott::synth::{gen_scenes, SynthConfig};
use bott::trainer::{batch_forward, one_cycle_lr, PaddedBatch, PreparedWindow, TrainConfig, Trainer, MODEL_FILE};
use bott::types::SceneDB;

fn small_net(seed: u64) -> Network {
    let cfg = NetworkConfig {
        input_dim: input_dim(3),
        mlp_dims: vec![16, 16],
        n_enc: 1,
        n_heads: 2,
        ffn_dims: vec![32, 16],
    };
    Network::new(cfg.clone(), init_params(&cfg, seed).unwrap()).unwrap()
}

fn scenes(n: usize, seed: u64) -> Vec<SceneDB> {
    let cfg = SynthConfig {
        seed,
        duration_s: 2.5,
        ..Default::default()
    };
    gen_scenes(&cfg, "tr", n).unwrap()
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        k: 8,
        stride: 2,
        seed: 11,
        ..Default::default()
    }
}

fn params_of(dir: &Path) -> Vec<Vec<f32>> {
    let (net, _) = bott::checkpoint::load_model(&dir.join(MODEL_FILE)).unwrap();
    net.params.tensors.iter().map(|t| t.data.clone()).collect()
}

#[test]
fn identical_runs_write_identical_checkpoints() {
    let data = scenes(2, 5);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let mut tr = Trainer::new(&data, small_net(1), train_cfg(2), Some(d.path())).unwrap();
        tr.run().unwrap();
    }
    let a = std::fs::read(dirs[0].path().join(MODEL_FILE)).unwrap();
    let b = std::fs::read(dirs[1].path().join(MODEL_FILE)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = scenes(2, 6);
    let full = tempfile::tempdir().unwrap();
    let mut tr = Trainer::new(&data, small_net(2), train_cfg(3), Some(full.path())).unwrap();
    let s_full = tr.run().unwrap();

    let part = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(&data, small_net(2), train_cfg(3), Some(part.path())).unwrap();
    let s_first = first.run_until(1).unwrap();
    assert_eq!(s_first.epochs_completed, 1);
    assert!(s_first.steps < s_full.steps);
    drop(first);

    let mut second = Trainer::new(&data, small_net(2), train_cfg(3), Some(part.path())).unwrap();
    second.resume(part.path()).unwrap();
    assert_eq!(second.step(), s_first.steps);
    let s_resumed = second.run().unwrap();
    assert_eq!(s_resumed, s_full);
    assert_eq!(params_of(part.path()), params_of(full.path()));
}

#[test]
fn resume_rejects_other_architecture() {
    let data = scenes(1, 7);
    let dir = tempfile::tempdir().unwrap();
    Trainer::new(&data, small_net(3), train_cfg(1), Some(dir.path()))
        .unwrap()
        .run()
        .unwrap();
    let cfg = NetworkConfig::desk(input_dim(3));
    let other = Network::new(cfg.clone(), init_params(&cfg, 3).unwrap()).unwrap();
    let mut tr = Trainer::new(&data, other, train_cfg(1), None).unwrap();
    assert!(tr.resume(dir.path()).is_err());
}

#[test]
fn single_scene_descends() {
    let data = scenes(1, 8);
    let cfg = TrainConfig {
        epochs: 1000,
        max_steps: Some(200),
        ..train_cfg(1)
    };
    let lcfg = cfg.loss.clone();
    let mut tr = Trainer::new(&data, small_net(4), cfg, None).unwrap();
    let batch = tr.prepare_batch(&tr.batches(0)[0], 0, 0).unwrap();
    let before = batch_forward(&tr.net, &batch, &lcfg, false).unwrap().unwrap().0.loss;
    let summary = tr.run().unwrap();
    assert_eq!(summary.steps, 200);
    let after = batch_forward(&tr.net, &batch, &lcfg, false).unwrap().unwrap().0.loss;
    assert!(after < before, "{before} -> {after}");
    assert!(tr.records.iter().all(|r| r.n_neg_active <= 4 * r.n_pos));
}

#[test]
fn padded_slots_do_not_change_a_step() {
    let data = scenes(1, 9);
    let mut a = Trainer::new(&data, small_net(5), train_cfg(1), None).unwrap();
    let mut b = Trainer::new(&data, small_net(5), train_cfg(1), None).unwrap();
    let win = a.prepare_batch(&a.batches(0)[0][..1], 0, 0).unwrap().windows.remove(0);
    let n = win.features.n;
    let empty = PreparedWindow {
        features: RawFeatureMatrix {
            values: vec![],
            n: 0,
            dim: win.features.dim,
            frame_of: vec![],
            class_of: vec![],
            box_ref: vec![],
        },
        targets: LinkTargets {
            n: 0,
            y: vec![],
            mask: vec![],
        },
    };
    let plain = PaddedBatch::new(vec![win.clone()]);
    let padded = PaddedBatch {
        windows: vec![win, empty],
        n_pad: n + 6,
    };
    assert_eq!(padded.pad_counts(), vec![6, n + 6]);
    a.train_batch(&plain, 0).unwrap().unwrap();
    b.train_batch(&padded, 0).unwrap().unwrap();
    for (x, y) in a.net.params.tensors.iter().zip(&b.net.params.tensors) {
        for (p, q) in x.data.iter().zip(&y.data) {
            assert!((p - q).abs() <= 1e-5, "{p} vs {q}");
        }
    }
}

#[test]
fn schedule_has_no_jumps() {
    let cfg = TrainConfig::default();
    for total in [10, 1000, 5000] {
        let lrs: Vec<f64> = (0..total).map(|s| one_cycle_lr(s, total, &cfg).unwrap()).collect();
        let worst = lrs.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
        // Short schedules take coarse steps; long ones must be smooth.
        if total >= 1000 {
            assert!(worst <= cfg.lr_max / 100.0, "total {total}: jump {worst}");
        }
        assert!(lrs.iter().all(|l| *l > 0.0 && *l <= cfg.lr_max + 1e-15));
    }
    assert!(one_cycle_lr(10, 10, &cfg).is_err());
}

#[test]
fn short_scenes_are_skipped() {
    let mut data = scenes(2, 10);
    data[0].frames.truncate(5);
    let tr = Trainer::new(&data, small_net(6), train_cfg(1), None).unwrap();
    assert_eq!(tr.summary.skipped_scenes, 1);
    data[1].frames.truncate(5);
    assert!(Trainer::new(&data, small_net(6), train_cfg(1), None).is_err());
}
