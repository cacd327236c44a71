use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "synth_scenes": 3,
  "synth": {"duration_s": 2.0},
  "network": {"mlp_dims": [16, 16], "n_enc": 1, "n_heads": 2, "ffn_dims": [32, 16]},
  "train": {"epochs": 2, "max_steps": 30, "batch_size": 2}
}"#;

fn bott(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bott"))
        .args(args)
        .env("BOTT_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bott(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn jsonl_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    v.sort();
    v
}

/// Synthesizes and trains at K = 8 into `root`; returns (data, checkpoint).
fn synth_and_train(root: &Path, seed: &str) -> (PathBuf, PathBuf) {
    let cfg = root.join("small.json");
    fs::write(&cfg, SMALL).unwrap();
    let (data, model) = (root.join("data"), root.join("model"));
    ok(&["synth", "--config", p(&cfg), "--seed", seed, "--out", p(&data)]);
    assert_eq!(jsonl_files(&data).len(), 3);
    ok(&["train", "--config", p(&cfg), "--seed", seed, "--data", p(&data), "--k", "8", "--out", p(&model)]);
    (data, model.join("model.bott"))
}

#[test]
fn synth_train_track_eval_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let (data, ckpt) = synth_and_train(root, "7");
    let tracks = root.join("tracks");
    ok(&["track", "--data", p(&data), "--checkpoint", p(&ckpt), "--k", "8", "--seed", "7", "--out", p(&tracks)]);
    assert_eq!(jsonl_files(&tracks).len(), 3);
    let eval = root.join("eval");
    let out = ok(&["eval", "--data", p(&data), "--tracks", p(&tracks), "--seed", "7", "--out", p(&eval)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("MOTA"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("eval.json")).unwrap()).unwrap();
    assert!(report["overall"]["mota"].is_number());
    for dir in [&data, &root.join("model"), &tracks, &eval] {
        assert!(dir.join("config.json").is_file(), "{}", dir.display());
    }

    // Re-running from the echoed config reproduces the outputs exactly.
    let again = root.join("tracks2");
    let echoed = tracks.join("config.json");
    ok(&["track", "--config", p(&echoed), "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&again)]);
    for (a, b) in jsonl_files(&tracks).iter().zip(jsonl_files(&again)) {
        assert_eq!(fs::read(a).unwrap(), fs::read(&b).unwrap());
    }
}

#[test]
fn deploy_window_may_differ_from_training() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let (data, ckpt) = synth_and_train(root, "3");
    for (mode, k) in [("online", "4"), ("offline", "4"), ("online", "16")] {
        let out = root.join(format!("t_{mode}_{k}"));
        ok(&["track", "--data", p(&data), "--checkpoint", p(&ckpt), "--mode", mode, "--k", k, "--out", p(&out)]);
        assert_eq!(jsonl_files(&out).len(), 3);
        let eval = root.join(format!("e_{mode}_{k}"));
        ok(&["eval", "--data", p(&data), "--tracks", p(&out), "--out", p(&eval)]);
    }
    // Deploying at half the frequency subsamples the scenes.
    let out = root.join("t_5hz");
    ok(&["track", "--data", p(&data), "--checkpoint", p(&ckpt), "--k", "4", "--hz", "5", "--out", p(&out)]);
    let eval = root.join("e_5hz");
    ok(&["eval", "--data", p(&data), "--tracks", p(&out), "--hz", "5", "--out", p(&eval)]);
}

#[test]
fn bench_times_grow_with_boxes() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("bench");
    let stdout = ok(&["bench", "--boxes", "500,1000,2000", "--out", p(&out)]).stdout;
    assert!(String::from_utf8_lossy(&stdout).contains("median_ms"));
    let rows: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
    let boxes: Vec<u64> = rows.iter().map(|r| r["boxes"].as_u64().unwrap()).collect();
    assert_eq!(boxes, vec![500, 1000, 2000]);
    let ms: Vec<f64> = rows.iter().map(|r| r["median_ms"].as_f64().unwrap()).collect();
    assert!(ms.windows(2).all(|w| w[0] <= w[1]), "{ms:?}");
}

#[test]
fn exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let out = root.join("o");
    let code = |args: &[&str]| bott(args).status.code();

    assert_eq!(code(&[]), Some(1));
    assert_eq!(code(&["synth", "--out", p(&out), "--bogus"]), Some(1));
    assert_eq!(code(&["--version"]), Some(0));

    let bad_key = root.join("bad.json");
    fs::write(&bad_key, r#"{"sede": 1}"#).unwrap();
    assert_eq!(code(&["synth", "--config", p(&bad_key), "--out", p(&out)]), Some(1));
    assert_eq!(code(&["track", "--data", p(root), "--out", p(&out)]), Some(1));

    let empty = root.join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&["train", "--data", p(&empty), "--out", p(&out)]), Some(2));
    let broken = root.join("broken");
    fs::create_dir(&broken).unwrap();
    fs::write(broken.join("s.jsonl"), "{not json\n").unwrap();
    assert_eq!(code(&["track", "--data", p(&broken), "--baseline", "--out", p(&out)]), Some(2));
    assert_eq!(
        code(&["track", "--data", p(root), "--checkpoint", p(&root.join("missing.bott")), "--out", p(&out)]),
        Some(2)
    );

    let threads = Command::new(env!("CARGO_BIN_EXE_bott"))
        .args(["synth", "--out", p(&out)])
        .env("BOTT_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(1));
}
