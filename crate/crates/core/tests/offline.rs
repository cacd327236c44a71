use std::collections::{BTreeMap, HashMap, HashSet};

use proptest::prelude::*;

use bott::featurizer::input_dim;
use bott::network::{init_params, Network, NetworkConfig};
use bott::offline::{aggregate_links, build_tracks, interpolate_tracks, select_links, track_scene, LinkCandidate};
use bott::online::{gate, Gates, OnlineConfig};
use bott::synth::{gen_scenes, SynthConfig};
use bott::types::{Box3D, DetectionFrame, SceneDB, SlidingWindow};

fn random_net(n_classes: usize, seed: u64) -> Network {
    let cfg = NetworkConfig::desk(input_dim(n_classes));
    Network::new(cfg.clone(), init_params(&cfg, seed).unwrap()).unwrap()
}

fn toy_scene(seed: u64) -> SceneDB {
    let cfg = SynthConfig {
        seed,
        duration_s: 2.0,
        ..Default::default()
    };
    gen_scenes(&cfg, "off", 1).unwrap().remove(0)
}

fn gates(scene: &SceneDB) -> Gates {
    OnlineConfig::default().resolve(&scene.class_names).unwrap()
}

/// Max score per gated pair, scoring every window on its own.
fn brute_links(scene: &SceneDB, net: &Network, k: usize, g: &Gates) -> BTreeMap<(u64, u64), f64> {
    let by_id: HashMap<u64, &Box3D> = scene.frames.iter().flat_map(|f| &f.boxes).map(|b| (b.box_id, b)).collect();
    let mut best: BTreeMap<(u64, u64), f64> = BTreeMap::new();
    for s in 0..=scene.frames.len() - k {
        let w = SlidingWindow::new(scene.frames[s..s + k].to_vec()).unwrap();
        if w.num_boxes() == 0 {
            continue;
        }
        let ls = net.forward(&w).unwrap();
        for r in 0..ls.n {
            for c in 0..ls.n {
                let (a, b) = (by_id[&ls.box_ref[r]], by_id[&ls.box_ref[c]]);
                if a.frame_idx < b.frame_idx && gate(b, a, g) {
                    let e = best.entry((a.box_id, b.box_id)).or_insert(f64::NEG_INFINITY);
                    *e = e.max(ls.get(r, c));
                }
            }
        }
    }
    best
}

#[test]
fn aggregation_matches_per_window_oracle() {
    let scene = toy_scene(3);
    assert_eq!(scene.frames.len(), 20);
    let net = random_net(scene.num_classes(), 4);
    let g = gates(&scene);
    let k = 5;
    let cands = aggregate_links(&scene, &net, k, &g).unwrap();
    let oracle = brute_links(&scene, &net, k, &g);
    assert!(!oracle.is_empty());
    let got: BTreeMap<(u64, u64), f64> = cands.iter().map(|c| ((c.box_i, c.box_j), c.score)).collect();
    assert_eq!(got, oracle);
    for c in &cands {
        assert!(c.frame_j - c.frame_i < k as i64, "{c:?}");
    }
}

#[test]
fn scene_shorter_than_k_is_one_window() {
    let mut scene = toy_scene(5);
    scene.frames.truncate(4);
    let net = random_net(scene.num_classes(), 6);
    let g = gates(&scene);
    let got: BTreeMap<(u64, u64), f64> = aggregate_links(&scene, &net, 16, &g)
        .unwrap()
        .into_iter()
        .map(|c| ((c.box_i, c.box_j), c.score))
        .collect();
    assert_eq!(got, brute_links(&scene, &net, 4, &g));
}

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

/// `per_frame[f]` boxes in frame `f`, ids `10 * f + slot`, spaced 10 m apart.
fn grid_scene(per_frame: &[usize]) -> SceneDB {
    let frames = per_frame
        .iter()
        .enumerate()
        .map(|(f, &n)| {
            let mut df = DetectionFrame::new(f as i64, f as f64 * 0.5);
            for s in 0..n {
                let mut b = Box3D::new(0, 1);
                b.box_id = 10 * f as u64 + s as u64;
                b.frame_idx = f as i64;
                b.t = df.t;
                b.x = 10.0 * s as f64 + 0.1 * f as f64;
                df.boxes.push(b);
            }
            df
        })
        .collect();
    SceneDB {
        scene_id: "grid".into(),
        frequency_hz: 2.0,
        class_names: vec!["car".into()],
        frames,
        gt_tracks: vec![],
    }
}

#[test]
fn selection_thresholds_and_keeps_disjoint_links() {
    let cands = vec![
        cand(0, 10, 0, 1, 0.9),
        cand(1, 11, 0, 1, 0.8),
        cand(10, 20, 1, 2, 0.7),
        cand(11, 21, 1, 2, 0.49),
    ];
    let kept = select_links(&cands, &[0.5]);
    assert_eq!(kept, cands[..3].to_vec());
}

#[test]
fn no_links_gives_singletons() {
    let scene = grid_scene(&[2, 1, 3]);
    let tracks = build_tracks(&[], &scene);
    assert_eq!(tracks.len(), 6);
    assert!(tracks.iter().all(|t| t.boxes.len() == 1));
    let ids: Vec<u64> = tracks.iter().map(|t| t.id).collect();
    assert_eq!(ids, (0..6).collect::<Vec<_>>());
}

#[test]
fn contiguous_track_is_unchanged() {
    let scene = grid_scene(&[1, 1, 1, 1]);
    let links = vec![cand(0, 10, 0, 1, 0.9), cand(10, 20, 1, 2, 0.9), cand(20, 30, 2, 3, 0.9)];
    let tracks = interpolate_tracks(&build_tracks(&links, &scene), &scene);
    assert_eq!(tracks.len(), 1);
    let all: Vec<Box3D> = scene.frames.iter().flat_map(|f| f.boxes.clone()).collect();
    assert_eq!(tracks[0].boxes, all);
}

#[test]
fn offline_pipeline_is_deterministic() {
    let scene = toy_scene(8);
    let net = random_net(scene.num_classes(), 9);
    let g = gates(&scene);
    let th = g.min_link_score.clone();
    let a = track_scene(&scene, &net, 6, &g, &th).unwrap();
    let b = track_scene(&scene, &net, 6, &g, &th).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

/// Random links on a 6-frame grid with up to 3 boxes per frame.
fn link_set() -> impl Strategy<Value = (Vec<usize>, Vec<(usize, usize, usize, usize, f64)>)> {
    (
        prop::collection::vec(1usize..4, 6),
        prop::collection::vec((0usize..6, 1usize..4, 0usize..3, 0usize..3, 0.0f64..1.0), 0..30),
    )
}

fn to_cands(per_frame: &[usize], raw: &[(usize, usize, usize, usize, f64)]) -> Vec<LinkCandidate> {
    let mut seen = HashSet::new();
    raw.iter()
        .filter_map(|&(f, gap, si, sj, s)| {
            let g = f + gap;
            if g >= per_frame.len() || si >= per_frame[f] || sj >= per_frame[g] {
                return None;
            }
            let (i, j) = (10 * f as u64 + si as u64, 10 * g as u64 + sj as u64);
            seen.insert((i, j)).then(|| cand(i, j, f as i64, g as i64, s))
        })
        .collect()
}

proptest! {
    #[test]
    fn selection_is_one_link_per_box_and_frame((per_frame, raw) in link_set(), th in 0.0f64..0.6) {
        let cands = to_cands(&per_frame, &raw);
        let kept = select_links(&cands, &[th]);
        let mut used: HashSet<(u64, i64)> = HashSet::new();
        for c in &kept {
            prop_assert!(c.score >= th);
            prop_assert!(used.insert((c.box_i, c.frame_j)));
            prop_assert!(used.insert((c.box_j, c.frame_i)));
        }
        // Every rejected candidate above threshold conflicts with a kept link
        // of at least its score.
        for c in cands.iter().filter(|c| c.score >= th && !kept.contains(c)) {
            prop_assert!(kept.iter().any(|k| k.score >= c.score
                && ((k.box_i == c.box_i && k.frame_j == c.frame_j) || (k.box_j == c.box_j && k.frame_i == c.frame_i))));
        }
    }

    #[test]
    fn tracks_partition_the_boxes((per_frame, raw) in link_set()) {
        let scene = grid_scene(&per_frame);
        let mut cands = to_cands(&per_frame, &raw);
        cands.sort_by(|a, b| b.score.total_cmp(&a.score));
        let tracks = interpolate_tracks(&build_tracks(&cands, &scene), &scene);
        let mut count: HashMap<u64, usize> = HashMap::new();
        for t in &tracks {
            let frames: HashSet<i64> = t.boxes.iter().map(|b| b.frame_idx).collect();
            prop_assert_eq!(frames.len(), t.boxes.len());
            prop_assert!(t.boxes.windows(2).all(|w| w[1].frame_idx == w[0].frame_idx + 1));
            for b in t.boxes.iter().filter(|b| !b.interpolated) {
                *count.entry(b.box_id).or_default() += 1;
            }
        }
        let real: usize = per_frame.iter().sum();
        prop_assert_eq!(count.len(), real);
        prop_assert!(count.values().all(|c| *c == 1));
    }
}
