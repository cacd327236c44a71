use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flate2::write::GzEncoder;
use flate2::Compression;
use log::info;
use rayon::prelude::*;

use bott::bench::{format_table, run_bench};
use bott::checkpoint::load_model;
use bott::config::RunConfig;
use bott::featurizer::input_dim;
use bott::io::{read_scene_dir, read_track_frames, write_json, write_scene, write_track_frames, TrackFrame};
use bott::metrics::{evaluate, ScenePair};
use bott::network::{init_params, AttentionDump, Network};
use bott::online::{Associator, OnlineTracker};
use bott::synth::gen_scenes;
use bott::trackdb::generate_db;
use bott::trainer::{Trainer, MODEL_FILE};
use bott::types::SceneDB;
use bott::{offline, BottError, Result};

#[derive(Parser)]
#[command(name = "bott", version, about = "Box-only transformer 3D multi-object tracker")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Online,
    Offline,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate labeled synthetic scenes.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        hz: Option<f64>,
    },
    /// Label detection scenes with ground truth into a training database.
    GenDb {
        #[command(flatten)]
        common: Common,
        /// Directory of detection scenes.
        #[arg(long)]
        dets: PathBuf,
        /// Directory of ground-truth scenes (boxes carry track ids).
        #[arg(long)]
        gt: PathBuf,
        /// Frequency the ground truth is interpolated to.
        #[arg(long)]
        hz: Option<f64>,
    },
    /// Train a linking network.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory of labeled scenes.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Track every scene of a directory.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "online")]
        mode: Mode,
        #[arg(long)]
        k: Option<usize>,
        /// Deploy frequency; scenes are subsampled to it.
        #[arg(long)]
        hz: Option<f64>,
        /// Associate by gated nearest neighbor instead of the network (online only).
        #[arg(long)]
        baseline: bool,
        /// Write per-frame attention weights as `<scene>.attn.gz` (online only).
        #[arg(long)]
        attention: bool,
    },
    /// Score tracker output against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Directory of `<scene_id>.jsonl` tracker outputs.
        #[arg(long)]
        tracks: PathBuf,
        /// Frequency the tracks were produced at.
        #[arg(long)]
        hz: Option<f64>,
    },
    /// Time network forwards by window box count.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated box counts.
        #[arg(long, value_delimiter = ',')]
        boxes: Option<Vec<usize>>,
        #[arg(long)]
        k: Option<usize>,
    },
}

impl Cmd {
    fn common(&self) -> &Common {
        match self {
            Cmd::Synth { common, .. }
            | Cmd::GenDb { common, .. }
            | Cmd::Train { common, .. }
            | Cmd::Track { common, .. }
            | Cmd::Eval { common, .. }
            | Cmd::Bench { common, .. } => common,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = set_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}

fn set_threads() -> Result<()> {
    let Ok(v) = std::env::var("BOTT_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| BottError::Config(format!("BOTT_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| BottError::Config(e.to_string()))
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = common.seed.unwrap_or(cfg.seed);
    cfg.set_seed(seed);
    Ok(cfg)
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| BottError::Data {
        path: dir.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Subsamples scenes to `hz`, which must divide their frequency.
fn at_frequency(scenes: Vec<SceneDB>, hz: Option<f64>) -> Result<Vec<SceneDB>> {
    let Some(hz) = hz else { return Ok(scenes) };
    if !(hz > 0.0) {
        return Err(BottError::Config("--hz must be positive".into()));
    }
    scenes
        .into_iter()
        .map(|s| {
            let ratio = s.frequency_hz / hz;
            let step = ratio.round();
            if step < 1.0 || (ratio - step).abs() > 1e-6 {
                return Err(BottError::Config(format!(
                    "scene {} at {} Hz cannot be subsampled to {hz} Hz",
                    s.scene_id, s.frequency_hz
                )));
            }
            Ok(s.resample(step as usize))
        })
        .collect()
}

fn run(cmd: Cmd) -> Result<()> {
    let mut cfg = load_config(cmd.common())?;
    let out = cmd.common().out.clone();
    match cmd {
        Cmd::Synth { count, hz, .. } => {
            if let Some(n) = count {
                cfg.synth_scenes = n;
            }
            if let Some(hz) = hz {
                cfg.synth.frequency_hz = hz;
            }
            cfg.validate()?;
            prepare_out(&out)?;
            cfg.echo(&out)?;
            for s in gen_scenes(&cfg.synth, "scene", cfg.synth_scenes)? {
                write_scene(&s, &out.join(format!("{}.jsonl", s.scene_id)))?;
            }
            println!("wrote {} scenes to {}", cfg.synth_scenes, out.display());
        }
        Cmd::GenDb { dets, gt, hz, .. } => {
            if let Some(hz) = hz {
                cfg.db.target_hz = hz;
            }
            cfg.validate()?;
            let gt: HashMap<String, SceneDB> = read_scene_dir(&gt)?.into_iter().map(|s| (s.scene_id.clone(), s)).collect();
            let dets = read_scene_dir(&dets)?;
            prepare_out(&out)?;
            cfg.echo(&out)?;
            for d in &dets {
                let g = gt.get(&d.scene_id).ok_or_else(|| BottError::Data {
                    path: out.clone(),
                    msg: format!("no ground truth for scene {}", d.scene_id),
                })?;
                let db = generate_db(d, g, &cfg.db)?;
                write_scene(&db, &out.join(format!("{}.jsonl", db.scene_id)))?;
            }
            println!("labeled {} scenes into {}", dets.len(), out.display());
        }
        Cmd::Train { data, k, resume, .. } => {
            if let Some(k) = k {
                cfg.set_k(k);
            }
            cfg.validate()?;
            let scenes = read_scene_dir(&data)?;
            let first = scenes.first().ok_or_else(|| BottError::Data {
                path: data.clone(),
                msg: "no scenes found".into(),
            })?;
            let net_cfg = cfg.network.build(input_dim(first.class_names.len()))?;
            let net = Network::new(net_cfg.clone(), init_params(&net_cfg, cfg.seed)?)?;
            prepare_out(&out)?;
            cfg.echo(&out)?;
            let mut trainer = Trainer::new(&scenes, net, cfg.train.clone(), Some(&out))?;
            if resume {
                trainer.resume(&out)?;
            }
            let summary = trainer.run()?;
            write_json(&summary, &out.join("summary.json"))?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            println!("model written to {}", out.join(MODEL_FILE).display());
        }
        Cmd::Track {
            data,
            checkpoint,
            mode,
            k,
            hz,
            baseline,
            attention,
            ..
        } => {
            if let Some(k) = k {
                cfg.set_k(k);
            }
            cfg.validate()?;
            if mode == Mode::Offline && (baseline || attention) {
                return Err(BottError::Config("--baseline and --attention apply to online mode only".into()));
            }
            let net = match (&checkpoint, baseline) {
                (Some(p), _) => Some(load_model(p)?.0),
                (None, true) => None,
                (None, false) => return Err(BottError::Config("--checkpoint is required unless --baseline is set".into())),
            };
            let scenes = at_frequency(read_scene_dir(&data)?, hz)?;
            prepare_out(&out)?;
            cfg.echo(&out)?;
            scenes
                .par_iter()
                .map(|s| {
                    let frames = match mode {
                        Mode::Online => {
                            let assoc = match (&net, baseline) {
                                (Some(n), false) => Associator::Network(n),
                                _ => Associator::NearestNeighbor,
                            };
                            let mut tracker = OnlineTracker::new(assoc, cfg.online.clone(), &s.class_names)?;
                            let mut frames = Vec::with_capacity(s.frames.len());
                            let mut dump = Vec::new();
                            for f in &s.frames {
                                let step = tracker.step_full(f, attention)?;
                                if let Some(a) = step.attention {
                                    dump.push((f.frame_idx, a));
                                }
                                frames.push(step.published);
                            }
                            if attention {
                                write_attention(&out.join(format!("{}.attn.gz", s.scene_id)), &dump)?;
                            }
                            frames
                        }
                        Mode::Offline => {
                            let net = net.as_ref().expect("offline mode has a network");
                            let gates = cfg.online.resolve(&s.class_names)?;
                            let thresholds = match &cfg.offline.link_threshold {
                                Some(t) => t.resolve(&s.class_names)?,
                                None => gates.min_link_score.clone(),
                            };
                            offline::track_scene(s, net, cfg.online.k, &gates, &thresholds)?
                        }
                    };
                    write_track_frames(&frames, &out.join(format!("{}.jsonl", s.scene_id)))?;
                    info!("tracked {}", s.scene_id);
                    Ok(())
                })
                .collect::<Result<Vec<()>>>()?;
            println!("tracked {} scenes into {}", scenes.len(), out.display());
        }
        Cmd::Eval { data, tracks, hz, .. } => {
            cfg.validate()?;
            let scenes = at_frequency(read_scene_dir(&data)?, hz)?;
            let preds: Vec<Vec<TrackFrame>> = scenes
                .iter()
                .map(|s| read_track_frames(&tracks.join(format!("{}.jsonl", s.scene_id))))
                .collect::<Result<_>>()?;
            let class_names = scenes.first().map(|s| s.class_names.clone()).unwrap_or_default();
            if scenes.iter().any(|s| s.class_names != class_names) {
                return Err(BottError::domain("scenes use different class taxonomies"));
            }
            let pairs: Vec<ScenePair> = preds.iter().zip(&scenes).map(|(p, s)| ScenePair::new(p, s)).collect();
            let report = evaluate(&pairs, &class_names)?;
            prepare_out(&out)?;
            cfg.echo(&out)?;
            write_json(&report, &out.join("eval.json"))?;
            let o = &report.overall;
            println!(
                "MOTA {:.4}  sAMOTA {:.4}  recall {:.4}  IDS {}  FP {}  FN {}",
                o.mota, o.samota, o.recall, o.counts.ids, o.counts.fp, o.counts.fn_
            );
        }
        Cmd::Bench { checkpoint, boxes, k, .. } => {
            if let Some(b) = boxes {
                cfg.bench.boxes = b;
            }
            if let Some(k) = k {
                cfg.set_k(k);
            }
            cfg.validate()?;
            let (net, n_classes) = match &checkpoint {
                Some(p) => {
                    let (net, meta) = load_model(p)?;
                    (net, meta.class_names.len())
                }
                None => {
                    let n_classes = cfg.synth.classes.len();
                    let c = cfg.network.build(input_dim(n_classes))?;
                    (Network::new(c.clone(), init_params(&c, cfg.seed)?)?, n_classes)
                }
            };
            let rows = run_bench(&net, n_classes, &cfg.bench)?;
            prepare_out(&out)?;
            cfg.echo(&out)?;
            write_json(&rows, &out.join("bench.json"))?;
            print!("{}", format_table(&rows));
        }
    }
    Ok(())
}

/// Gzipped little-endian records: per frame `frame_idx: i64`, `blocks: u32`,
/// then per block `heads: u32`, `n: u32` and `heads * n * n` f32 weights.
fn write_attention(path: &Path, dump: &[(i64, AttentionDump)]) -> Result<()> {
    let io = |e| BottError::Data {
        path: path.to_path_buf(),
        msg: format!("{e}"),
    };
    let file = File::create(path).map_err(io)?;
    let mut w = GzEncoder::new(BufWriter::new(file), Compression::default());
    for (frame_idx, blocks) in dump {
        w.write_all(&frame_idx.to_le_bytes()).map_err(io)?;
        w.write_all(&(blocks.len() as u32).to_le_bytes()).map_err(io)?;
        for (heads, n, weights) in blocks {
            w.write_all(&(*heads as u32).to_le_bytes()).map_err(io)?;
            w.write_all(&(*n as u32).to_le_bytes()).map_err(io)?;
            for x in weights {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.finish().and_then(|mut b| b.flush()).map_err(io)
}
