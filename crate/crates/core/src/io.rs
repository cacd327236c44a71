//! JSON Lines file formats: scene databases and per-frame track output.
//!
//! Scene file: line 1 is a header `{scene_id, frequency_hz, class_names}`,
//! every further line one frame `{frame_idx, t, boxes: [...], gt: [...]}`.
//! `gt` carries the ground-truth boxes of that frame; when no frame has it,
//! ground-truth tracks are rebuilt from the detection labels instead.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{BottError, Result};
use crate::types::{tracks_from_labels, Box3D, DetectionFrame, SceneDB};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneHeader {
    scene_id: String,
    frequency_hz: f64,
    class_names: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    frame_idx: i64,
    t: f64,
    boxes: Vec<Box3D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt: Option<Vec<Box3D>>,
}

fn data_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> BottError {
    BottError::Data {
        path: path.to_path_buf(),
        msg: format!("line {line}: {msg}"),
    }
}

pub fn write_scene(scene: &SceneDB, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| BottError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_scene_to(scene, &mut w).map_err(|e| BottError::io(path, e))?;
    w.flush().map_err(|e| BottError::io(path, e))
}

pub fn write_scene_to(scene: &SceneDB, w: &mut impl Write) -> std::io::Result<()> {
    let header = SceneHeader {
        scene_id: scene.scene_id.clone(),
        frequency_hz: scene.frequency_hz,
        class_names: scene.class_names.clone(),
    };
    serde_json::to_writer(&mut *w, &header)?;
    writeln!(w)?;
    let gt = scene.gt_frames();
    for (frame, gt_frame) in scene.frames.iter().zip(gt) {
        let rec = FrameRecord {
            frame_idx: frame.frame_idx,
            t: frame.t,
            boxes: frame.boxes.clone(),
            gt: Some(gt_frame.boxes),
        };
        serde_json::to_writer(&mut *w, &rec)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<SceneDB> {
    let file = File::open(path).map_err(|e| BottError::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: SceneHeader = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| BottError::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| data_err(path, 1, e))?
        }
        None => return Err(data_err(path, 1, "empty scene file")),
    };
    let mut frames = Vec::new();
    let mut gt_boxes = Vec::new();
    let mut saw_gt = false;
    for (i, line) in lines {
        let line = line.map_err(|e| BottError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| data_err(path, i + 1, e))?;
        if let Some(gt) = rec.gt {
            saw_gt = true;
            gt_boxes.extend(gt);
        }
        frames.push(DetectionFrame {
            frame_idx: rec.frame_idx,
            t: rec.t,
            boxes: rec.boxes,
        });
    }
    let gt_tracks = if saw_gt {
        tracks_from_labels(&gt_boxes)
    } else {
        tracks_from_labels(frames.iter().flat_map(|f| &f.boxes))
    };
    let scene = SceneDB {
        scene_id: header.scene_id,
        frequency_hz: header.frequency_hz,
        class_names: header.class_names,
        frames,
        gt_tracks,
    };
    scene.validate().map_err(|e| data_err(path, 0, e))?;
    Ok(scene)
}

/// Scene files (`*.jsonl`) in a directory, sorted by name.
pub fn scene_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| BottError::io(dir, e))? {
        let p = entry.map_err(|e| BottError::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "jsonl") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_scene_dir(dir: &Path) -> Result<Vec<SceneDB>> {
    scene_paths(dir)?.iter().map(|p| read_scene(p)).collect()
}

/// One box published under a track identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedBox {
    pub track_id: u64,
    #[serde(flatten)]
    pub bbox: Box3D,
}

/// Tracker output for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackFrame {
    pub frame_idx: i64,
    pub t: f64,
    pub tracks: Vec<TrackedBox>,
}

pub fn write_track_frames(frames: &[TrackFrame], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| BottError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for f in frames {
        serde_json::to_writer(&mut w, f)?;
        writeln!(w).map_err(|e| BottError::io(path, e))?;
    }
    w.flush().map_err(|e| BottError::io(path, e))
}

pub fn read_track_frames(path: &Path) -> Result<Vec<TrackFrame>> {
    let file = File::open(path).map_err(|e| BottError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| BottError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| data_err(path, i + 1, e))?);
    }
    Ok(out)
}

/// Ground truth of a scene in tracker-output form, keyed by GT track id.
pub fn gt_track_frames(scene: &SceneDB) -> Vec<TrackFrame> {
    scene
        .gt_frames()
        .into_iter()
        .map(|f| TrackFrame {
            frame_idx: f.frame_idx,
            t: f.t,
            tracks: f
                .boxes
                .into_iter()
                .map(|b| TrackedBox {
                    track_id: b.gt_track_id.unwrap_or(-1) as u64,
                    bbox: b,
                })
                .collect(),
        })
        .collect()
}

/// Writes pretty JSON, used for configs and reports.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| BottError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).map_err(|e| BottError::io(path, e))?;
    w.flush().map_err(|e| BottError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| BottError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| BottError::Data {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}
