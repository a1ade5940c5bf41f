//! On-disk scene store.
//!
//! ```text
//! scene_<id>/manifest.json   config, seed, frame count, per-frame time, ego pose, visibility
//! scene_<id>/sweeps.bin      "A4DS", version, frame count, (offset, count) per frame,
//!                            then little-endian f32 records x, y, z, t
//! scene_<id>/gt.json         trajectory lists
//! scene_<id>/init.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point4, Pose2D, Size2D};
use crate::label::{Detection, Trajectory};
use crate::sim::{SceneConfig, SceneLog, Sweep};

pub const MANIFEST: &str = "manifest.json";
pub const SWEEPS: &str = "sweeps.bin";
pub const GT: &str = "gt.json";
pub const INIT: &str = "init.json";

const SWEEP_MAGIC: &[u8; 4] = b"A4DS";
const SWEEP_VERSION: u32 = 1;
const HEADER_BYTES: usize = 12;
const INDEX_ENTRY_BYTES: usize = 16;
const RECORD_BYTES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub frame: usize,
    pub t: f64,
    pub ego: Pose2D,
    /// Returns per vehicle id in this sweep.
    pub visible_points: BTreeMap<u64, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scene_id: String,
    pub seed: u64,
    pub config: SceneConfig,
    pub config_digest: String,
    pub frame_count: usize,
    pub frames: Vec<FrameMeta>,
}

/// One box of the trajectory JSON format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub w: f64,
    pub l: f64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub id: u64,
    #[serde(rename = "static")]
    pub static_flag: Option<bool>,
    pub frames: Vec<FrameRecord>,
}

impl From<&Trajectory> for TrajectoryRecord {
    fn from(t: &Trajectory) -> Self {
        Self {
            id: t.id,
            static_flag: t.static_flag,
            frames: t
                .detections
                .iter()
                .map(|d| FrameRecord {
                    frame: d.frame,
                    t: d.t,
                    x: d.pose.x,
                    y: d.pose.y,
                    theta: d.pose.theta,
                    w: d.size.w,
                    l: d.size.l,
                    score: d.score,
                    gt_id: d.gt_id,
                })
                .collect(),
        }
    }
}

impl TryFrom<TrajectoryRecord> for Trajectory {
    type Error = Error;

    fn try_from(r: TrajectoryRecord) -> Result<Self> {
        let detections = r
            .frames
            .into_iter()
            .map(|f| {
                Ok(Detection {
                    pose: Pose2D::new(f.x, f.y, f.theta),
                    size: Size2D::new(f.w, f.l)?,
                    t: f.t,
                    frame: f.frame,
                    score: f.score,
                    gt_id: f.gt_id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Trajectory {
            id: r.id,
            detections,
            static_flag: r.static_flag,
        })
    }
}

pub fn scene_dir(store: &Path, scene_id: &str) -> PathBuf {
    store.join(format!("scene_{scene_id}"))
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::BadStore {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn write_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let recs: Vec<TrajectoryRecord> = trajs.iter().map(TrajectoryRecord::from).collect();
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(&recs)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let bytes = fs::read(path)?;
    let recs: Vec<TrajectoryRecord> =
        serde_json::from_slice(&bytes).map_err(|e| bad(path, e.to_string()))?;
    recs.into_iter().map(Trajectory::try_from).collect()
}

/// Encodes sweeps in the binary layout described in the module docs.
pub fn encode_sweeps(sweeps: &[Sweep]) -> Vec<u8> {
    let total: usize = sweeps.iter().map(|s| s.points.len()).sum();
    let mut out =
        Vec::with_capacity(HEADER_BYTES + sweeps.len() * INDEX_ENTRY_BYTES + total * RECORD_BYTES);
    out.extend_from_slice(SWEEP_MAGIC);
    out.extend_from_slice(&SWEEP_VERSION.to_le_bytes());
    out.extend_from_slice(&(sweeps.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for s in sweeps {
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(s.points.len() as u64).to_le_bytes());
        offset += s.points.len() as u64;
    }
    for s in sweeps {
        for p in &s.points {
            for v in [p.x, p.y, p.z, p.t] {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

/// Frame index of an encoded sweep file: `(record offset, record count)` per frame.
pub fn sweep_index(bytes: &[u8], path: &Path) -> Result<Vec<(u64, u64)>> {
    if bytes.len() < HEADER_BYTES || &bytes[..4] != SWEEP_MAGIC {
        return Err(bad(path, "missing sweep header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != SWEEP_VERSION {
        return Err(bad(path, format!("unsupported sweep version {version}")));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let index_end = HEADER_BYTES + n * INDEX_ENTRY_BYTES;
    if bytes.len() < index_end {
        return Err(bad(path, "truncated frame index"));
    }
    let index: Vec<(u64, u64)> = (0..n)
        .map(|i| {
            let e = &bytes[HEADER_BYTES + i * INDEX_ENTRY_BYTES..];
            (
                u64::from_le_bytes(e[..8].try_into().expect("8 bytes")),
                u64::from_le_bytes(e[8..16].try_into().expect("8 bytes")),
            )
        })
        .collect();
    let records = (bytes.len() - index_end) / RECORD_BYTES;
    if !(bytes.len() - index_end).is_multiple_of(RECORD_BYTES)
        || index.iter().any(|&(o, c)| o + c > records as u64)
    {
        return Err(bad(path, "frame index does not match payload"));
    }
    Ok(index)
}

/// Points of one frame from an encoded sweep file.
pub fn decode_frame(bytes: &[u8], path: &Path, frame: usize) -> Result<Vec<Point4>> {
    let index = sweep_index(bytes, path)?;
    let &(offset, count) = index
        .get(frame)
        .ok_or_else(|| bad(path, format!("frame {frame} out of range")))?;
    let base = HEADER_BYTES + index.len() * INDEX_ENTRY_BYTES + offset as usize * RECORD_BYTES;
    Ok(bytes[base..base + count as usize * RECORD_BYTES]
        .chunks_exact(RECORD_BYTES)
        .map(|r| {
            let f = |i: usize| f32::from_le_bytes(r[4 * i..4 * i + 4].try_into().expect("4 bytes")) as f64;
            Point4::new(f(0), f(1), f(2), f(3))
        })
        .collect())
}

/// Writes a scene with its initialization under `store/scene_<id>/`.
pub fn write_scene(
    store: &Path,
    scene_id: &str,
    config: &SceneConfig,
    log: &SceneLog,
    init: &[Trajectory],
) -> Result<PathBuf> {
    let dir = scene_dir(store, scene_id);
    fs::create_dir_all(&dir)?;
    let manifest = SceneManifest {
        scene_id: scene_id.to_string(),
        seed: log.seed,
        config: config.clone(),
        config_digest: log.config_digest.clone(),
        frame_count: log.n_frames(),
        frames: log
            .sweeps
            .iter()
            .zip(&log.visible_points)
            .map(|(s, v)| FrameMeta {
                frame: s.frame,
                t: s.t,
                ego: s.ego,
                visible_points: v.clone(),
            })
            .collect(),
    };
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(dir.join(SWEEPS), encode_sweeps(&log.sweeps))?;
    write_trajectories(&dir.join(GT), &log.gt_trajectories)?;
    write_trajectories(&dir.join(INIT), init)?;
    Ok(dir)
}

pub fn read_manifest(dir: &Path) -> Result<SceneManifest> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path)?;
    let m: SceneManifest = serde_json::from_slice(&bytes).map_err(|e| bad(&path, e.to_string()))?;
    if m.frames.len() != m.frame_count {
        return Err(bad(&path, "frame count disagrees with frame list"));
    }
    Ok(m)
}

/// Loads the scene log and its stored initialization.
pub fn read_scene(dir: &Path) -> Result<(SceneManifest, SceneLog, Vec<Trajectory>)> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(SWEEPS);
    let bytes = fs::read(&path)?;
    let index = sweep_index(&bytes, &path)?;
    if index.len() != manifest.frame_count {
        return Err(bad(&path, "frame count disagrees with manifest"));
    }
    let sweeps = manifest
        .frames
        .iter()
        .enumerate()
        .map(|(k, f)| {
            Ok(Sweep {
                frame: f.frame,
                t: f.t,
                ego: f.ego,
                points: decode_frame(&bytes, &path, k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let log = SceneLog {
        sweeps,
        gt_trajectories: read_trajectories(&dir.join(GT))?,
        seed: manifest.seed,
        config_digest: manifest.config_digest.clone(),
        visible_points: manifest.frames.iter().map(|f| f.visible_points.clone()).collect(),
    };
    let init = read_trajectories(&dir.join(INIT))?;
    Ok((manifest, log, init))
}

/// Scene ids present in a store, sorted.
pub fn list_scenes(store: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(store)? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let name = entry.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_prefix("scene_")) {
            if entry.path().join(MANIFEST).is_file() {
                ids.push(id.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}
