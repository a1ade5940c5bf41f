//! Per-scene state: the stored scene, the journaled current trajectories and
//! the refined revisions.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use auto4d_core::eval::train::flag_static;
use auto4d_core::eval::{auto4d_refine, eval_labels, labelable_gt, link_pair, EvalTable};
use auto4d_core::geom::box_iou_bev;
use auto4d_core::path_branch::PathBranchConfig;
use auto4d_core::sim::SceneLog;
use auto4d_core::size_branch::Align;
use auto4d_core::store::{read_scene, SceneManifest, TrajectoryRecord};
use auto4d_core::{BoxBEV, Trajectory};

use super::{
    ApiError, BoxView, FrameIou, FrameView, JournalEntry, LinkCommand, LinkResponse, RefineModels, RevisionFile,
    SceneSummary, TrajectoriesView, TrajectoryView,
};

pub const JOURNAL: &str = "edits.jsonl";
pub const REVISIONS: &str = "revisions";

fn revision_path(dir: &Path, n: u32) -> PathBuf {
    dir.join(REVISIONS).join(format!("rev_{n:04}.json"))
}

/// Links fragments `a` and `b` of `current`. The merged trajectory takes the
/// smaller id and the place of that fragment in the list.
pub fn apply_link(current: &[Trajectory], a: u64, b: u64) -> Result<(Vec<Trajectory>, u64), ApiError> {
    if a == b {
        return Err(ApiError::BadRequest(format!("cannot link fragment {a} to itself")));
    }
    let find = |id: u64| {
        current
            .iter()
            .position(|t| t.id == id)
            .ok_or_else(|| ApiError::NotFound(format!("fragment {id}")))
    };
    let (ia, ib) = (find(a)?, find(b)?);
    let id = a.min(b);
    let merged = link_pair(&current[ia], &current[ib], id)?;
    let (keep, drop) = if id == a { (ia, ib) } else { (ib, ia) };
    let mut out = current.to_vec();
    out[keep] = merged;
    out.remove(drop);
    Ok((out, id))
}

type Revision = (u32, Arc<Vec<Trajectory>>);

#[derive(Debug)]
struct SceneState {
    current: Vec<Trajectory>,
    edits: usize,
    revisions: Vec<u32>,
    latest: Option<(u32, Arc<Vec<Trajectory>>, EvalTable)>,
    active_job: Option<u64>,
}

#[derive(Debug)]
pub struct SceneHandle {
    pub id: String,
    pub dir: PathBuf,
    pub manifest: SceneManifest,
    pub log: SceneLog,
    /// Labelable ground truth; the reference for every metric.
    pub gt: Vec<Trajectory>,
    pub init: Vec<Trajectory>,
    state: RwLock<SceneState>,
}

impl SceneHandle {
    /// Reads the scene, replays its journal onto the initialization and
    /// indexes existing revisions. Never writes.
    pub fn load(id: String, dir: PathBuf, min_points: usize) -> Result<Self, ApiError> {
        let (manifest, log, init) = read_scene(&dir)?;
        let gt = labelable_gt(&log, min_points);
        let mut current = init.clone();
        let entries = read_journal(&dir.join(JOURNAL))?;
        for e in &entries {
            let (next, merged) = apply_link(&current, e.a, e.b)
                .map_err(|err| ApiError::Internal(format!("replaying edit {} of scene {id}: {err}", e.seq)))?;
            if merged != e.merged {
                return Err(ApiError::Internal(format!("edit {} of scene {id} replays to a different id", e.seq)));
            }
            current = next;
        }
        let revisions = list_revisions(&dir)?;
        let latest = match revisions.last() {
            Some(&n) => {
                let r = read_revision(&dir, n)?;
                Some((n, Arc::new(records_to_trajectories(r.trajectories)?), r.after))
            }
            None => None,
        };
        Ok(Self {
            id,
            dir,
            manifest,
            log,
            gt,
            init,
            state: RwLock::new(SceneState {
                current,
                edits: entries.len(),
                revisions,
                latest,
                active_job: None,
            }),
        })
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, SceneState> {
        self.state.read().expect("scene lock")
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, SceneState> {
        self.state.write().expect("scene lock")
    }

    pub fn current(&self) -> Vec<Trajectory> {
        self.read().current.clone()
    }

    pub fn summary(&self) -> SceneSummary {
        let st = self.read();
        SceneSummary {
            id: self.id.clone(),
            frame_count: self.manifest.frame_count,
            gt_trajectories: self.gt.len(),
            init_trajectories: self.init.len(),
            current_trajectories: st.current.len(),
            edits: st.edits,
            revisions: st.revisions.clone(),
            current: eval_labels(&st.current, &self.gt),
            latest: st.latest.as_ref().map(|l| l.2.clone()),
        }
    }

    /// The latest refined revision, or revision `n`; only the latest is
    /// held in memory.
    fn refined(&self, revision: Option<u32>) -> Result<Option<Revision>, ApiError> {
        let latest = self.read().latest.as_ref().map(|l| (l.0, l.1.clone()));
        match (revision, latest) {
            (None, latest) => Ok(latest),
            (Some(n), Some((m, ts))) if n == m => Ok(Some((m, ts))),
            (Some(n), _) => {
                if !self.read().revisions.contains(&n) {
                    return Err(ApiError::NotFound(format!("revision {n} of scene {}", self.id)));
                }
                let r = read_revision(&self.dir, n)?;
                Ok(Some((n, Arc::new(records_to_trajectories(r.trajectories)?))))
            }
        }
    }

    pub fn frame(&self, frame: usize, decimate: usize, revision: Option<u32>) -> Result<FrameView, ApiError> {
        if decimate == 0 {
            return Err(ApiError::BadRequest("decimate must be at least 1".into()));
        }
        let sweep = self
            .log
            .sweeps
            .get(frame)
            .ok_or_else(|| ApiError::NotFound(format!("frame {frame} of scene {}", self.id)))?;
        let gt_boxes: BTreeMap<u64, BoxBEV> = self
            .gt
            .iter()
            .filter_map(|t| t.detections.iter().find(|d| d.frame == frame).map(|d| (t.id, d.bbox())))
            .collect();
        let boxes = |ts: &[Trajectory]| -> Vec<BoxView> {
            ts.iter()
                .filter_map(|t| {
                    let d = t.detections.iter().find(|d| d.frame == frame)?;
                    let iou = d.gt_id.and_then(|g| gt_boxes.get(&g)).map(|g| box_iou_bev(&d.bbox(), g));
                    Some(BoxView {
                        id: t.id,
                        x: d.pose.x,
                        y: d.pose.y,
                        theta: d.pose.theta,
                        w: d.size.w,
                        l: d.size.l,
                        score: d.score,
                        iou,
                    })
                })
                .collect()
        };
        let refined = self.refined(revision)?;
        let init = boxes(&self.read().current);
        Ok(FrameView {
            scene: self.id.clone(),
            frame,
            t: sweep.t,
            ego: sweep.ego,
            decimate,
            total_points: sweep.points.len(),
            points: sweep.points.iter().step_by(decimate).map(|p| [p.x, p.y, p.z, p.t]).collect(),
            gt: boxes(&self.gt),
            init,
            refined: refined.as_ref().map(|(_, ts)| boxes(ts)).unwrap_or_default(),
            refined_revision: refined.map(|(n, _)| n),
        })
    }

    /// Revision 0 is the current trajectories, flagged on the fly.
    pub fn trajectories(&self, revision: u32, static_cfg: &PathBranchConfig) -> Result<TrajectoriesView, ApiError> {
        let ts: Vec<Trajectory> = if revision == 0 {
            let mut cur = self.current();
            flag_static(&mut cur, static_cfg);
            cur
        } else {
            let (_, ts) = self.refined(Some(revision))?.expect("explicit revision resolves");
            ts.as_ref().clone()
        };
        let trajectories = ts
            .iter()
            .map(|t| {
                let ious = auto4d_core::eval::metrics::per_box_iou(t, &self.gt);
                let record = TrajectoryRecord::from(t);
                TrajectoryView {
                    id: t.id,
                    static_flag: t.static_flag,
                    frames: record
                        .frames
                        .into_iter()
                        .zip(ious)
                        .map(|(record, iou)| FrameIou { record, iou })
                        .collect(),
                }
            })
            .collect();
        Ok(TrajectoriesView {
            scene: self.id.clone(),
            revision,
            trajectories,
        })
    }

    /// Validates, journals (with fsync) and only then applies a link.
    pub fn link(&self, cmd: &LinkCommand) -> Result<LinkResponse, ApiError> {
        if let Some(s) = &cmd.scene {
            if *s != self.id {
                return Err(ApiError::BadRequest(format!("command names scene {s}, path names {}", self.id)));
            }
        }
        let mut st = self.write();
        let (next, merged) = apply_link(&st.current, cmd.a, cmd.b)?;
        let entry = JournalEntry {
            seq: st.edits + 1,
            a: cmd.a,
            b: cmd.b,
            merged,
            annotator: cmd.annotator.clone(),
            timestamp_ms: cmd.timestamp_ms.unwrap_or_else(now_ms),
        };
        append_journal(&self.dir.join(JOURNAL), &entry)?;
        st.current = next;
        st.edits = entry.seq;
        Ok(LinkResponse {
            merged,
            trajectories: st.current.len(),
            seq: entry.seq,
        })
    }

    /// Claims the scene for job `job`; returns the trajectories and journal
    /// length it will refine.
    pub(super) fn begin_job(&self, job: u64) -> Result<(Vec<Trajectory>, usize), ApiError> {
        let mut st = self.write();
        if let Some(j) = st.active_job {
            return Err(ApiError::Conflict(format!("job {j} is already active for scene {}", self.id)));
        }
        st.active_job = Some(job);
        Ok((st.current.clone(), st.edits))
    }

    pub(super) fn end_job(&self) {
        self.write().active_job = None;
    }

    /// Refines `trajectories` and stores the result as the next revision.
    pub(super) fn refine(
        &self,
        models: &RefineModels,
        trajectories: &[Trajectory],
        job: u64,
        edits: usize,
    ) -> Result<(u32, EvalTable, EvalTable), ApiError> {
        let refined = auto4d_refine(&self.log, trajectories, &models.size, Some(&models.path), Align::Corner)?;
        let before = eval_labels(trajectories, &self.gt);
        let after = eval_labels(&refined, &self.gt);
        let mut st = self.write();
        let n = st.revisions.last().map_or(1, |n| n + 1);
        let file = RevisionFile {
            revision: n,
            job,
            edits,
            before: before.clone(),
            after: after.clone(),
            trajectories: refined.iter().map(TrajectoryRecord::from).collect(),
        };
        fs::create_dir_all(self.dir.join(REVISIONS))?;
        let mut f = OpenOptions::new().write(true).create_new(true).open(revision_path(&self.dir, n))?;
        f.write_all(&serde_json::to_vec_pretty(&file).map_err(|e| ApiError::Internal(e.to_string()))?)?;
        f.sync_all()?;
        st.revisions.push(n);
        st.latest = Some((n, Arc::new(refined), after.clone()));
        Ok((n, before, after))
    }

    pub fn revision(&self, n: u32) -> Result<RevisionFile, ApiError> {
        if !self.read().revisions.contains(&n) {
            return Err(ApiError::NotFound(format!("revision {n} of scene {}", self.id)));
        }
        read_revision(&self.dir, n)
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn records_to_trajectories(records: Vec<TrajectoryRecord>) -> Result<Vec<Trajectory>, ApiError> {
    Ok(records
        .into_iter()
        .map(Trajectory::try_from)
        .collect::<auto4d_core::Result<Vec<_>>>()?)
}

fn append_journal(path: &Path, entry: &JournalEntry) -> Result<(), ApiError> {
    let mut line = serde_json::to_string(entry).map_err(|e| ApiError::Internal(e.to_string()))?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    f.sync_all()?;
    Ok(())
}

/// Journal entries in order. A final line without its newline is a write
/// that never completed and is ignored.
pub fn read_journal(path: &Path) -> Result<Vec<JournalEntry>, ApiError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    if complete.len() < text.len() {
        log::warn!("{}: ignoring incomplete final edit", path.display());
    }
    complete
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| ApiError::Internal(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn list_revisions(dir: &Path) -> Result<Vec<u32>, ApiError> {
    let rdir = dir.join(REVISIONS);
    if !rdir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(rdir)? {
        let name = entry?.file_name();
        let n = name
            .to_str()
            .and_then(|n| n.strip_prefix("rev_"))
            .and_then(|n| n.strip_suffix(".json"))
            .and_then(|n| n.parse::<u32>().ok());
        out.extend(n);
    }
    out.sort_unstable();
    Ok(out)
}

fn read_revision(dir: &Path, n: u32) -> Result<RevisionFile, ApiError> {
    let path = revision_path(dir, n);
    let bytes = fs::read(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| ApiError::Internal(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use auto4d_core::{Detection, Pose2D, Size2D};

    fn traj(id: u64, frames: std::ops::Range<usize>) -> Trajectory {
        Trajectory::new(
            id,
            frames
                .map(|k| Detection {
                    pose: Pose2D::new(k as f64, 0.0, 0.0),
                    size: Size2D::new(2.0, 4.0).unwrap(),
                    t: 0.1 * k as f64,
                    frame: k,
                    score: 0.5,
                    gt_id: Some(1),
                })
                .collect(),
        )
    }

    #[test]
    fn link_keeps_the_smaller_id_in_place() {
        let cur = vec![traj(7, 0..3), traj(2, 5..8), traj(4, 3..5)];
        let (out, id) = apply_link(&cur, 7, 4).unwrap();
        assert_eq!(id, 4);
        assert_eq!(out.iter().map(|t| t.id).collect::<Vec<_>>(), vec![2, 4]);
        assert_eq!(out[1].len(), 5);
        assert!(out[1].is_time_ordered());
    }

    #[test]
    fn link_errors_map_to_status_classes() {
        let cur = vec![traj(1, 0..3), traj(2, 2..5)];
        assert!(matches!(apply_link(&cur, 1, 1), Err(ApiError::BadRequest(_))));
        assert!(matches!(apply_link(&cur, 1, 9), Err(ApiError::NotFound(_))));
        assert!(matches!(apply_link(&cur, 1, 2), Err(ApiError::Conflict(_))));
    }

    #[test]
    fn torn_final_journal_line_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(JOURNAL);
        let e = JournalEntry {
            seq: 1,
            a: 3,
            b: 4,
            merged: 3,
            annotator: "x".into(),
            timestamp_ms: 0,
        };
        append_journal(&path, &e).unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"seq\":2,\"a\"").unwrap();
        assert_eq!(read_journal(&path).unwrap(), vec![e]);
    }
}
