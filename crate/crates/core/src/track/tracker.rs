//! Frame-to-frame association by center distance with globally optimal matching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{Detection, Trajectory};

use super::hungarian::hungarian_match;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    /// Pairs whose centers are further apart than this are never associated, m.
    pub gate_distance: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { gate_distance: 2.0 }
    }
}

/// Associates per-frame detections into trajectories.
///
/// Tracks live only while they are matched in every consecutive frame; an
/// unmatched track ends for good and an unmatched detection opens a new one.
/// Trajectory ids count up from 1 in creation order.
pub fn track(frames: &[Vec<Detection>], cfg: &TrackerConfig) -> Result<Vec<Trajectory>> {
    if !(cfg.gate_distance > 0.0) {
        return Err(Error::InvalidConfig("gate distance must be positive".into()));
    }
    let mut tracks: Vec<Trajectory> = Vec::new();
    let mut active: Vec<usize> = Vec::new();
    for dets in frames {
        let cost: Vec<Vec<f64>> = active
            .iter()
            .map(|&ti| {
                let last = tracks[ti].detections.last().expect("active tracks are non-empty");
                dets.iter()
                    .map(|d| {
                        let dist = (d.pose.x - last.pose.x).hypot(d.pose.y - last.pose.y);
                        if dist <= cfg.gate_distance {
                            dist
                        } else {
                            f64::INFINITY
                        }
                    })
                    .collect()
            })
            .collect();
        let assignment = if active.is_empty() {
            None
        } else {
            Some(hungarian_match(&cost))
        };
        let mut next_active = Vec::with_capacity(dets.len());
        let mut det_taken = vec![false; dets.len()];
        if let Some(a) = &assignment {
            for &(r, c) in &a.pairs {
                let ti = active[r];
                tracks[ti].detections.push(dets[c]);
                det_taken[c] = true;
                next_active.push(ti);
            }
        }
        for (c, d) in dets.iter().enumerate() {
            if !det_taken[c] {
                tracks.push(Trajectory::new(tracks.len() as u64 + 1, vec![*d]));
                next_active.push(tracks.len() - 1);
            }
        }
        next_active.sort_unstable();
        active = next_active;
    }
    Ok(tracks)
}

/// Groups detections by frame index into `n_frames` buckets.
pub fn bucket_by_frame(dets: impl IntoIterator<Item = Detection>, n_frames: usize) -> Vec<Vec<Detection>> {
    let mut out = vec![Vec::new(); n_frames];
    for d in dets {
        if d.frame < n_frames {
            out[d.frame].push(d);
        }
    }
    out
}
