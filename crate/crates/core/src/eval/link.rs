//! Fragment linking: the discrete correction a human annotator supplies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{Detection, Trajectory};

/// Frame claimed by two fragments of one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameConflict {
    pub a: u64,
    pub b: u64,
    pub frame: usize,
}

/// Concatenates fragments in time order under `id`. A frame present in more
/// than one fragment keeps the higher-score box (the earlier fragment on
/// ties) and is reported. Boxes are copied unchanged.
pub fn merge_fragments(fragments: &[&Trajectory], id: u64) -> (Trajectory, Vec<FrameConflict>) {
    let mut by_frame: BTreeMap<usize, (u64, Detection)> = BTreeMap::new();
    let mut conflicts = Vec::new();
    for f in fragments {
        for d in &f.detections {
            match by_frame.get(&d.frame) {
                Some((owner, kept)) => {
                    conflicts.push(FrameConflict {
                        a: *owner,
                        b: f.id,
                        frame: d.frame,
                    });
                    if d.score > kept.score {
                        by_frame.insert(d.frame, (f.id, *d));
                    }
                }
                None => {
                    by_frame.insert(d.frame, (f.id, *d));
                }
            }
        }
    }
    let merged = Trajectory {
        id,
        detections: by_frame.into_values().map(|(_, d)| d).collect(),
        static_flag: None,
    };
    (merged, conflicts)
}

/// Links exactly two fragments, refusing when they share a frame.
pub fn link_pair(a: &Trajectory, b: &Trajectory, id: u64) -> Result<Trajectory> {
    if a.id == b.id {
        return Err(Error::InvalidConfig(format!("cannot link fragment {} to itself", a.id)));
    }
    let (merged, conflicts) = merge_fragments(&[a, b], id);
    match conflicts.first() {
        Some(c) => Err(Error::LinkConflict {
            a: c.a,
            b: c.b,
            frame: c.frame,
        }),
        None => Ok(merged),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkOutcome {
    pub trajectories: Vec<Trajectory>,
    pub conflicts: Vec<FrameConflict>,
    /// Number of link operations performed (fragments absorbed).
    pub links: usize,
}

/// Simulated annotator: groups fragments by their majority ground-truth
/// identity and merges each group; fragments without provenance stay as
/// they are. Merged trajectories take the smallest id of their group.
pub fn simulate_annotator_link(fragments: &[Trajectory]) -> LinkOutcome {
    let mut groups: BTreeMap<u64, Vec<&Trajectory>> = BTreeMap::new();
    let mut out = Vec::new();
    for f in fragments {
        match f.majority_gt_id() {
            Some(g) => groups.entry(g).or_default().push(f),
            None => out.push(f.clone()),
        }
    }
    let mut conflicts = Vec::new();
    let mut links = 0;
    for (_, group) in groups {
        if group.len() == 1 {
            out.push(group[0].clone());
            continue;
        }
        links += group.len() - 1;
        let id = group.iter().map(|t| t.id).min().expect("non-empty group");
        let (merged, c) = merge_fragments(&group, id);
        conflicts.extend(c);
        out.push(merged);
    }
    out.sort_by_key(|t| t.id);
    LinkOutcome {
        trajectories: out,
        conflicts,
        links,
    }
}
