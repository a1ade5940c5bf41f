//! Synthetic trajectory fragmentation, the discrete error the annotator loop repairs.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;

use crate::label::Trajectory;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct Fragmented {
    pub trajectories: Vec<Trajectory>,
    /// Fragment id → id of the trajectory it was cut from (identity for uncut tracks).
    pub provenance: BTreeMap<u64, u64>,
}

/// Splits each trajectory, with probability `rate`, at `cuts` distinct
/// uniformly chosen positions. Fragments get fresh ids above every input id.
pub fn fragment_tracks(trajectories: &[Trajectory], rate: f64, cuts: usize, seed: u64) -> Fragmented {
    let mut rng = seed::rng(seed, seed::stream::FRAGMENT);
    let mut next_id = trajectories.iter().map(|t| t.id).max().map_or(0, |m| m + 1);
    let mut out = Vec::new();
    let mut provenance = BTreeMap::new();
    for tr in trajectories {
        let split = rng.random::<f64>() < rate;
        let n = tr.len();
        let k = cuts.min(n.saturating_sub(1));
        if !split || k == 0 {
            provenance.insert(tr.id, tr.id);
            out.push(tr.clone());
            continue;
        }
        // cut positions in 1..n: a cut at i starts a new fragment at detection i
        let mut at: Vec<usize> = sample(&mut rng, n - 1, k).into_iter().map(|i| i + 1).collect();
        at.sort_unstable();
        let mut start = 0;
        for end in at.into_iter().chain(std::iter::once(n)) {
            let id = next_id;
            next_id += 1;
            provenance.insert(id, tr.id);
            out.push(Trajectory {
                id,
                detections: tr.detections[start..end].to_vec(),
                static_flag: tr.static_flag,
            });
            start = end;
        }
    }
    Fragmented {
        trajectories: out,
        provenance,
    }
}
