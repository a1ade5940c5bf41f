//! Detections and trajectories, the unit the refinement stages operate on.

use serde::{Deserialize, Serialize};

use crate::geom::{BoxBEV, Pose2D, Size2D};

/// One box observation of one object at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub pose: Pose2D,
    pub size: Size2D,
    pub t: f64,
    pub frame: usize,
    pub score: f64,
    /// Ground-truth identity this box was generated from, when known.
    pub gt_id: Option<u64>,
}

impl Detection {
    pub fn bbox(&self) -> BoxBEV {
        BoxBEV::new(self.pose, self.size)
    }

    pub fn with_box(mut self, b: BoxBEV) -> Self {
        self.pose = b.pose;
        self.size = b.size;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    /// Time-ordered, at most one per frame.
    pub detections: Vec<Detection>,
    pub static_flag: Option<bool>,
}

impl Trajectory {
    pub fn new(id: u64, detections: Vec<Detection>) -> Self {
        Self {
            id,
            detections,
            static_flag: None,
        }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.detections.iter().map(|d| d.frame)
    }

    /// Index of the highest-score detection; the earliest wins ties.
    pub fn argmax_score(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, d) in self.detections.iter().enumerate() {
            match best {
                Some(b) if self.detections[b].score >= d.score => {}
                _ => best = Some(i),
            }
        }
        best
    }

    /// Most frequent ground-truth id among the detections (lowest id on ties).
    pub fn majority_gt_id(&self) -> Option<u64> {
        let mut counts = std::collections::BTreeMap::<u64, usize>::new();
        for id in self.detections.iter().filter_map(|d| d.gt_id) {
            *counts.entry(id).or_default() += 1;
        }
        counts
            .into_iter()
            .fold(None, |best: Option<(u64, usize)>, (id, n)| match best {
                Some((_, bn)) if bn >= n => best,
                _ => Some((id, n)),
            })
            .map(|(id, _)| id)
    }

    pub fn is_time_ordered(&self) -> bool {
        self.detections
            .windows(2)
            .all(|w| w[0].t < w[1].t && w[0].frame < w[1].frame)
    }
}
