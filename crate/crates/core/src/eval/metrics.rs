//! Label quality: fraction of ground-truth boxes recovered at each IoU threshold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geom::{box_iou_bev, BoxBEV};
use crate::label::Trajectory;

pub const THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub thresholds: Vec<f64>,
    /// Ground-truth boxes matched with IoU at or above each threshold.
    pub hits: Vec<usize>,
    /// Ground-truth boxes considered; unmatched ones count as misses.
    pub total: usize,
    /// Ground-truth boxes that had any prediction for their (identity, frame).
    pub matched: usize,
    pub fractions: Vec<f64>,
}

impl EvalTable {
    pub fn from_ious(ious: &[Option<f64>]) -> Self {
        let hits: Vec<usize> = THRESHOLDS
            .iter()
            .map(|&t| ious.iter().filter(|i| matches!(i, Some(v) if *v >= t)).count())
            .collect();
        let total = ious.len();
        let fractions = hits
            .iter()
            .map(|&h| if total == 0 { 0.0 } else { h as f64 / total as f64 })
            .collect();
        Self {
            thresholds: THRESHOLDS.to_vec(),
            hits,
            total,
            matched: ious.iter().filter(|i| i.is_some()).count(),
            fractions,
        }
    }

    /// Fraction at `threshold`, which must be one of [`THRESHOLDS`].
    pub fn at(&self, threshold: f64) -> f64 {
        let i = self
            .thresholds
            .iter()
            .position(|&t| (t - threshold).abs() < 1e-12)
            .unwrap_or_else(|| panic!("threshold {threshold} is not tabulated"));
        self.fractions[i]
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Adds the counts of `other` (same thresholds).
    pub fn merge(&self, other: &EvalTable) -> EvalTable {
        let hits: Vec<usize> = self.hits.iter().zip(&other.hits).map(|(a, b)| a + b).collect();
        let total = self.total + other.total;
        Self {
            thresholds: self.thresholds.clone(),
            fractions: hits
                .iter()
                .map(|&h| if total == 0 { 0.0 } else { h as f64 / total as f64 })
                .collect(),
            hits,
            total,
            matched: self.matched + other.matched,
        }
    }

    pub fn empty() -> Self {
        Self::from_ious(&[])
    }
}

/// Best predicted box per (ground-truth id, frame): highest score wins,
/// the first one seen on ties.
fn prediction_index(pred: &[Trajectory]) -> BTreeMap<(u64, usize), (f64, BoxBEV)> {
    let mut idx: BTreeMap<(u64, usize), (f64, BoxBEV)> = BTreeMap::new();
    for d in pred.iter().flat_map(|t| &t.detections) {
        let Some(id) = d.gt_id else { continue };
        match idx.get(&(id, d.frame)) {
            Some((s, _)) if *s >= d.score => {}
            _ => {
                idx.insert((id, d.frame), (d.score, d.bbox()));
            }
        }
    }
    idx
}

fn ious_for<'a>(
    idx: &BTreeMap<(u64, usize), (f64, BoxBEV)>,
    gt: impl Iterator<Item = &'a Trajectory>,
) -> Vec<Option<f64>> {
    gt.flat_map(|t| t.detections.iter().map(move |d| (t.id, d)))
        .map(|(id, d)| idx.get(&(id, d.frame)).map(|(_, b)| box_iou_bev(b, &d.bbox())))
        .collect()
}

/// Matches predictions to ground truth through the identity each detection
/// was generated from, so association errors do not enter the score.
pub fn eval_labels(pred: &[Trajectory], gt: &[Trajectory]) -> EvalTable {
    EvalTable::from_ious(&ious_for(&prediction_index(pred), gt.iter()))
}

/// Tables for ground-truth static and moving objects, in that order.
pub fn breakdown_static_moving(pred: &[Trajectory], gt: &[Trajectory]) -> (EvalTable, EvalTable) {
    let idx = prediction_index(pred);
    let is_static = |t: &&Trajectory| t.static_flag == Some(true);
    (
        EvalTable::from_ious(&ious_for(&idx, gt.iter().filter(is_static))),
        EvalTable::from_ious(&ious_for(&idx, gt.iter().filter(|t| !is_static(t)))),
    )
}

/// Per-box IoU of each prediction against its ground truth, `None` when the
/// prediction has no ground-truth counterpart.
pub fn per_box_iou(pred: &Trajectory, gt: &[Trajectory]) -> Vec<Option<f64>> {
    let lookup: BTreeMap<(u64, usize), BoxBEV> = gt
        .iter()
        .flat_map(|t| t.detections.iter().map(move |d| ((t.id, d.frame), d.bbox())))
        .collect();
    pred.detections
        .iter()
        .map(|d| {
            d.gt_id
                .and_then(|id| lookup.get(&(id, d.frame)))
                .map(|g| box_iou_bev(&d.bbox(), g))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{corner_align_resize, Pose2D, Size2D};
    use crate::label::Detection;

    fn gt_traj(id: u64, n: usize, is_static: bool) -> Trajectory {
        let dets = (0..n)
            .map(|k| Detection {
                pose: Pose2D::new(3.0 * k as f64 + id as f64 * 10.0, 2.0, 0.2),
                size: Size2D { w: 2.0, l: 4.5 },
                t: 0.1 * k as f64,
                frame: k,
                score: 1.0,
                gt_id: Some(id),
            })
            .collect();
        Trajectory {
            id,
            detections: dets,
            static_flag: Some(is_static),
        }
    }

    #[test]
    fn perfect_predictions() {
        let gt = vec![gt_traj(1, 5, true), gt_traj(2, 3, false)];
        let t = eval_labels(&gt, &gt);
        assert_eq!(t.fractions, vec![1.0; 5]);
        assert_eq!((t.total, t.matched), (8, 8));
    }

    #[test]
    fn nested_shrink_lands_between_thresholds() {
        let gt = vec![gt_traj(1, 6, false)];
        let ego = Pose2D::new(-20.0, -10.0, 0.0);
        let mut pred = gt.clone();
        for d in &mut pred[0].detections {
            let b = corner_align_resize(&d.bbox(), d.size.scaled(0.9), &ego);
            // oracle: nested box sharing a corner, IoU = 0.9 · 0.9
            let iou = box_iou_bev(&b, &d.bbox());
            assert!((iou - 0.81).abs() < 1e-9);
            *d = d.with_box(b);
        }
        let t = eval_labels(&pred, &gt);
        assert_eq!(t.at(0.8), 1.0);
        assert_eq!(t.at(0.9), 0.0);
    }

    #[test]
    fn missing_boxes_count_as_failures() {
        let gt = vec![gt_traj(1, 4, false)];
        let mut pred = gt.clone();
        pred[0].detections.truncate(3);
        let t = eval_labels(&pred, &gt);
        assert_eq!(t.at(0.5), 0.75);
        assert_eq!((t.total, t.matched), (4, 3));
        assert_eq!(eval_labels(&[], &gt).at(0.5), 0.0);
    }

    #[test]
    fn duplicates_resolved_by_score() {
        let gt = vec![gt_traj(1, 1, false)];
        let mut bad = gt[0].clone();
        bad.id = 7;
        bad.detections[0].pose.x += 3.0;
        bad.detections[0].score = 0.9;
        let mut good = gt[0].clone();
        good.detections[0].score = 0.95;
        assert_eq!(eval_labels(&[bad.clone(), good.clone()], &gt).at(0.9), 1.0);
        good.detections[0].score = 0.5;
        assert_eq!(eval_labels(&[bad, good], &gt).at(0.9), 0.0);
    }

    #[test]
    fn breakdown_partitions_counts() {
        let gt = vec![gt_traj(1, 5, true), gt_traj(2, 3, false), gt_traj(3, 2, true)];
        let (s, m) = breakdown_static_moving(&gt, &gt);
        assert_eq!(s.total + m.total, eval_labels(&gt, &gt).total);
        assert_eq!((s.total, m.total), (7, 3));
        let all_static = vec![gt_traj(1, 5, true)];
        let (_, m) = breakdown_static_moving(&all_static, &all_static);
        assert!(m.is_empty());
    }

    #[test]
    fn merge_adds_counts() {
        let gt = vec![gt_traj(1, 5, true), gt_traj(2, 3, false)];
        let (s, m) = breakdown_static_moving(&gt, &gt);
        assert_eq!(s.merge(&m), eval_labels(&gt, &gt));
    }
}
