//! Property-based checks of the geometric, tracking and evaluation invariants.

use std::f64::consts::PI;

use proptest::prelude::*;

use auto4d_core::bev::{BevGrid, SparseGrid};
use auto4d_core::eval::{eval_labels, simulate_annotator_link, EvalTable};
use auto4d_core::geom::{
    box_iou_bev, closest_corner_index, corner_align_resize, resize_about_corner, wrap_angle,
};
use auto4d_core::path_branch::{apply_pose_refinement, motion_features, PoseDelta};
use auto4d_core::sim::fragment_tracks;
use auto4d_core::size_branch::{apply_size, Align};
use auto4d_core::track::{hungarian_match, kalman_smooth, KalmanConfig};
use auto4d_core::{BoxBEV, Detection, Pose2D, Size2D, Trajectory};

fn pose() -> impl Strategy<Value = Pose2D> {
    (-20.0..20.0f64, -20.0..20.0f64, -PI..PI).prop_map(|(x, y, t)| Pose2D::new(x, y, t))
}

fn size() -> impl Strategy<Value = Size2D> {
    (0.5..3.0f64, 1.0..6.0f64).prop_map(|(w, l)| Size2D::new(w, l).unwrap())
}

fn bbox() -> impl Strategy<Value = BoxBEV> {
    (pose(), size()).prop_map(|(p, s)| BoxBEV::new(p, s))
}

/// A time-ordered trajectory with per-frame jitter in pose and size.
fn trajectory(id: u64, max_len: usize) -> impl Strategy<Value = Trajectory> {
    (
        pose(),
        size(),
        prop::collection::vec((-0.3..0.3f64, -0.3..0.3f64, -0.1..0.1f64, 0.8..1.1f64, 0.1..1.0f64), 1..max_len),
    )
        .prop_map(move |(p0, s0, steps)| {
            let dets = steps
                .iter()
                .enumerate()
                .map(|(k, &(dx, dy, dt, k_size, score))| Detection {
                    pose: Pose2D::new(p0.x + k as f64 * 0.8 + dx, p0.y + dy, p0.theta + dt),
                    size: Size2D::new(s0.w * k_size, s0.l * k_size).unwrap(),
                    t: k as f64 * 0.1,
                    frame: k,
                    score,
                    gt_id: Some(id),
                })
                .collect();
            Trajectory::new(id, dets)
        })
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let ab = box_iou_bev(&a, &b);
        let ba = box_iou_bev(&b, &a);
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((box_iou_bev(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn iou_is_rigid_invariant(a in bbox(), b in bbox(), t in pose()) {
        let before = box_iou_bev(&a, &b);
        let after = box_iou_bev(&a.transformed(&t), &b.transformed(&t));
        prop_assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn wrap_angle_lands_in_half_open_interval(a in -100.0..100.0f64) {
        let w = wrap_angle(a);
        prop_assert!(w > -std::f64::consts::PI - 1e-12 && w <= std::f64::consts::PI + 1e-12);
        prop_assert!(((a - w) / std::f64::consts::TAU).fract().abs() < 1e-9
            || (1.0 - ((a - w) / std::f64::consts::TAU).fract().abs()) < 1e-9);
    }

    #[test]
    fn resizing_about_a_corner_pins_it(b in bbox(), s in size(), idx in 0usize..4) {
        let r = resize_about_corner(&b, s, idx);
        prop_assert!(r.corner(idx).dist2(&b.corner(idx)) < 1e-18);
        prop_assert_eq!(r.size, s);
        prop_assert!((wrap_angle(r.pose.theta - b.pose.theta)).abs() < 1e-12);
    }

    #[test]
    fn corner_align_pins_the_corner_nearest_the_ego(b in bbox(), s in size(), ego in pose()) {
        let idx = closest_corner_index(&b, &ego);
        let r = corner_align_resize(&b, s, &ego);
        prop_assert!(r.corner(idx).dist2(&b.corner(idx)) < 1e-18);
    }

    #[test]
    fn apply_size_leaves_a_constant_size(t in trajectory(1, 30), s in size(), center in any::<bool>()) {
        let egos: Vec<Pose2D> = (0..t.len()).map(|k| Pose2D::new(k as f64, -5.0, 0.0)).collect();
        let align = if center { Align::Center } else { Align::Corner };
        let out = apply_size(&t, s, align, &egos).unwrap();
        prop_assert_eq!(out.len(), t.len());
        prop_assert!(out.detections.iter().all(|d| d.size == s));
        prop_assert!(out.detections.iter().zip(&t.detections).all(|(a, b)| a.frame == b.frame && a.score == b.score));
    }

    #[test]
    fn motion_features_integrate_back_to_the_path(t in trajectory(1, 30)) {
        let f = motion_features(&t.detections);
        prop_assert_eq!(f[0], [0.0; 3]);
        let first = t.detections[0].pose;
        let (mut x, mut y, mut th) = (first.x, first.y, first.theta);
        for (d, m) in t.detections.iter().zip(&f).skip(1) {
            x += m[0];
            y += m[1];
            th += m[2];
            prop_assert!((x - d.pose.x).abs() < 1e-9 && (y - d.pose.y).abs() < 1e-9);
            prop_assert!(wrap_angle(th - d.pose.theta).abs() < 1e-9);
        }
    }

    #[test]
    fn pose_refinement_keeps_size(b in bbox(), dx in -0.5..0.5f64, dy in -0.5..0.5f64, dt in -0.3..0.3f64, literal in any::<bool>()) {
        let d = Detection { pose: b.pose, size: b.size, t: 0.0, frame: 0, score: 1.0, gt_id: None };
        let r = apply_pose_refinement(&d, &PoseDelta { dx, dy, dtheta: dt }, literal);
        prop_assert_eq!(r.size, d.size);
        let same = apply_pose_refinement(&d, &PoseDelta::default(), literal);
        prop_assert!((same.pose.x - d.pose.x).abs() < 1e-12 && (same.pose.y - d.pose.y).abs() < 1e-12);
    }

    #[test]
    fn eval_table_is_monotone(
        gt in trajectory(1, 25),
        jitter in prop::collection::vec((-0.6..0.6f64, -0.6..0.6f64, 0.7..1.2f64), 25),
    ) {
        let pred: Vec<Detection> = gt
            .detections
            .iter()
            .zip(&jitter)
            .filter(|(_, j)| j.2 < 1.15)
            .map(|(d, j)| Detection {
                pose: Pose2D::new(d.pose.x + j.0, d.pose.y + j.1, d.pose.theta),
                size: Size2D::new(d.size.w * j.2, d.size.l).unwrap(),
                ..*d
            })
            .collect();
        let table: EvalTable = eval_labels(&[Trajectory::new(5, pred)], std::slice::from_ref(&gt));
        prop_assert_eq!(table.total, gt.len());
        prop_assert!(table.fractions.windows(2).all(|w| w[0] >= w[1]));
        let again = eval_labels(&[], std::slice::from_ref(&gt));
        prop_assert!(again.fractions.iter().all(|f| *f == 0.0));
    }

    #[test]
    fn linking_never_changes_box_geometry(
        ts in prop::collection::vec(trajectory(0, 20), 1..5),
        rate in 0.0..1.0f64,
        seed in any::<u64>(),
    ) {
        let ts: Vec<Trajectory> = ts
            .into_iter()
            .enumerate()
            .map(|(i, mut t)| {
                t.id = i as u64;
                t.detections.iter_mut().for_each(|d| d.gt_id = Some(100 + i as u64));
                t
            })
            .collect();
        let frags = fragment_tracks(&ts, rate, 2, seed).trajectories;
        let linked = simulate_annotator_link(&frags).trajectories;
        let key = |d: &Detection| (d.gt_id, d.frame);
        let mut before: Vec<Detection> = frags.iter().flat_map(|t| t.detections.clone()).collect();
        let mut after: Vec<Detection> = linked.iter().flat_map(|t| t.detections.clone()).collect();
        before.sort_by_key(key);
        after.sort_by_key(key);
        prop_assert_eq!(&before, &after);
        prop_assert_eq!(linked.len(), ts.len());
        prop_assert!(linked.iter().all(Trajectory::is_time_ordered));
    }

    #[test]
    fn fragmenting_preserves_every_detection(t in trajectory(3, 40), seed in any::<u64>()) {
        let f = fragment_tracks(std::slice::from_ref(&t), 1.0, 1, seed);
        let mut all: Vec<Detection> = f.trajectories.iter().flat_map(|x| x.detections.clone()).collect();
        all.sort_by_key(|d| d.frame);
        prop_assert_eq!(all, t.detections.clone());
        prop_assert!(f.trajectories.iter().all(|x| f.provenance.get(&x.id) == Some(&t.id)));
    }

    #[test]
    fn hungarian_beats_the_identity_assignment(
        n in 1usize..7,
        values in prop::collection::vec(0.0..10.0f64, 49),
    ) {
        let cost: Vec<Vec<f64>> = (0..n).map(|r| values[r * 7..r * 7 + n].to_vec()).collect();
        let a = hungarian_match(&cost);
        let diagonal: f64 = (0..n).map(|i| cost[i][i]).sum();
        prop_assert_eq!(a.pairs.len(), n);
        prop_assert!(a.total <= diagonal + 1e-9);
        let mut cols: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        cols.sort_unstable();
        cols.dedup();
        prop_assert_eq!(cols.len(), n);
    }

    #[test]
    fn kalman_keeps_frames_and_fits_straight_lines(p in pose(), vx in -15.0..15.0f64, vy in -15.0..15.0f64, n in 2usize..40) {
        let dets: Vec<Detection> = (0..n)
            .map(|k| Detection {
                pose: Pose2D::new(p.x + vx * 0.1 * k as f64, p.y + vy * 0.1 * k as f64, p.theta),
                size: Size2D::new(1.9, 4.5).unwrap(),
                t: 0.1 * k as f64,
                frame: k,
                score: 0.5,
                gt_id: None,
            })
            .collect();
        let t = Trajectory::new(1, dets);
        let s = kalman_smooth(&t, &KalmanConfig::default());
        prop_assert_eq!(s.len(), t.len());
        for (a, b) in s.detections.iter().zip(&t.detections) {
            prop_assert_eq!(a.frame, b.frame);
            prop_assert!((a.pose.x - b.pose.x).abs() < 1e-6 && (a.pose.y - b.pose.y).abs() < 1e-6);
        }
    }

    #[test]
    fn sparse_grid_round_trips(points in prop::collection::vec((0usize..3, -4.0..4.0f64, -4.0..4.0f64), 0..200)) {
        let mut g = BevGrid::centered(3, 16, 24, 0.4, 0.5, -0.5);
        for (c, x, y) in points {
            g.mark(c, x, y);
        }
        prop_assert_eq!(SparseGrid::from_grid(&g).to_grid(), g);
    }
}
