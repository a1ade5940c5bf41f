use super::*;
use crate::geom::Size2D;
use crate::sim::{
    inject_detection_noise, simulate_scene, Control, EgoSpec, NoiseConfig, SceneConfig,
    VehiclePlan, VehicleSpec,
};

fn vehicle(id: u64, x: f64, y: f64, theta: f64, speed: f64) -> VehicleSpec {
    VehicleSpec {
        id,
        size: Size2D { w: 1.9, l: 4.4 },
        height: 1.5,
        wheelbase: 2.7,
        start: Pose2D::new(x, y, theta),
        controls: vec![Control::new(speed, 0.0)],
        static_flag: speed == 0.0,
    }
}

fn scene(n_frames: usize) -> SceneLog {
    let cfg = SceneConfig {
        n_frames,
        plan: VehiclePlan::Explicit {
            ego: EgoSpec {
                start: Pose2D::IDENTITY,
                controls: vec![Control::new(2.0, 0.0)],
                wheelbase: 2.8,
                size: Size2D { w: 1.9, l: 4.6 },
            },
            vehicles: vec![vehicle(1, 12.0, 5.0, 0.3, 0.0), vehicle(2, -8.0, -4.0, 0.2, 6.0)],
        },
        ..SceneConfig::default()
    };
    simulate_scene(&cfg, 21).unwrap()
}

fn det(frame: usize, x: f64, y: f64, theta: f64) -> Detection {
    Detection {
        pose: Pose2D::new(x, y, theta),
        size: Size2D { w: 2.0, l: 4.0 },
        t: frame as f64 * 0.1,
        frame,
        score: 0.5,
        gt_id: None,
    }
}

fn randomize_head(m: &mut PathModel) {
    for (name, t) in m.params.iter_mut() {
        if name.starts_with(HEAD_PREFIX) {
            t.data
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v += 0.05 * ((i * 37 % 11) as f64 - 5.0) / 5.0);
        }
    }
}

#[test]
fn motion_features_examples() {
    let still: Vec<_> = (0..4).map(|k| det(k, 1.0, 2.0, 0.3)).collect();
    assert!(motion_features(&still).iter().all(|m| *m == [0.0; 3]));

    let cv: Vec<_> = (0..5).map(|k| det(k, k as f64, 0.0, 0.0)).collect();
    let m = motion_features(&cv);
    assert_eq!(m[0], [0.0; 3]);
    assert!(m[1..].iter().all(|v| *v == [1.0, 0.0, 0.0]));

    let wrap = motion_features(&[det(0, 0.0, 0.0, 3.1), det(1, 0.0, 0.0, -3.1)]);
    let expect = 2.0 * std::f64::consts::PI - 6.2;
    assert!((wrap[1][2] - expect).abs() < 1e-12);
    assert!((wrap[1][2] - 0.083).abs() < 1e-3);
}

#[test]
fn window_starts_cover_everything() {
    assert_eq!(window_starts(7, 10, 5), vec![0]);
    assert_eq!(window_starts(10, 10, 5), vec![0]);
    assert_eq!(window_starts(20, 10, 5), vec![0, 5, 10]);
    assert_eq!(window_starts(23, 10, 5), vec![0, 5, 10, 13]);
    for n in 1..60 {
        let starts = window_starts(n, 10, 5);
        let mut covered = vec![false; n];
        for s in starts {
            for c in covered.iter_mut().skip(s).take(10) {
                *c = true;
            }
        }
        assert!(covered.iter().all(|&c| c));
    }
}

#[test]
fn pose_refinement_examples() {
    let d = det(0, 3.0, -1.0, 0.0);
    assert_eq!(apply_pose_refinement(&d, &PoseDelta::default(), false), d);
    let r = apply_pose_refinement(
        &d,
        &PoseDelta {
            dx: 0.1,
            dy: 0.0,
            dtheta: 0.0,
        },
        false,
    );
    assert!((r.pose.x - 3.4).abs() < 1e-12 && r.pose.y == -1.0);
    assert_eq!(r.size, d.size);

    let lit = apply_pose_refinement(
        &d,
        &PoseDelta {
            dx: 0.1,
            dy: 0.5,
            dtheta: 0.0,
        },
        true,
    );
    assert!((lit.pose.x - 3.3).abs() < 1e-12 && (lit.pose.y + 1.5).abs() < 1e-12);
}

#[test]
fn pose_refinement_commutes_with_rigid_motion() {
    let t = Pose2D::new(-40.0, 17.0, 2.4);
    let delta = PoseDelta {
        dx: 0.03,
        dy: -0.07,
        dtheta: 0.02,
    };
    for (x, y, th) in [(1.0, 2.0, 0.3), (-20.0, 4.0, -2.9), (0.0, 0.0, 3.1)] {
        let d = det(0, x, y, th);
        let moved = Detection {
            pose: t.compose(&d.pose),
            ..d
        };
        let a = t.compose(&apply_pose_refinement(&d, &delta, false).pose);
        let b = apply_pose_refinement(&moved, &delta, false).pose;
        assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
        assert!(wrap_angle(a.theta - b.theta).abs() < 1e-9);
    }
}

#[test]
fn refinement_rows_reproduce_update() {
    let dets = [det(0, 3.0, -1.0, 0.4), det(1, -7.0, 2.0, -2.2)];
    let deltas = [[0.05, -0.02, 0.01], [-0.1, 0.2, -0.03]];
    for literal in [false, true] {
        let (a, c) = refinement_rows(&dets, literal);
        for (i, d) in dets.iter().enumerate() {
            let pd = PoseDelta {
                dx: deltas[i][0],
                dy: deltas[i][1],
                dtheta: deltas[i][2],
            };
            let r = apply_pose_refinement(d, &pd, literal);
            let row: Vec<f64> = (0..5)
                .map(|j| c[i * 5 + j] + (0..3).map(|q| a[(i * 5 + j) * 3 + q] * deltas[i][q]).sum::<f64>())
                .collect();
            assert!((row[0] - r.pose.x).abs() < 1e-12);
            assert!((row[1] - r.pose.y).abs() < 1e-12);
            assert!(wrap_angle(row[2] - r.pose.theta).abs() < 1e-12);
            assert_eq!((row[3], row[4]), (d.size.w, d.size.l));
        }
    }
}

#[test]
fn single_detection_window_is_its_interior() {
    let log = scene(6);
    let d = log.gt_trajectories[1].detections[3];
    let obs = build_path_observation(&log, &[d]).unwrap();
    let want = points_in_box(&log.sweeps[3].points, &d.bbox(), BOX_SCALE);
    assert_eq!(obs.points.iter().map(|p| p.p).collect::<Vec<_>>(), want);
    assert!(obs.points.iter().all(|p| p.slot == 0));
    assert_eq!(obs.frames, vec![3]);
    assert!(build_path_observation(&log, &[]).is_err());
}

#[test]
fn moving_object_slices_advance() {
    let log = scene(10);
    let gt = &log.gt_trajectories[1];
    let obs = build_path_observation(&log, &gt.detections).unwrap();
    let (s, c) = gt.detections[0].pose.theta.sin_cos();
    let mut along = Vec::new();
    for slot in 0..gt.len() {
        let pts: Vec<_> = obs.points.iter().filter(|p| p.slot == slot).collect();
        assert!(!pts.is_empty());
        let n = pts.len() as f64;
        let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.p.x / n, b + p.p.y / n));
        along.push(mx * c + my * s);
    }
    assert!(along.windows(2).all(|w| w[1] > w[0]), "{along:?}");
}

#[test]
fn raster_channels_follow_time_slots() {
    let cfg = PathBranchConfig::default();
    let dets: Vec<_> = (0..10).map(|k| det(k, 0.0, 0.0, 0.0)).collect();
    let grid = cfg.window_grid(&dets).unwrap();
    assert_eq!(grid.channels, 40);
    assert_eq!(grid.rows % 8, 0);
    assert_eq!(grid.cols % 8, 0);
    let obs = PathObservation {
        points: vec![PathPoint {
            p: Point4::new(0.3, 0.2, 1.0, 0.3),
            slot: 3,
        }],
        frames: (0..10).collect(),
    };
    let g = rasterize_path(&obs, grid, &cfg);
    assert_eq!(g.occupied(), 1);
    let (r, c) = g.cell_of(0.3, 0.2).unwrap();
    assert_eq!(g.get(3 * 4 + 1, r, c), 1.0);
}

#[test]
fn static_object_fills_same_cells_each_slot() {
    let log = scene(10);
    let cfg = PathBranchConfig::default();
    let gt = &log.gt_trajectories[0];
    let obs = build_path_observation(&log, &gt.detections).unwrap();
    let g = rasterize_path(&obs, cfg.window_grid(&gt.detections).unwrap(), &cfg);
    let footprint = |slot: usize| -> std::collections::BTreeSet<(usize, usize)> {
        let mut set = std::collections::BTreeSet::new();
        for r in 0..g.rows {
            for c in 0..g.cols {
                if (0..4).any(|h| g.get(slot * 4 + h, r, c) != 0.0) {
                    set.insert((r, c));
                }
            }
        }
        set
    };
    let first = footprint(0);
    assert!(!first.is_empty());
    for slot in 1..10 {
        let other = footprint(slot);
        let inter = first.intersection(&other).count() as f64;
        let union = first.union(&other).count() as f64;
        assert!(inter / union > 0.5, "slot {slot}: {}", inter / union);
    }
}

#[test]
fn window_grid_contains_every_center() {
    let cfg = PathBranchConfig::default();
    let dets: Vec<_> = (0..10).map(|k| det(k, 0.9 * k as f64, 0.2 * k as f64, 0.2)).collect();
    let grid = cfg.window_grid(&dets).unwrap();
    for d in &dets {
        let b = BoxBEV::new(d.pose, d.size.scaled(BOX_SCALE));
        for c in b.corners() {
            assert!(grid.cell_of(c.x, c.y).is_some());
        }
    }
}

#[test]
fn zero_head_gives_zero_delta() {
    let log = scene(12);
    let m = PathModel::init(PathBranchConfig::default(), 3).unwrap();
    let dets = &log.gt_trajectories[1].detections;
    let deltas = m.predict_window(&log, &dets[..10]).unwrap();
    assert_eq!(deltas.len(), 10);
    assert!(deltas.iter().all(|d| *d == PoseDelta::default()));
}

#[test]
fn temporal_encoder_preserves_length() {
    let m = PathModel::init(PathBranchConfig::default(), 3).unwrap();
    for len in [1, 3, 4, 7, 10] {
        let mut g = Graph::inference();
        let t = m.temporal(&mut g, &vec![[0.0; 3]; len]).unwrap();
        assert_eq!(g.shape(t), &[32, len]);
        // zero input with zero biases stays zero
        assert!(g.value(t).data.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn decode_depends_on_motion_features() {
    let log = scene(12);
    let mut m = PathModel::init(PathBranchConfig::default(), 4).unwrap();
    randomize_head(&mut m);
    let noise = NoiseConfig {
        pos_sigma_base: 0.1,
        ..NoiseConfig::zero()
    };
    let noisy = inject_detection_noise(&log.gt_trajectories[1], &noise, &log.frame_context(), 9);
    let window = &noisy.detections[..10];
    let grid = m.rasterize(&log, window).unwrap();
    let run = |motion: &[[f64; 3]]| {
        let mut g = Graph::inference();
        let f = m.encode(&mut g, &grid).unwrap();
        let t = m.temporal(&mut g, motion).unwrap();
        let out = m.decode(&mut g, f, t, &grid, window).unwrap();
        g.value(out).data.clone()
    };
    let motion = motion_features(window);
    let mut permuted = motion.clone();
    permuted[1..].reverse();
    assert_ne!(run(&motion), run(&permuted));
}

#[test]
fn refine_preserves_frames_and_broadcasts_static() {
    let log = scene(23);
    let mut m = PathModel::init(PathBranchConfig::default(), 5).unwrap();
    randomize_head(&mut m);
    let noise = NoiseConfig {
        pos_sigma_base: 0.1,
        theta_sigma: 0.01,
        ..NoiseConfig::zero()
    };
    let ctx = log.frame_context();
    let mut st = inject_detection_noise(&log.gt_trajectories[0], &noise, &ctx, 1);
    st.static_flag = Some(true);
    let out = m.refine_trajectory(&log, &st).unwrap();
    assert_eq!(out.len(), st.len());
    assert!(out.detections.iter().all(|d| d.pose == out.detections[0].pose));

    let mut mv = inject_detection_noise(&log.gt_trajectories[1], &noise, &ctx, 2);
    mv.static_flag = Some(false);
    let out = m.refine_trajectory(&log, &mv).unwrap();
    for (a, b) in out.detections.iter().zip(&mv.detections) {
        assert_eq!((a.frame, a.t, a.size), (b.frame, b.t, b.size));
    }
    assert!(out.detections.iter().zip(&mv.detections).any(|(a, b)| a.pose != b.pose));

    let short = Trajectory {
        detections: mv.detections[..4].to_vec(),
        ..mv.clone()
    };
    assert_eq!(m.refine_trajectory(&log, &short).unwrap().len(), 4);
}

#[test]
fn static_classification() {
    let log = scene(30);
    let kal = KalmanConfig::default();
    let noise = NoiseConfig {
        pos_sigma_base: 0.05,
        ..NoiseConfig::zero()
    };
    let ctx = log.frame_context();
    let st = inject_detection_noise(&log.gt_trajectories[0], &noise, &ctx, 3);
    let mv = inject_detection_noise(&log.gt_trajectories[1], &noise, &ctx, 3);
    assert!(classify_static(&st, 1.0, &kal));
    assert!(!classify_static(&mv, 1.0, &kal));
    assert!(!classify_static(&st, 0.0, &kal));
}

#[test]
fn config_validation() {
    assert!(PathBranchConfig::default().validate().is_ok());
    let bad = PathBranchConfig {
        window: 8,
        ..PathBranchConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = PathBranchConfig {
        stride: 11,
        ..PathBranchConfig::default()
    };
    assert!(bad.validate().is_err());
}
