use super::*;
use crate::geom::{box_iou_bev, BoxBEV, Point4};
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
                controls: vec![Control::new(3.0, 0.0)],
                wheelbase: 2.8,
                size: Size2D { w: 1.9, l: 4.6 },
            },
            vehicles: vec![vehicle(1, 12.0, 5.0, 0.3, 0.0), vehicle(2, -10.0, -4.0, 0.0, 6.0)],
        },
        ..SceneConfig::default()
    };
    simulate_scene(&cfg, 11).unwrap()
}

fn with_flag(mut t: Trajectory, flag: bool) -> Trajectory {
    t.static_flag = Some(flag);
    t
}

fn obs_of(points: &[(f64, f64, f64)]) -> ObjectObservation {
    ObjectObservation {
        trajectory_id: 0,
        points: points
            .iter()
            .map(|&(x, y, z)| ObsPoint {
                p: Point3::new(x, y, z),
                frame: 0,
            })
            .collect(),
    }
}

#[test]
fn single_point_at_origin_marks_center_cell() {
    let cfg = SizeBranchConfig::default();
    let g = rasterize_bev(&obs_of(&[(0.01, 0.01, 0.5)]), &cfg);
    assert_eq!(g.occupied(), 1);
    assert_eq!(g.get(0, 128, 128), 1.0);
    assert_eq!(g.dropped, 0);
}

#[test]
fn raster_is_binary() {
    let cfg = SizeBranchConfig::default();
    let g = rasterize_bev(&obs_of(&[(0.01, 0.01, 2.0), (0.02, 0.03, 2.1)]), &cfg);
    assert_eq!(g.occupied(), 1);
    assert_eq!(g.get(2, 128, 128), 1.0);
}

#[test]
fn points_outside_window_are_counted() {
    let cfg = SizeBranchConfig::default();
    let g = rasterize_bev(&obs_of(&[(7.0, 0.0, 1.0), (0.0, -6.5, 1.0), (1.0, 1.0, 1.0)]), &cfg);
    assert_eq!(g.dropped, 2);
    assert_eq!(g.occupied(), 1);
}

#[test]
fn rectangle_perimeter_traced_within_one_cell() {
    let cfg = SizeBranchConfig::default();
    let (hw, hl) = (0.95, 2.2);
    let mut pts = Vec::new();
    for i in 0..=400 {
        let s = i as f64 / 400.0;
        let x = -hl + 2.0 * hl * s;
        let y = -hw + 2.0 * hw * s;
        pts.extend([(x, hw, 1.0), (x, -hw, 1.0), (hl, y, 1.0), (-hl, y, 1.0)]);
    }
    let g = rasterize_bev(&obs_of(&pts), &cfg);
    for r in 0..g.rows {
        for c in 0..g.cols {
            if g.get(1, r, c) == 0.0 {
                continue;
            }
            let x = g.origin.0 + (c as f64 + 0.5) * g.cell;
            let y = g.origin.1 + (r as f64 + 0.5) * g.cell;
            // distance from the cell center to the rectangle outline
            let dx = (x.abs() - hl).max(0.0);
            let dy = (y.abs() - hw).max(0.0);
            let outside = dx.hypot(dy);
            let inside = (hl - x.abs()).min(hw - y.abs());
            let d = if outside > 0.0 { outside } else { inside.max(0.0) };
            assert!(d <= g.cell, "cell ({r},{c}) is {d} m from the outline");
        }
    }
    assert!(g.occupied() >= (2.0 * (2.0 * hw + 2.0 * hl) / cfg.cell) as usize);
}

#[test]
fn single_frame_observation_is_transformed_interior() {
    let log = scene(5);
    let gt = &log.gt_trajectories[0];
    let d = gt.detections[2];
    let traj = Trajectory::new(9, vec![d]);
    let obs = build_object_observation(&log, &traj).unwrap();
    let expect: Vec<Point4> = points_in_box(&log.sweeps[2].points, &d.bbox(), BOX_SCALE);
    assert_eq!(obs.points.len(), expect.len());
    assert!(!obs.is_empty());
    for (o, p) in obs.points.iter().zip(&expect) {
        let (x, y) = d.pose.apply_inverse(p.x, p.y);
        assert_eq!((o.p.x, o.p.y, o.p.z, o.frame), (x, y, p.z, 2));
    }
}

#[test]
fn zero_noise_static_fills_true_footprint() {
    let log = scene(12);
    let gt = &log.gt_trajectories[0];
    let obs = build_object_observation(&log, gt).unwrap();
    let xs = obs.points.iter().map(|p| p.p.x);
    let ys = obs.points.iter().map(|p| p.p.y);
    let (x0, x1) = xs.fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
    let (y0, y1) = ys.fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
    // the sensor sees two faces; the visible extent spans those faces
    let s = gt.detections[0].size;
    let tol = 0.1;
    assert!(x1 - x0 <= s.l + tol && y1 - y0 <= s.w + tol);
    assert!(x1 - x0 >= 0.5 * s.l && y1 - y0 >= 0.5 * s.w);
}

/// Object points: returns inside the true footprint dilated by three range-noise sigmas.
fn object_points(log: &SceneLog, d: &Detection) -> Vec<Point4> {
    let pad = 3.0 * 0.02 * 2.0;
    let b = BoxBEV::new(d.pose, Size2D::new(d.size.w + pad, d.size.l + pad).unwrap());
    points_in_box(&log.sweeps[d.frame].points, &b, 1.0)
}

#[test]
fn shrunken_boxes_still_capture_the_object() {
    let log = scene(8);
    let gt = &log.gt_trajectories[0];
    for (k, min_fraction) in [(1.0, 1.0), (0.9, 0.9)] {
        let (mut total, mut kept) = (0, 0);
        for d in &gt.detections {
            let ego = &log.sweeps[d.frame].ego;
            let shrunk = corner_align_resize(&d.bbox(), d.size.scaled(k), ego);
            for p in object_points(&log, d) {
                total += 1;
                kept += shrunk.contains_xy(p.x, p.y, BOX_SCALE) as usize;
            }
        }
        assert!(total > 500);
        let f = kept as f64 / total as f64;
        assert!(f >= min_fraction, "shrink {k}: kept {f}");
    }
}

#[test]
fn world_aggregation_matches_per_frame_without_noise() {
    let log = scene(10);
    let gt = with_flag(log.gt_trajectories[0].clone(), true);
    let a = build_object_observation(&log, &gt).unwrap();
    let b = build_object_observation_world(&log, &gt).unwrap();
    assert_eq!(a.points.len(), b.points.len());
    for (p, q) in a.points.iter().zip(&b.points) {
        assert!((p.p.x - q.p.x).abs() < 1e-9 && (p.p.y - q.p.y).abs() < 1e-9);
        assert_eq!(p.p.z, q.p.z);
    }
    let single = with_flag(Trajectory::new(3, vec![gt.detections[4]]), true);
    assert_eq!(
        build_object_observation(&log, &single).unwrap(),
        build_object_observation_world(&log, &single).unwrap()
    );
}

#[test]
fn world_aggregation_rejects_moving() {
    let log = scene(4);
    let mv = with_flag(log.gt_trajectories[1].clone(), false);
    assert!(matches!(
        build_object_observation_world(&log, &mv),
        Err(Error::NotStatic(2))
    ));
    let unknown = log.gt_trajectories[1].clone();
    let unknown = Trajectory {
        static_flag: None,
        ..unknown
    };
    assert!(build_object_observation_world(&log, &unknown).is_err());
    assert!(matches!(
        build_object_observation(&log, &Trajectory::new(1, vec![])),
        Err(Error::Empty(_))
    ));
}

/// Spread of an observation: occupied cells of its object-frame raster.
/// Repeated views of one surface collapse onto the same cells when aligned.
fn dispersion(obs: &ObjectObservation) -> usize {
    rasterize_bev(obs, &SizeBranchConfig::default()).occupied()
}

#[test]
fn world_aggregation_is_tighter_for_noisy_static() {
    let log = scene(20);
    let gt = &log.gt_trajectories[0];
    let noise = NoiseConfig {
        pos_sigma_base: 0.25,
        theta_sigma: 0.08,
        ..NoiseConfig::zero()
    };
    let noisy = with_flag(inject_detection_noise(gt, &noise, &log.frame_context(), 3), true);
    let per_frame = build_object_observation(&log, &noisy).unwrap();
    let world = build_object_observation_world(&log, &noisy).unwrap();
    assert!(dispersion(&world) < dispersion(&per_frame));
}

#[test]
fn zero_head_predicts_prior() {
    let cfg = SizeBranchConfig::default();
    let mut m = SizeModel::init(cfg.clone(), 4).unwrap();
    for (name, t) in m.params.iter_mut() {
        if name.starts_with(HEAD_PREFIX) {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let grid = rasterize_bev(&obs_of(&[(0.3, 0.2, 1.0), (-1.0, 0.5, 0.2)]), &cfg);
    let s = m.predict(&grid).unwrap();
    assert_eq!((s.w, s.l), cfg.prior);
}

#[test]
fn encoder_output_shape_and_zero_input() {
    let cfg = SizeBranchConfig::default();
    let m = SizeModel::init(cfg.clone(), 1).unwrap();
    let grid = rasterize_bev(&obs_of(&[]), &cfg);
    let run = |m: &SizeModel| {
        let mut g = Graph::inference();
        let f = m.encode(&mut g, &grid).unwrap();
        (g.shape(f).to_vec(), g.value(f).data.clone())
    };
    let (shape, zero_bias) = run(&m);
    assert_eq!(shape, vec![64, 32, 32]);
    assert!(zero_bias.iter().all(|&v| v == 0.0));

    // with biases set, the map depends on biases alone, not on first-layer weights
    let mut biased = m.clone();
    for (name, t) in biased.params.iter_mut() {
        if name.ends_with(".b") {
            t.data.iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * (i % 7) as f64);
        }
    }
    let mut rewired = biased.clone();
    let w = rewired.params.get_mut(&format!("{ENCODER_PREFIX}b0.c0.w")).unwrap();
    w.data.iter_mut().for_each(|v| *v = -*v + 0.3);
    let (_, a) = run(&biased);
    let (_, b) = run(&rewired);
    assert_eq!(a, b);
    assert!(a.iter().any(|&v| v != 0.0));
    assert!(cfg.encoder.receptive_field() > 50);
}

fn randomize_head(m: &mut SizeModel) {
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
fn far_points_do_not_change_prediction() {
    let cfg = SizeBranchConfig::default();
    let mut m = SizeModel::init(cfg.clone(), 2).unwrap();
    randomize_head(&mut m);
    let base = vec![(0.5, 0.3, 1.0), (-1.5, -0.7, 0.4), (2.0, 0.9, 1.4)];
    let mut far = base.clone();
    // the query sees 128 cells (6.4 m) around the origin at most
    far.extend([(6.3, 6.3, 1.0), (-6.35, 6.1, 2.0), (6.2, -6.3, 0.1)]);
    let a = m.predict(&rasterize_bev(&obs_of(&base), &cfg)).unwrap();
    let b = m.predict(&rasterize_bev(&obs_of(&far), &cfg)).unwrap();
    assert_eq!(a, b);
    let mut near = base.clone();
    near.push((0.0, 0.0, 1.0));
    let c = m.predict(&rasterize_bev(&obs_of(&near), &cfg)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn resize_rows_reproduce_apply_size() {
    let log = scene(10);
    let egos = log.ego_poses();
    let noisy = inject_detection_noise(
        &log.gt_trajectories[0],
        &NoiseConfig::default(),
        &log.frame_context(),
        7,
    );
    let size = Size2D::new(2.1, 4.7).unwrap();
    for align in [Align::Corner, Align::Center] {
        let (a, c) = resize_rows(&noisy.detections, &egos, align).unwrap();
        let applied = apply_size(&noisy, size, align, &egos).unwrap();
        for (i, d) in applied.detections.iter().enumerate() {
            let row: Vec<f64> = (0..5)
                .map(|j| c[i * 5 + j] + a[(i * 5 + j) * 2] * size.w + a[(i * 5 + j) * 2 + 1] * size.l)
                .collect();
            let want = [d.pose.x, d.pose.y, d.pose.theta, d.size.w, d.size.l];
            for (g, w) in row.iter().zip(want) {
                assert!((g - w).abs() < 1e-12, "{align:?}: {row:?} vs {want:?}");
            }
        }
    }
}

#[test]
fn apply_size_keeps_boxes_when_size_matches() {
    let log = scene(6);
    let gt = &log.gt_trajectories[1];
    let out = apply_size(gt, gt.detections[0].size, Align::Corner, &log.ego_poses()).unwrap();
    for (a, b) in out.detections.iter().zip(&gt.detections) {
        assert!(box_iou_bev(&a.bbox(), &b.bbox()) > 1.0 - 1e-12);
        assert!((a.pose.x - b.pose.x).abs() < 1e-12 && (a.pose.y - b.pose.y).abs() < 1e-12);
    }
}

#[test]
fn apply_size_sets_one_size() {
    let log = scene(6);
    let noisy = inject_detection_noise(
        &log.gt_trajectories[1],
        &NoiseConfig::default(),
        &log.frame_context(),
        1,
    );
    let s = Size2D::new(1.8, 4.0).unwrap();
    let out = apply_size(&noisy, s, Align::Corner, &log.ego_poses()).unwrap();
    assert!(out.detections.iter().all(|d| d.size == s));
    assert!(apply_size(&noisy, s, Align::Corner, &[]).is_err());
}

#[test]
fn corner_beats_center_on_corner_biased_shrink() {
    let log = scene(15);
    let egos = log.ego_poses();
    let noise = NoiseConfig {
        size_shrink_mean: 0.85,
        size_shrink_sigma: 0.03,
        corner_bias_strength: 1.0,
        ..NoiseConfig::zero()
    };
    for gt in &log.gt_trajectories {
        let noisy = inject_detection_noise(gt, &noise, &log.frame_context(), 5);
        let s = gt.detections[0].size;
        let corner = apply_size(&noisy, s, Align::Corner, &egos).unwrap();
        let center = apply_size(&noisy, s, Align::Center, &egos).unwrap();
        for ((c, m), g) in corner.detections.iter().zip(&center.detections).zip(&gt.detections) {
            let ic = box_iou_bev(&c.bbox(), &g.bbox());
            let im = box_iou_bev(&m.bbox(), &g.bbox());
            assert!(ic > im, "frame {}: corner {ic} center {im}", g.frame);
        }
    }
}

#[test]
fn align_parses() {
    assert_eq!("corner".parse::<Align>().unwrap(), Align::Corner);
    assert_eq!("center".parse::<Align>().unwrap(), Align::Center);
    assert!("middle".parse::<Align>().is_err());
    assert_eq!(serde_json::to_string(&Align::Center).unwrap(), "\"center\"");
}

#[test]
fn config_validation() {
    assert!(SizeBranchConfig::default().validate().is_ok());
    let bad = SizeBranchConfig {
        window_cells: 250,
        ..SizeBranchConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = SizeBranchConfig {
        height_bins: 3,
        ..SizeBranchConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn checkpoint_round_trip_through_from_params() {
    let m = SizeModel::init(SizeBranchConfig::default(), 8).unwrap();
    let bytes = m.params.to_bytes();
    let back = SizeModel::from_params(m.cfg.clone(), ParamSet::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.params.to_bytes(), bytes);
    let mut partial = ParamSet::new();
    for (name, t) in m.params.iter().skip(1) {
        partial.insert(name.clone(), t.clone());
    }
    assert!(matches!(
        SizeModel::from_params(m.cfg.clone(), partial),
        Err(Error::MissingParam(_))
    ));
}
