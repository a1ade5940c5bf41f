//! Synthetic driving scenes with ground-truth 4D labels, LiDAR sweeps and a
//! detector-noise model that produces the noisy initialization.

pub mod bicycle;
pub mod fragment;
pub mod lidar;
pub mod noise;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::{intersection_area, BoxBEV, Pose2D, Size2D};
use crate::label::{Detection, Trajectory};
use crate::seed;

pub use bicycle::Control;
pub use fragment::{fragment_tracks, Fragmented};
pub use lidar::{lidar_sample, LidarConfig, Sweep, Target};
pub use noise::{inject_detection_noise, FrameContext, NoiseConfig};

/// A simulated vehicle. Its footprint is drawn once and never changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub id: u64,
    pub size: Size2D,
    pub height: f64,
    pub wheelbase: f64,
    pub start: Pose2D,
    /// Control applied when advancing from frame k to k+1.
    pub controls: Vec<Control>,
    pub static_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoSpec {
    pub start: Pose2D,
    pub controls: Vec<Control>,
    pub wheelbase: f64,
    pub size: Size2D,
}

/// Bounds for randomly generated traffic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficConfig {
    pub min_vehicles: usize,
    pub max_vehicles: usize,
    pub min_static_fraction: f64,
    pub max_static_fraction: f64,
    pub ego_speed_range: (f64, f64),
    /// Relative speed range of same-direction traffic w.r.t. the ego.
    pub relative_speed_range: (f64, f64),
    pub oncoming_speed_range: (f64, f64),
    /// Peak heading deviation of the sinusoidal lane wander, rad.
    pub max_heading_wander: f64,
    /// Peak speed oscillation, m/s.
    pub max_speed_wobble: f64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            min_vehicles: 8,
            max_vehicles: 20,
            min_static_fraction: 0.3,
            max_static_fraction: 0.5,
            ego_speed_range: (0.0, 8.0),
            relative_speed_range: (-2.0, 2.0),
            oncoming_speed_range: (4.0, 10.0),
            max_heading_wander: 0.05,
            max_speed_wobble: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehiclePlan {
    Random(TrafficConfig),
    Explicit { ego: EgoSpec, vehicles: Vec<VehicleSpec> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_frames: usize,
    /// Seconds between sweeps.
    pub dt: f64,
    pub plan: VehiclePlan,
    pub lidar: LidarConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_frames: 250,
            dt: 0.1,
            plan: VehiclePlan::Random(TrafficConfig::default()),
            lidar: LidarConfig::default(),
        }
    }
}

impl SceneConfig {
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Everything the simulator knows about one scene.
#[derive(Debug, Clone)]
pub struct SceneLog {
    pub sweeps: Vec<Sweep>,
    pub gt_trajectories: Vec<Trajectory>,
    pub seed: u64,
    pub config_digest: String,
    /// Per frame: number of returns each vehicle produced.
    pub visible_points: Vec<BTreeMap<u64, usize>>,
}

impl SceneLog {
    pub fn n_frames(&self) -> usize {
        self.sweeps.len()
    }

    pub fn ego_poses(&self) -> Vec<Pose2D> {
        self.sweeps.iter().map(|s| s.ego).collect()
    }

    pub fn sweep(&self, frame: usize) -> Option<&Sweep> {
        self.sweeps.get(frame)
    }

    /// Per-frame ego pose and visibility, as consumed by the noise model.
    pub fn frame_context(&self) -> Vec<FrameContext> {
        self.sweeps
            .iter()
            .zip(&self.visible_points)
            .map(|(s, v)| FrameContext {
                ego: s.ego,
                visible_points: v.clone(),
            })
            .collect()
    }
}

/// Lane-keeping wander: heading follows `H·sin(ωt + φ)` around the lane
/// direction, so lateral drift stays bounded. Returns the initial heading
/// offset and the per-frame controls.
fn wander_controls(
    rng: &mut impl Rng,
    n: usize,
    dt: f64,
    speed: f64,
    wheelbase: f64,
    cfg: &TrafficConfig,
) -> (f64, Vec<Control>) {
    let tau = std::f64::consts::TAU;
    let amp = rng.random_range(0.0..=cfg.max_heading_wander);
    let omega = tau / rng.random_range(4.0..10.0);
    let phase = rng.random_range(0.0..tau);
    let wobble = rng.random_range(0.0..=cfg.max_speed_wobble).min(0.8 * speed);
    let wobble_omega = tau / rng.random_range(5.0..15.0);
    let wobble_phase = rng.random_range(0.0..tau);
    let controls = (0..n)
        .map(|k| {
            // controls are held over [t, t + dt); aim at the mid-interval yaw rate
            let t = (k as f64 + 0.5) * dt;
            let v = speed + wobble * (wobble_omega * t + wobble_phase).sin();
            let rate = amp * omega * (omega * t + phase).cos();
            Control::new(v, (rate * wheelbase / v).atan())
        })
        .collect();
    (amp * phase.sin(), controls)
}

fn overlaps(a: &BoxBEV, b: &BoxBEV) -> bool {
    intersection_area(a, b) > 0.0
}

fn random_plan(cfg: &TrafficConfig, n_frames: usize, dt: f64, seed: u64) -> (EgoSpec, Vec<VehicleSpec>) {
    let mut rng = seed::rng(seed, seed::stream::VEHICLES);
    let ego_speed = rng.random_range(cfg.ego_speed_range.0..=cfg.ego_speed_range.1);
    let ego = EgoSpec {
        start: Pose2D::IDENTITY,
        controls: vec![Control::new(ego_speed, 0.0)],
        wheelbase: 2.8,
        size: Size2D { w: 1.9, l: 4.6 },
    };
    let travel = ego_speed * dt * n_frames as f64;
    let n = rng.random_range(cfg.min_vehicles..=cfg.max_vehicles);
    let frac = rng.random_range(cfg.min_static_fraction..=cfg.max_static_fraction);
    let n_static = (frac * n as f64).round() as usize;

    let mut placed: Vec<BoxBEV> = vec![BoxBEV::new(ego.start, ego.size)];
    let mut vehicles = Vec::with_capacity(n);
    for i in 0..n {
        let is_static = i < n_static;
        for _attempt in 0..200 {
            let size = Size2D {
                w: rng.random_range(1.7..2.1),
                l: rng.random_range(4.0..5.2),
            };
            let height = rng.random_range(1.4..1.9);
            let (start, controls) = if is_static {
                let y = if rng.random_bool(0.5) { -8.0 } else { 12.0 };
                let heading = if rng.random_bool(0.5) { 0.0 } else { std::f64::consts::PI };
                let x = rng.random_range(-30.0..travel + 30.0);
                let jitter = rng.random_range(-0.15..0.15);
                (Pose2D::new(x, y + rng.random_range(-0.3..0.3), heading + jitter), Vec::new())
            } else if rng.random_bool(0.7) {
                let lane = [-3.5, 0.0, 3.5][rng.random_range(0..3)];
                let x = rng.random_range(-30.0..40.0);
                let speed = (ego_speed
                    + rng.random_range(cfg.relative_speed_range.0..=cfg.relative_speed_range.1))
                .max(1.0);
                let (h0, controls) = wander_controls(&mut rng, n_frames, dt, speed, 0.6 * size.l, cfg);
                (Pose2D::new(x, lane, h0), controls)
            } else {
                let speed = rng.random_range(cfg.oncoming_speed_range.0..=cfg.oncoming_speed_range.1);
                let x = rng.random_range(20.0..(travel + speed * dt * n_frames as f64 * 0.8).max(40.0));
                let (h0, controls) = wander_controls(&mut rng, n_frames, dt, speed, 0.6 * size.l, cfg);
                (Pose2D::new(x, 7.0, std::f64::consts::PI + h0), controls)
            };
            let b = BoxBEV::new(start, size);
            // keep a little clearance from everything already placed
            let probe = BoxBEV::new(start, size.scaled(1.2));
            if placed.iter().any(|p| overlaps(p, &probe)) {
                continue;
            }
            placed.push(b);
            vehicles.push(VehicleSpec {
                id: vehicles.len() as u64 + 1,
                size,
                height,
                wheelbase: 0.6 * size.l,
                start,
                controls,
                static_flag: is_static,
            });
            break;
        }
    }
    (ego, vehicles)
}

fn check_explicit(ego: &EgoSpec, vehicles: &[VehicleSpec]) -> Result<()> {
    let mut boxes = vec![(0u64, BoxBEV::new(ego.start, ego.size))];
    for v in vehicles {
        Size2D::new(v.size.w, v.size.l)?;
        if !(v.height > 0.0 && v.wheelbase > 0.0) {
            return Err(Error::InvalidConfig(format!("vehicle {} has non-positive height or wheelbase", v.id)));
        }
        boxes.push((v.id, BoxBEV::new(v.start, v.size)));
    }
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            if overlaps(&boxes[i].1, &boxes[j].1) {
                return Err(Error::VehicleOverlap {
                    a: boxes[i].0,
                    b: boxes[j].0,
                });
            }
        }
    }
    let mut ids: Vec<u64> = vehicles.iter().map(|v| v.id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != vehicles.len() {
        return Err(Error::InvalidConfig("duplicate vehicle ids".into()));
    }
    Ok(())
}

/// Resolves the vehicle plan into concrete specs (random traffic is drawn from `seed`).
pub fn resolve_plan(config: &SceneConfig, seed: u64) -> Result<(EgoSpec, Vec<VehicleSpec>)> {
    match &config.plan {
        VehiclePlan::Random(t) => {
            if t.min_vehicles == 0 || t.max_vehicles < t.min_vehicles {
                return Err(Error::InvalidConfig("vehicle count range must be ≥ 1".into()));
            }
            Ok(random_plan(t, config.n_frames, config.dt, seed))
        }
        VehiclePlan::Explicit { ego, vehicles } => {
            if vehicles.is_empty() {
                return Err(Error::InvalidConfig("scene needs at least one vehicle".into()));
            }
            check_explicit(ego, vehicles)?;
            Ok((ego.clone(), vehicles.clone()))
        }
    }
}

/// Simulates a scene. A ground-truth box exists for every frame in which the
/// vehicle returned at least one LiDAR point.
pub fn simulate_scene(config: &SceneConfig, seed: u64) -> Result<SceneLog> {
    if config.n_frames < 2 {
        return Err(Error::InvalidConfig("scene needs at least 2 frames".into()));
    }
    if !(config.dt > 0.0) || !(config.lidar.angular_resolution > 0.0) {
        return Err(Error::InvalidConfig("dt and angular resolution must be positive".into()));
    }
    let (ego, vehicles) = resolve_plan(config, seed)?;
    let n = config.n_frames;
    let ego_poses = bicycle::rollout(ego.start, &ego.controls, ego.wheelbase, config.dt, n);
    let tracks: Vec<Vec<Pose2D>> = vehicles
        .iter()
        .map(|v| bicycle::rollout(v.start, &v.controls, v.wheelbase, config.dt, n))
        .collect();

    let mut sweeps = Vec::with_capacity(n);
    let mut visible = Vec::with_capacity(n);
    let mut gt: Vec<Vec<Detection>> = vec![Vec::new(); vehicles.len()];
    for k in 0..n {
        let t = k as f64 * config.dt;
        let targets: Vec<Target> = vehicles
            .iter()
            .zip(&tracks)
            .map(|(v, tr)| Target {
                id: v.id,
                bbox: BoxBEV::new(tr[k], v.size),
                height: v.height,
            })
            .collect();
        let s = lidar_sample(&targets, &ego_poses[k], k, t, &config.lidar, seed);
        let mut counts = BTreeMap::<u64, usize>::new();
        for &l in &s.labels {
            *counts.entry(l).or_default() += 1;
        }
        for (i, v) in vehicles.iter().enumerate() {
            if counts.get(&v.id).copied().unwrap_or(0) > 0 {
                gt[i].push(Detection {
                    pose: tracks[i][k],
                    size: v.size,
                    t,
                    frame: k,
                    score: 1.0,
                    gt_id: Some(v.id),
                });
            }
        }
        sweeps.push(s.sweep);
        visible.push(counts);
    }
    let gt_trajectories = vehicles
        .iter()
        .zip(gt)
        .filter(|(_, d)| !d.is_empty())
        .map(|(v, d)| Trajectory {
            id: v.id,
            detections: d,
            static_flag: Some(v.static_flag),
        })
        .collect();
    Ok(SceneLog {
        sweeps,
        gt_trajectories,
        seed,
        config_digest: config.digest(),
        visible_points: visible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneConfig {
        SceneConfig {
            n_frames: 40,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = simulate_scene(&small(), 5).unwrap();
        let b = simulate_scene(&small(), 5).unwrap();
        assert_eq!(a.sweeps, b.sweeps);
        assert_eq!(a.gt_trajectories, b.gt_trajectories);
        let c = simulate_scene(&small(), 6).unwrap();
        assert_ne!(a.sweeps, c.sweeps);
    }

    #[test]
    fn gt_sizes_constant_and_points_in_range() {
        let cfg = small();
        let log = simulate_scene(&cfg, 2).unwrap();
        assert!(!log.gt_trajectories.is_empty());
        for tr in &log.gt_trajectories {
            let s0 = tr.detections[0].size;
            assert!(tr.detections.iter().all(|d| d.size == s0));
            assert!(tr.is_time_ordered());
        }
        for s in &log.sweeps {
            assert!(s.points.iter().all(|p| {
                (p.x - s.ego.x).hypot(p.y - s.ego.y) <= cfg.lidar.max_range + 1e-4
                    && p.t == s.t as f32 as f64
            }));
        }
        for w in log.sweeps.windows(2) {
            assert!((w[1].t - w[0].t - cfg.dt).abs() < 1e-9);
        }
    }

    fn explicit(vehicles: Vec<VehicleSpec>) -> SceneConfig {
        SceneConfig {
            n_frames: 20,
            plan: VehiclePlan::Explicit {
                ego: EgoSpec {
                    start: Pose2D::IDENTITY,
                    controls: vec![],
                    wheelbase: 2.8,
                    size: Size2D { w: 1.9, l: 4.6 },
                },
                vehicles,
            },
            ..SceneConfig::default()
        }
    }

    fn vehicle(id: u64, x: f64, y: f64, controls: Vec<Control>) -> VehicleSpec {
        VehicleSpec {
            id,
            size: Size2D { w: 2.0, l: 4.5 },
            height: 1.6,
            wheelbase: 2.7,
            start: Pose2D::new(x, y, 0.0),
            controls,
            static_flag: false,
        }
    }

    #[test]
    fn overlap_rejected() {
        let cfg = explicit(vec![vehicle(1, 10.0, 0.0, vec![]), vehicle(2, 11.0, 0.5, vec![])]);
        assert!(matches!(simulate_scene(&cfg, 0), Err(Error::VehicleOverlap { a: 1, b: 2 })));
        let cfg = explicit(vec![]);
        assert!(simulate_scene(&cfg, 0).is_err());
        let mut cfg = explicit(vec![vehicle(1, 10.0, 0.0, vec![])]);
        cfg.n_frames = 1;
        assert!(simulate_scene(&cfg, 0).is_err());
    }

    #[test]
    fn static_vehicle_constant_pose() {
        let cfg = explicit(vec![
            vehicle(1, 10.0, 4.0, vec![Control::new(0.0, 0.0)]),
            vehicle(2, -12.0, -4.0, vec![Control::new(5.0, 0.0)]),
        ]);
        let log = simulate_scene(&cfg, 1).unwrap();
        let st = &log.gt_trajectories[0];
        assert_eq!(st.detections.len(), 20);
        assert!(st.detections.iter().all(|d| d.pose == st.detections[0].pose));
        let mv = &log.gt_trajectories[1];
        for w in mv.detections.windows(2) {
            assert!((w[1].pose.x - w[0].pose.x - 0.5).abs() < 1e-9);
        }
    }
}
