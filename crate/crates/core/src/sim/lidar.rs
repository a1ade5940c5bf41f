//! 2.5D LiDAR: planar ray casting against vehicle footprints, vertical fill per hit.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geom::{BoxBEV, Point4, Pose2D};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarConfig {
    /// Azimuth step between rays, rad.
    pub angular_resolution: f64,
    pub max_range: f64,
    /// Std-dev of the Gaussian range error, m.
    pub range_noise: f64,
    /// Returns per azimuth hit, spread uniformly over the target height.
    pub beams_per_hit: usize,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            angular_resolution: 0.2_f64.to_radians(),
            max_range: 50.0,
            range_noise: 0.02,
            beams_per_hit: 4,
        }
    }
}

/// A reflecting object in the current frame.
#[derive(Debug, Clone, Copy)]
pub struct Target {
    pub id: u64,
    pub bbox: BoxBEV,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub frame: usize,
    pub t: f64,
    pub ego: Pose2D,
    /// World frame; every point carries the sweep time.
    pub points: Vec<Point4>,
}

/// A sweep plus the id of the target each point came from.
#[derive(Debug, Clone)]
pub struct LabeledSweep {
    pub sweep: Sweep,
    pub labels: Vec<u64>,
}

/// Entry distance of the ray `origin + s·dir` into `b`, if it enters from outside.
pub fn ray_box_entry(b: &BoxBEV, ox: f64, oy: f64, dx: f64, dy: f64) -> Option<f64> {
    let (lox, loy) = b.pose.apply_inverse(ox, oy);
    let (s, c) = b.pose.theta.sin_cos();
    let ldx = c * dx + s * dy;
    let ldy = -s * dx + c * dy;
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    for (o, d, half) in [(lox, ldx, 0.5 * b.size.l), (loy, ldy, 0.5 * b.size.w)] {
        if d.abs() < 1e-15 {
            if o.abs() > half {
                return None;
            }
        } else {
            let t1 = (-half - o) / d;
            let t2 = (half - o) / d;
            tmin = tmin.max(t1.min(t2));
            tmax = tmax.min(t1.max(t2));
        }
    }
    (tmin > 0.0 && tmax >= tmin).then_some(tmin)
}

#[inline]
fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Casts one full revolution from the ego position.
///
/// Coordinates are rounded to f32 precision so an in-memory sweep equals its
/// on-disk form bit for bit.
pub fn lidar_sample(
    targets: &[Target],
    ego: &Pose2D,
    frame: usize,
    t: f64,
    cfg: &LidarConfig,
    seed: u64,
) -> LabeledSweep {
    let mut rng = seed::rng(seed, seed::stream::LIDAR ^ ((frame as u64) << 16));
    let res = cfg.angular_resolution;
    let n_rays = (2.0 * PI / res).round().max(1.0) as usize;
    let phase = rng.random_range(0.0..res);
    let noise = Normal::new(0.0, cfg.range_noise.max(0.0)).expect("finite sigma");

    let near: Vec<&Target> = targets
        .iter()
        .filter(|tg| {
            let half_diag = 0.5 * tg.bbox.size.w.hypot(tg.bbox.size.l);
            let d = (tg.bbox.pose.x - ego.x).hypot(tg.bbox.pose.y - ego.y);
            d - half_diag <= cfg.max_range
        })
        .collect();

    let tq = f32_round(t);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for k in 0..n_rays {
        let a = phase + k as f64 * res;
        let (dy, dx) = a.sin_cos();
        let mut best: Option<(f64, &Target)> = None;
        for tg in &near {
            if let Some(s) = ray_box_entry(&tg.bbox, ego.x, ego.y, dx, dy) {
                if s <= cfg.max_range && best.is_none_or(|(bs, _)| s < bs) {
                    best = Some((s, tg));
                }
            }
        }
        let Some((range, tg)) = best else { continue };
        for _ in 0..cfg.beams_per_hit {
            let r = range + noise.sample(&mut rng);
            let z = rng.random_range(0.0..tg.height);
            if r <= 0.0 || r > cfg.max_range {
                continue;
            }
            points.push(Point4::new(
                f32_round(ego.x + dx * r),
                f32_round(ego.y + dy * r),
                f32_round(z),
                tq,
            ));
            labels.push(tg.id);
        }
    }
    LabeledSweep {
        sweep: Sweep {
            frame,
            t,
            ego: *ego,
            points,
        },
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Size2D;

    fn target(id: u64, x: f64, y: f64) -> Target {
        Target {
            id,
            bbox: BoxBEV::new(Pose2D::new(x, y, 0.0), Size2D::new(2.0, 4.0).unwrap()),
            height: 1.6,
        }
    }

    fn exact_cfg() -> LidarConfig {
        LidarConfig {
            range_noise: 0.0,
            ..LidarConfig::default()
        }
    }

    #[test]
    fn ray_box_hits_near_face() {
        let b = target(1, 10.0, 0.0).bbox;
        assert!((ray_box_entry(&b, 0.0, 0.0, 1.0, 0.0).unwrap() - 8.0).abs() < 1e-12);
        assert!(ray_box_entry(&b, 0.0, 0.0, -1.0, 0.0).is_none());
        assert!(ray_box_entry(&b, 0.0, 0.0, 0.0, 1.0).is_none());
    }

    #[test]
    fn only_ego_facing_edge_visible() {
        let s = lidar_sample(&[target(1, 10.0, 0.0)], &Pose2D::IDENTITY, 0, 0.0, &exact_cfg(), 3);
        assert!(!s.sweep.points.is_empty());
        for p in &s.sweep.points {
            // near face is x = 8; the far side (x = 12) and lateral faces are hidden
            assert!((p.x - 8.0).abs() < 1e-4, "{p:?}");
            assert!(p.z >= 0.0 && p.z <= 1.6);
            assert_eq!(p.t, 0.0);
        }
    }

    #[test]
    fn full_occlusion() {
        // a wide wall in front of a small box directly behind it
        let wall = Target {
            id: 1,
            bbox: BoxBEV::new(Pose2D::new(5.0, 0.0, 0.0), Size2D::new(20.0, 1.0).unwrap()),
            height: 2.0,
        };
        let s = lidar_sample(&[wall, target(2, 15.0, 0.0)], &Pose2D::IDENTITY, 0, 0.0, &exact_cfg(), 9);
        assert!(s.labels.iter().all(|&l| l == 1));
        assert!(!s.labels.is_empty());
    }

    #[test]
    fn points_within_range() {
        let cfg = LidarConfig {
            max_range: 20.0,
            range_noise: 0.5,
            ..LidarConfig::default()
        };
        let tg: Vec<Target> = (0..8).map(|i| target(i, 19.0 * (i as f64).cos(), 19.0 * (i as f64).sin())).collect();
        let ego = Pose2D::new(0.5, -0.5, 0.0);
        let s = lidar_sample(&tg, &ego, 4, 0.4, &cfg, 1);
        assert!(s
            .sweep
            .points
            .iter()
            .all(|p| (p.x - ego.x).hypot(p.y - ego.y) <= 20.0 + 1e-4));
    }

    #[test]
    fn hits_scale_inverse_with_range() {
        // Oracle: an isolated face subtends ~width/range, so hits ∝ 1/range.
        let cfg = LidarConfig::default();
        let count = |x: f64| -> f64 {
            (0..50)
                .map(|s| lidar_sample(&[target(1, x, 0.0)], &Pose2D::IDENTITY, 0, 0.0, &cfg, s).labels.len())
                .sum::<usize>() as f64
        };
        let ratio = count(20.0) / count(40.0);
        assert!((ratio - 2.0).abs() <= 0.4, "ratio {ratio}");
    }
}
