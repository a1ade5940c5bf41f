//! Parameterized stand-in for an online detector: corner-preserving size
//! shrinkage, range- and speed-scaled pose jitter, dropouts and a score model.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{center_align_resize, corner_align_resize, BoxBEV, Pose2D, Size2D};
use crate::label::{Detection, Trajectory};
use crate::seed;

/// Logistic confidence in `(point count, range)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub bias: f64,
    pub point_coef: f64,
    pub range_coef: f64,
}

impl ScoreModel {
    pub fn score(&self, points: usize, range: f64) -> f64 {
        let z = self.bias + self.point_coef * points as f64 - self.range_coef * range;
        1.0 / (1.0 + (-z).exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Position std-dev at zero range and speed, m.
    pub pos_sigma_base: f64,
    /// m per m of range.
    pub pos_sigma_range_coef: f64,
    /// m per m/s of object speed (multi-sweep detectors smear moving objects).
    pub pos_sigma_speed_coef: f64,
    pub theta_sigma: f64,
    /// rad per m/s of object speed.
    pub theta_sigma_speed_coef: f64,
    /// Frame-to-frame AR(1) coefficient of the pose error. Detectors that
    /// read several past sweeps make errors that persist across frames.
    pub pose_noise_correlation: f64,
    /// Mean multiplicative size factor, below 1 for the usual under-estimate.
    pub size_shrink_mean: f64,
    pub size_shrink_sigma: f64,
    /// Additional shrink per m of range.
    pub size_shrink_range_coef: f64,
    /// Probability of a gross under-estimate in a frame.
    pub size_outlier_rate: f64,
    /// Extra factor applied in outlier frames.
    pub size_outlier_shrink: f64,
    /// Probability that the shrunken box stays pinned at the ego-facing corner.
    pub corner_bias_strength: f64,
    pub drop_rate: f64,
    /// Expected spurious detections per frame.
    pub false_positive_rate: f64,
    pub score: ScoreModel,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            pos_sigma_base: 0.02,
            pos_sigma_range_coef: 0.001,
            pos_sigma_speed_coef: 0.008,
            theta_sigma: 0.006,
            theta_sigma_speed_coef: 0.002,
            pose_noise_correlation: 0.8,
            size_shrink_mean: 0.97,
            size_shrink_sigma: 0.03,
            size_shrink_range_coef: 0.0003,
            size_outlier_rate: 0.05,
            size_outlier_shrink: 0.9,
            corner_bias_strength: 0.85,
            drop_rate: 0.0,
            false_positive_rate: 0.0,
            score: ScoreModel {
                bias: -1.0,
                point_coef: 0.02,
                range_coef: 0.04,
            },
        }
    }
}

impl NoiseConfig {
    /// No perturbation at all.
    pub fn zero() -> Self {
        Self {
            pos_sigma_base: 0.0,
            pos_sigma_range_coef: 0.0,
            pos_sigma_speed_coef: 0.0,
            theta_sigma: 0.0,
            theta_sigma_speed_coef: 0.0,
            size_shrink_mean: 1.0,
            size_shrink_sigma: 0.0,
            size_shrink_range_coef: 0.0,
            size_outlier_rate: 0.0,
            size_outlier_shrink: 1.0,
            corner_bias_strength: 0.0,
            drop_rate: 0.0,
            false_positive_rate: 0.0,
            ..Self::default()
        }
    }

    /// Same model with every noise variance multiplied by `factor`
    /// (standard deviations and the shrink deficit scale by `√factor`).
    pub fn with_variance_scale(&self, factor: f64) -> Self {
        let k = factor.sqrt();
        Self {
            pos_sigma_base: self.pos_sigma_base * k,
            pos_sigma_range_coef: self.pos_sigma_range_coef * k,
            pos_sigma_speed_coef: self.pos_sigma_speed_coef * k,
            theta_sigma: self.theta_sigma * k,
            theta_sigma_speed_coef: self.theta_sigma_speed_coef * k,
            size_shrink_mean: 1.0 - (1.0 - self.size_shrink_mean) * k,
            size_shrink_sigma: self.size_shrink_sigma * k,
            size_shrink_range_coef: self.size_shrink_range_coef * k,
            size_outlier_shrink: 1.0 - (1.0 - self.size_outlier_shrink) * k,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            self.pos_sigma_base,
            self.pos_sigma_range_coef,
            self.pos_sigma_speed_coef,
            self.theta_sigma,
            self.theta_sigma_speed_coef,
            self.size_shrink_sigma,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidConfig("noise sigmas must be ≥ 0".into()));
        }
        let rates = [
            self.corner_bias_strength,
            self.pose_noise_correlation,
            self.drop_rate,
            self.size_outlier_rate,
            self.false_positive_rate,
        ];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidConfig("noise rates must lie in [0, 1]".into()));
        }
        if !(self.size_shrink_mean > 0.0 && self.size_outlier_shrink > 0.0) {
            return Err(Error::InvalidConfig("shrink factors must be positive".into()));
        }
        Ok(())
    }
}

/// What the detector sees at one frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameContext {
    pub ego: Pose2D,
    pub visible_points: BTreeMap<u64, usize>,
}

fn speeds(gt: &Trajectory) -> Vec<f64> {
    let d = &gt.detections;
    (0..d.len())
        .map(|i| {
            let a = if i > 0 { i - 1 } else { i };
            let b = if i + 1 < d.len() { i + 1 } else { i };
            if a == b || d[b].t <= d[a].t {
                return 0.0;
            }
            let dist = (d[b].pose.x - d[a].pose.x).hypot(d[b].pose.y - d[a].pose.y);
            dist / (d[b].t - d[a].t)
        })
        .collect()
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Perturbs every box of a ground-truth trajectory. Randomness is drawn in a
/// fixed order per frame, so output depends only on `(gt, noise, frames, seed)`.
pub fn inject_detection_noise(
    gt: &Trajectory,
    noise: &NoiseConfig,
    frames: &[FrameContext],
    seed: u64,
) -> Trajectory {
    let mut rng = seed::rng(seed, seed::stream::NOISE ^ (gt.id << 8));
    let speed = speeds(gt);
    let mut out = Vec::with_capacity(gt.len());
    let rho = noise.pose_noise_correlation;
    let innov = (1.0 - rho * rho).sqrt();
    let mut err: Option<[f64; 3]> = None;
    for (d, &v) in gt.detections.iter().zip(&speed) {
        let ctx = frames.get(d.frame).cloned().unwrap_or_default();
        let ego = ctx.ego;
        let range = (d.pose.x - ego.x).hypot(d.pose.y - ego.y);
        let points = d
            .gt_id
            .and_then(|id| ctx.visible_points.get(&id).copied())
            .unwrap_or(0);

        let u_drop: f64 = rng.random();
        let mut shrink = [0.0; 2];
        for s in &mut shrink {
            let base = noise.size_shrink_mean - noise.size_shrink_range_coef * range
                + noise.size_shrink_sigma * normal(&mut rng);
            let outlier = rng.random::<f64>() < noise.size_outlier_rate;
            *s = (if outlier { base * noise.size_outlier_shrink } else { base }).clamp(0.3, 1.2);
        }
        let u_corner: f64 = rng.random();
        let fresh = [normal(&mut rng), normal(&mut rng), normal(&mut rng)];
        let e = match err {
            Some(p) => std::array::from_fn(|i| rho * p[i] + innov * fresh[i]),
            None => fresh,
        };
        err = Some(e);
        let [nx, ny, nt] = e;
        if u_drop < noise.drop_rate {
            continue;
        }

        let gt_box = d.bbox();
        let mut b: BoxBEV = if shrink == [1.0, 1.0] {
            gt_box
        } else {
            let size = Size2D {
                w: d.size.w * shrink[0],
                l: d.size.l * shrink[1],
            };
            if u_corner < noise.corner_bias_strength {
                corner_align_resize(&gt_box, size, &ego)
            } else {
                center_align_resize(&gt_box, size)
            }
        };
        let sigma = noise.pos_sigma_base + noise.pos_sigma_range_coef * range + noise.pos_sigma_speed_coef * v;
        let theta_sigma = noise.theta_sigma + noise.theta_sigma_speed_coef * v;
        if sigma > 0.0 || theta_sigma > 0.0 {
            b.pose = Pose2D::new(
                b.pose.x + sigma * nx,
                b.pose.y + sigma * ny,
                b.pose.theta + theta_sigma * nt,
            );
        }
        out.push(Detection {
            pose: b.pose,
            size: b.size,
            t: d.t,
            frame: d.frame,
            score: noise.score.score(points, range),
            gt_id: d.gt_id,
        });
    }
    Trajectory {
        id: gt.id,
        detections: out,
        static_flag: None,
    }
}

/// Short-lived spurious boxes around the ego, one trajectory each, without a ground-truth id.
pub fn false_positive_tracks(
    noise: &NoiseConfig,
    frames: &[FrameContext],
    dt: f64,
    max_range: f64,
    first_id: u64,
    seed: u64,
) -> Vec<Trajectory> {
    let mut rng = seed::rng(seed, seed::stream::FALSE_POSITIVE);
    let mut out = Vec::new();
    if noise.false_positive_rate <= 0.0 {
        return out;
    }
    for (k, ctx) in frames.iter().enumerate() {
        if rng.random::<f64>() >= noise.false_positive_rate {
            continue;
        }
        let len = rng.random_range(1..=5usize);
        let r = rng.random_range(5.0..max_range);
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let pose = Pose2D::new(ctx.ego.x + r * a.cos(), ctx.ego.y + r * a.sin(), rng.random_range(-3.1..3.1));
        let size = Size2D {
            w: rng.random_range(1.0..2.5),
            l: rng.random_range(2.0..5.5),
        };
        let dets = (k..(k + len).min(frames.len()))
            .map(|f| Detection {
                pose,
                size,
                t: f as f64 * dt,
                frame: f,
                score: noise.score.score(0, r),
                gt_id: None,
            })
            .collect();
        out.push(Trajectory::new(first_id + out.len() as u64, dets));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::box_iou_bev;

    fn gt_track() -> (Trajectory, Vec<FrameContext>) {
        let dets = (0..30)
            .map(|k| Detection {
                pose: Pose2D::new(10.0 + 0.8 * k as f64, 3.5, 0.1),
                size: Size2D::new(1.9, 4.6).unwrap(),
                t: k as f64 * 0.1,
                frame: k,
                score: 1.0,
                gt_id: Some(7),
            })
            .collect();
        let frames = (0..30)
            .map(|k| FrameContext {
                ego: Pose2D::new(0.3 * k as f64, 0.0, 0.0),
                visible_points: [(7u64, 40usize)].into_iter().collect(),
            })
            .collect();
        (Trajectory::new(7, dets), frames)
    }

    #[test]
    fn zero_noise_is_identity() {
        let (gt, frames) = gt_track();
        let out = inject_detection_noise(&gt, &NoiseConfig::zero(), &frames, 3);
        assert_eq!(out.len(), gt.len());
        for (a, b) in out.detections.iter().zip(&gt.detections) {
            assert_eq!(a.bbox(), b.bbox());
            assert_eq!(box_iou_bev(&a.bbox(), &b.bbox()), 1.0);
        }
    }

    #[test]
    fn nested_corner_shrink_iou() {
        let (gt, frames) = gt_track();
        let cfg = NoiseConfig {
            size_shrink_mean: 0.9,
            corner_bias_strength: 1.0,
            ..NoiseConfig::zero()
        };
        let out = inject_detection_noise(&gt, &cfg, &frames, 3);
        for (a, b) in out.detections.iter().zip(&gt.detections) {
            assert!((box_iou_bev(&a.bbox(), &b.bbox()) - 0.81).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_and_noisy() {
        let (gt, frames) = gt_track();
        let cfg = NoiseConfig::default();
        let a = inject_detection_noise(&gt, &cfg, &frames, 11);
        let b = inject_detection_noise(&gt, &cfg, &frames, 11);
        assert_eq!(a, b);
        let mean_iou: f64 = a
            .detections
            .iter()
            .zip(&gt.detections)
            .map(|(p, g)| box_iou_bev(&p.bbox(), &g.bbox()))
            .sum::<f64>()
            / a.len() as f64;
        assert!(mean_iou < 1.0 && mean_iou > 0.5);
        assert!(a.detections.iter().all(|d| d.score > 0.0 && d.score < 1.0));
    }

    #[test]
    fn drop_rate_removes_frames() {
        let (gt, frames) = gt_track();
        let cfg = NoiseConfig {
            drop_rate: 1.0,
            ..NoiseConfig::zero()
        };
        assert!(inject_detection_noise(&gt, &cfg, &frames, 0).is_empty());
    }

    #[test]
    fn validation() {
        assert!(NoiseConfig::default().validate().is_ok());
        let bad = NoiseConfig {
            drop_rate: 1.5,
            ..NoiseConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = NoiseConfig {
            theta_sigma: -1.0,
            ..NoiseConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn variance_scale_halves_variance() {
        let c = NoiseConfig::default().with_variance_scale(0.5);
        assert!((c.pos_sigma_base - 0.02 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn correlated_pose_error_keeps_marginal_sigma() {
        let n = 20_000;
        let dets = (0..n)
            .map(|k| Detection {
                pose: Pose2D::new(0.0, 0.0, 0.0),
                size: Size2D::new(1.9, 4.6).unwrap(),
                t: k as f64 * 0.1,
                frame: k,
                score: 1.0,
                gt_id: Some(1),
            })
            .collect();
        let gt = Trajectory::new(1, dets);
        let cfg = NoiseConfig {
            pos_sigma_base: 0.1,
            pose_noise_correlation: 0.8,
            ..NoiseConfig::zero()
        };
        let xs: Vec<f64> = inject_detection_noise(&gt, &cfg, &[], 5)
            .detections
            .iter()
            .map(|d| d.pose.x)
            .collect();
        let var = xs.iter().map(|x| x * x).sum::<f64>() / n as f64;
        let lag1 = xs.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / (n - 1) as f64 / var;
        assert!((var.sqrt() - 0.1).abs() < 0.005, "sigma {}", var.sqrt());
        assert!((lag1 - 0.8).abs() < 0.03, "lag-1 {lag1}");
    }

    #[test]
    fn score_monotone() {
        let m = NoiseConfig::default().score;
        assert!(m.score(100, 10.0) > m.score(10, 10.0));
        assert!(m.score(50, 10.0) > m.score(50, 40.0));
    }
}
