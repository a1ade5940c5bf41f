//! Kinematic bicycle model integrated exactly over each frame for piecewise-constant controls.

use serde::{Deserialize, Serialize};

use crate::geom::{wrap_angle, Pose2D};

/// Per-frame control input.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Control {
    /// m/s
    pub speed: f64,
    /// front-wheel steering angle, rad
    pub steer: f64,
}

impl Control {
    pub const fn new(speed: f64, steer: f64) -> Self {
        Self { speed, steer }
    }
}

pub fn yaw_rate(c: &Control, wheelbase: f64) -> f64 {
    c.speed * c.steer.tan() / wheelbase
}

/// Advances `pose` by `dt` seconds, following a circular arc when the yaw rate is non-zero.
pub fn step(pose: &Pose2D, c: &Control, wheelbase: f64, dt: f64) -> Pose2D {
    let w = yaw_rate(c, wheelbase);
    let th = pose.theta;
    if w.abs() < 1e-12 {
        let (s, co) = th.sin_cos();
        return Pose2D {
            x: pose.x + c.speed * dt * co,
            y: pose.y + c.speed * dt * s,
            theta: th,
        };
    }
    let th1 = th + w * dt;
    let r = c.speed / w;
    Pose2D {
        x: pose.x + r * (th1.sin() - th.sin()),
        y: pose.y - r * (th1.cos() - th.cos()),
        theta: wrap_angle(th1),
    }
}

/// Poses for frames `0..n`; frame 0 is `start`, frame k applies `controls[k-1]`
/// (the last control repeats, an empty list means standing still).
pub fn rollout(start: Pose2D, controls: &[Control], wheelbase: f64, dt: f64, n: usize) -> Vec<Pose2D> {
    let mut out = Vec::with_capacity(n);
    let mut p = start;
    for k in 0..n {
        if k > 0 {
            let c = controls
                .get(k - 1)
                .or(controls.last())
                .copied()
                .unwrap_or_default();
            p = step(&p, &c, wheelbase, dt);
        }
        out.push(p);
    }
    out
}
