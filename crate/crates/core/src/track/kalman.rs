//! Constant-velocity Kalman filter with Rauch–Tung–Striebel smoothing.
//!
//! x and y are filtered independently; heading is unwrapped onto a continuous
//! branch first and filtered with its own constant-rate model.

use serde::{Deserialize, Serialize};

use crate::geom::{wrap_angle, Pose2D};
use crate::label::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalmanConfig {
    /// White-noise acceleration density for x/y, m/s².
    pub accel_sigma: f64,
    /// Position measurement std-dev, m.
    pub meas_sigma: f64,
    /// White-noise yaw acceleration, rad/s².
    pub yaw_accel_sigma: f64,
    pub yaw_meas_sigma: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            accel_sigma: 1.0,
            meas_sigma: 0.1,
            yaw_accel_sigma: 0.3,
            yaw_meas_sigma: 0.02,
        }
    }
}

type M2 = [[f64; 2]; 2];

fn mat_mul(a: &M2, b: &M2) -> M2 {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

fn transpose(a: &M2) -> M2 {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

fn inverse(a: &M2) -> M2 {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]]
}

/// Smoothed 1-D positions under a constant-velocity model.
pub fn smooth_cv_1d(times: &[f64], z: &[f64], accel_sigma: f64, meas_sigma: f64) -> Vec<f64> {
    let n = z.len();
    if n < 2 {
        return z.to_vec();
    }
    let r = meas_sigma * meas_sigma;
    let q = accel_sigma * accel_sigma;
    // near-diffuse prior so exactly linear data is reproduced
    let mut x = [z[0], 0.0];
    let mut p: M2 = [[r, 0.0], [0.0, 1e8]];
    let mut xf = Vec::with_capacity(n);
    let mut pf = Vec::with_capacity(n);
    let mut xp = Vec::with_capacity(n);
    let mut pp = Vec::with_capacity(n);
    let mut fs = Vec::with_capacity(n);
    for k in 0..n {
        if k > 0 {
            let dt = times[k] - times[k - 1];
            let f: M2 = [[1.0, dt], [0.0, 1.0]];
            x = [x[0] + dt * x[1], x[1]];
            let fp = mat_mul(&f, &p);
            let mut np = mat_mul(&fp, &transpose(&f));
            np[0][0] += q * dt.powi(4) / 4.0;
            np[0][1] += q * dt.powi(3) / 2.0;
            np[1][0] += q * dt.powi(3) / 2.0;
            np[1][1] += q * dt * dt;
            p = np;
            fs.push(f);
        } else {
            fs.push([[1.0, 0.0], [0.0, 1.0]]);
        }
        xp.push(x);
        pp.push(p);
        if k > 0 {
            let s = p[0][0] + r;
            let kg = [p[0][0] / s, p[1][0] / s];
            let innov = z[k] - x[0];
            x = [x[0] + kg[0] * innov, x[1] + kg[1] * innov];
            p = [
                [(1.0 - kg[0]) * p[0][0], (1.0 - kg[0]) * p[0][1]],
                [p[1][0] - kg[1] * p[0][0], p[1][1] - kg[1] * p[0][1]],
            ];
        }
        xf.push(x);
        pf.push(p);
    }
    let mut xs = xf.clone();
    let mut ps = pf.clone();
    for k in (0..n - 1).rev() {
        let c = mat_mul(&mat_mul(&pf[k], &transpose(&fs[k + 1])), &inverse(&pp[k + 1]));
        let dx = [xs[k + 1][0] - xp[k + 1][0], xs[k + 1][1] - xp[k + 1][1]];
        xs[k] = [
            xf[k][0] + c[0][0] * dx[0] + c[0][1] * dx[1],
            xf[k][1] + c[1][0] * dx[0] + c[1][1] * dx[1],
        ];
        let dp = [
            [ps[k + 1][0][0] - pp[k + 1][0][0], ps[k + 1][0][1] - pp[k + 1][0][1]],
            [ps[k + 1][1][0] - pp[k + 1][1][0], ps[k + 1][1][1] - pp[k + 1][1][1]],
        ];
        let cdc = mat_mul(&mat_mul(&c, &dp), &transpose(&c));
        ps[k] = [
            [pf[k][0][0] + cdc[0][0], pf[k][0][1] + cdc[0][1]],
            [pf[k][1][0] + cdc[1][0], pf[k][1][1] + cdc[1][1]],
        ];
    }
    xs.into_iter().map(|s| s[0]).collect()
}

/// Continuous heading sequence: each step takes the nearest branch.
pub fn unwrap_angles(theta: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(theta.len());
    for (i, &th) in theta.iter().enumerate() {
        if i == 0 {
            out.push(th);
        } else {
            let prev = out[i - 1];
            out.push(prev + wrap_angle(th - theta[i - 1]));
        }
    }
    out
}

/// Smooths poses; sizes, timestamps and frame indices pass through untouched.
pub fn kalman_smooth(traj: &Trajectory, cfg: &KalmanConfig) -> Trajectory {
    if traj.len() < 2 {
        return traj.clone();
    }
    let t: Vec<f64> = traj.detections.iter().map(|d| d.t).collect();
    let xs: Vec<f64> = traj.detections.iter().map(|d| d.pose.x).collect();
    let ys: Vec<f64> = traj.detections.iter().map(|d| d.pose.y).collect();
    let th = unwrap_angles(&traj.detections.iter().map(|d| d.pose.theta).collect::<Vec<_>>());
    let sx = smooth_cv_1d(&t, &xs, cfg.accel_sigma, cfg.meas_sigma);
    let sy = smooth_cv_1d(&t, &ys, cfg.accel_sigma, cfg.meas_sigma);
    let st = smooth_cv_1d(&t, &th, cfg.yaw_accel_sigma, cfg.yaw_meas_sigma);
    let mut out = traj.clone();
    for (i, d) in out.detections.iter_mut().enumerate() {
        d.pose = Pose2D::new(sx[i], sy[i], st[i]);
    }
    out
}

/// Length of the polyline through the detection centers.
pub fn path_length(traj: &Trajectory) -> f64 {
    traj.detections
        .windows(2)
        .map(|w| (w[1].pose.x - w[0].pose.x).hypot(w[1].pose.y - w[0].pose.y))
        .sum()
}
