//! Motion path branch: world-frame spatio-temporal raster plus explicit
//! per-frame motion features, decoded into a pose correction per detection.

use serde::{Deserialize, Serialize};

use crate::bev::{height_bin, BevGrid};
use crate::error::{Error, Result};
use crate::geom::{points_in_box, wrap_angle, BoxBEV, Point4, Pose2D};
use crate::label::{Detection, Trajectory};
use crate::nn::{EncoderConfig, Graph, MlpConfig, ParamSet, Reduction, Tensor, UNetConfig, Var};
use crate::seed::{rng, stream};
use crate::sim::SceneLog;
use crate::size_branch::BOX_SCALE;
use crate::track::kalman::path_length;
use crate::track::{kalman_smooth, KalmanConfig};

/// One world-frame point tagged with its slot (position within the window).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPoint {
    pub p: Point4,
    pub slot: usize,
}

/// Interior points of a window of detections, kept in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PathObservation {
    pub points: Vec<PathPoint>,
    /// Frame of each slot.
    pub frames: Vec<usize>,
}

/// Pose correction in the box frame: offsets are fractions of (l, w).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseDelta {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
}

pub fn build_path_observation(log: &SceneLog, window: &[Detection]) -> Result<PathObservation> {
    if window.is_empty() {
        return Err(Error::Empty("path window"));
    }
    let mut points = Vec::new();
    for (slot, d) in window.iter().enumerate() {
        let sweep = log.sweep(d.frame).ok_or(Error::MissingFrame(d.frame))?;
        points.extend(
            points_in_box(&sweep.points, &d.bbox(), BOX_SCALE)
                .into_iter()
                .map(|p| PathPoint { p, slot }),
        );
    }
    Ok(PathObservation {
        points,
        frames: window.iter().map(|d| d.frame).collect(),
    })
}

/// Per-detection `(Δx, Δy, Δθ)` from the previous detection, θ wrapped;
/// the first entry is zero.
pub fn motion_features(dets: &[Detection]) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(dets.len());
    for (i, d) in dets.iter().enumerate() {
        if i == 0 {
            out.push([0.0; 3]);
        } else {
            let p = &dets[i - 1].pose;
            out.push([
                d.pose.x - p.x,
                d.pose.y - p.y,
                wrap_angle(d.pose.theta - p.theta),
            ]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathBranchConfig {
    pub cell: f64,
    pub height_bins: usize,
    pub z_max: f64,
    /// Detections per window; also the number of time slots in the raster.
    pub window: usize,
    pub stride: usize,
    /// Free space added around the window's boxes, meters.
    pub margin: f64,
    /// Upper bound on either raster edge, cells.
    pub max_cells: usize,
    pub encoder: EncoderConfig,
    pub unet: UNetConfig,
    pub head: MlpConfig,
    /// Use the multiplicative world-coordinate update instead of box-frame offsets.
    pub literal_update: bool,
    /// Smoothed path length below which a trajectory counts as static, meters.
    pub static_threshold: f64,
    pub kalman: KalmanConfig,
}

impl Default for PathBranchConfig {
    fn default() -> Self {
        Self {
            cell: 0.1,
            height_bins: 4,
            z_max: 3.0,
            window: 10,
            stride: 5,
            margin: 1.0,
            max_cells: 320,
            encoder: EncoderConfig {
                in_channels: 40,
                widths: [32, 32, 64],
                stem_pool: 2,
            },
            unet: UNetConfig {
                in_channels: 3,
                base: 16,
                out_channels: 32,
            },
            head: MlpConfig::new(&[96, 64, 3]),
            literal_update: false,
            static_threshold: 1.0,
            kalman: KalmanConfig::default(),
        }
    }
}

impl PathBranchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.cell > 0.0 && self.z_max > 0.0 && self.margin >= 0.0) || self.height_bins == 0 {
            return bad("path raster cell, bins, z_max and margin must be positive".into());
        }
        if self.window == 0 || self.stride == 0 || self.stride > self.window {
            return bad(format!(
                "window {} / stride {} must satisfy 0 < stride <= window",
                self.window, self.stride
            ));
        }
        if self.encoder.in_channels != self.height_bins * self.window {
            return bad(format!(
                "path encoder takes {} channels, raster has {}",
                self.encoder.in_channels,
                self.height_bins * self.window
            ));
        }
        if self.unet.in_channels != 3 {
            return bad("temporal encoder must take 3 motion channels".into());
        }
        let h = &self.head.widths;
        if h.first() != Some(&(self.encoder.out_channels() + self.unet.out_channels)) || h.last() != Some(&3) {
            return bad(format!("path head widths {h:?} must map fused features to 3"));
        }
        if self.max_cells < self.encoder.granularity() {
            return bad("max_cells smaller than one encoder granule".into());
        }
        Ok(())
    }

    /// Rounds a cell count up to the encoder granularity.
    fn round_cells(&self, n: f64) -> usize {
        let g = self.encoder.granularity();
        let n = (n.ceil().max(1.0) as usize).div_ceil(g) * g;
        n.min(self.max_cells / g * g)
    }

    /// World-aligned window around the detections: centered at the mean box
    /// center and large enough for every scaled box plus the margin.
    pub fn window_grid(&self, dets: &[Detection]) -> Result<BevGrid> {
        if dets.is_empty() {
            return Err(Error::Empty("path window"));
        }
        let n = dets.len() as f64;
        let cx = dets.iter().map(|d| d.pose.x).sum::<f64>() / n;
        let cy = dets.iter().map(|d| d.pose.y).sum::<f64>() / n;
        let (mut hx, mut hy) = (0.0_f64, 0.0_f64);
        for d in dets {
            let b = BoxBEV::new(d.pose, d.size.scaled(BOX_SCALE));
            for c in b.corners() {
                hx = hx.max((c.x - cx).abs());
                hy = hy.max((c.y - cy).abs());
            }
        }
        let cols = self.round_cells(2.0 * (hx + self.margin) / self.cell);
        let rows = self.round_cells(2.0 * (hy + self.margin) / self.cell);
        Ok(BevGrid::centered(
            self.height_bins * self.window,
            rows,
            cols,
            self.cell,
            cx,
            cy,
        ))
    }
}

/// Binary occupancy with one channel per (time slot, height bin), slot-major.
pub fn rasterize_path(obs: &PathObservation, mut grid: BevGrid, cfg: &PathBranchConfig) -> BevGrid {
    grid.data.iter_mut().for_each(|v| *v = 0.0);
    grid.dropped = 0;
    for pp in &obs.points {
        let ch = pp.slot * cfg.height_bins + height_bin(pp.p.z, cfg.height_bins, cfg.z_max);
        if ch < grid.channels {
            grid.mark(ch, pp.p.x, pp.p.y);
        } else {
            grid.dropped += 1;
        }
    }
    grid
}

/// Window start indices covering `n` detections; the last window ends at `n`.
pub fn window_starts(n: usize, window: usize, stride: usize) -> Vec<usize> {
    if n <= window {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..=n - window).step_by(stride).collect();
    if *starts.last().expect("non-empty") + window < n {
        starts.push(n - window);
    }
    starts
}

/// Applies a box-frame correction (or the literal world-scaled one).
pub fn apply_pose_refinement(det: &Detection, delta: &PoseDelta, literal: bool) -> Detection {
    let p = det.pose;
    let (x, y) = if literal {
        (p.x + delta.dx * p.x, p.y + delta.dy * p.y)
    } else {
        let (s, c) = p.theta.sin_cos();
        let (ox, oy) = (delta.dx * det.size.l, delta.dy * det.size.w);
        (p.x + ox * c - oy * s, p.y + ox * s + oy * c)
    };
    Detection {
        pose: Pose2D::new(x, y, p.theta + delta.dtheta),
        ..*det
    }
}

/// Affine coefficients mapping deltas `[N,3]` to box rows `(x, y, θ, w, l)`,
/// matching [`apply_pose_refinement`] before heading wrap.
pub fn refinement_rows(dets: &[Detection], literal: bool) -> (Vec<f64>, Vec<f64>) {
    let mut a = Vec::with_capacity(dets.len() * 15);
    let mut c = Vec::with_capacity(dets.len() * 5);
    for d in dets {
        let p = d.pose;
        if literal {
            a.extend_from_slice(&[p.x, 0.0, 0.0, 0.0, p.y, 0.0]);
        } else {
            let (s, co) = p.theta.sin_cos();
            let (l, w) = (d.size.l, d.size.w);
            a.extend_from_slice(&[l * co, -w * s, 0.0, l * s, w * co, 0.0]);
        }
        a.extend_from_slice(&[0.0, 0.0, 1.0]);
        a.extend_from_slice(&[0.0; 6]);
        c.extend_from_slice(&[p.x, p.y, p.theta, d.size.w, d.size.l]);
    }
    (a, c)
}

/// Static iff the Kalman-smoothed path is shorter than the threshold.
pub fn classify_static(traj: &Trajectory, threshold: f64, kalman: &KalmanConfig) -> bool {
    if traj.len() < 2 {
        return 0.0 < threshold;
    }
    path_length(&kalman_smooth(traj, kalman)) < threshold
}

pub const ENCODER_PREFIX: &str = "path.enc.";
pub const UNET_PREFIX: &str = "path.unet.";
pub const HEAD_PREFIX: &str = "path.head.";

#[derive(Debug, Clone, PartialEq)]
pub struct PathModel {
    pub cfg: PathBranchConfig,
    pub params: ParamSet,
}

impl PathModel {
    pub fn init(cfg: PathBranchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng(seed, stream::INIT_PARAMS ^ 0x70);
        let mut params = ParamSet::new();
        params.merge_prefixed(ENCODER_PREFIX, cfg.encoder.init(&mut r));
        params.merge_prefixed(UNET_PREFIX, cfg.unet.init(&mut r));
        params.merge_prefixed(HEAD_PREFIX, cfg.head.init(&mut r, true));
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: PathBranchConfig, params: ParamSet) -> Result<Self> {
        let reference = Self::init(cfg.clone(), 0)?;
        let mut own = ParamSet::new();
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape != t.shape {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: checkpoint {:?}, model {:?}",
                    got.shape, t.shape
                )));
            }
            own.insert(name.clone(), got.clone());
        }
        Ok(Self { cfg, params: own })
    }

    /// Raster for a window of detections.
    pub fn rasterize(&self, log: &SceneLog, window: &[Detection]) -> Result<BevGrid> {
        let obs = build_path_observation(log, window)?;
        Ok(rasterize_path(&obs, self.cfg.window_grid(window)?, &self.cfg))
    }

    pub fn encode(&self, g: &mut Graph, grid: &BevGrid) -> Result<Var> {
        let x = g.input(grid.to_tensor());
        self.cfg.encoder.forward(g, &self.params, ENCODER_PREFIX, x)
    }

    /// Per-detection temporal features `[32, L]` from motion features `[L]`.
    pub fn temporal(&self, g: &mut Graph, motion: &[[f64; 3]]) -> Result<Var> {
        let l = motion.len();
        let mut data = vec![0.0; 3 * l];
        for (t, m) in motion.iter().enumerate() {
            for (c, v) in m.iter().enumerate() {
                data[c * l + t] = *v;
            }
        }
        let x = g.input(Tensor::new(vec![3, l], data)?);
        self.cfg.unet.forward_any(g, &self.params, UNET_PREFIX, x)
    }

    /// Deltas `[N,3]` for `window` given its raster and motion features.
    pub fn decode(
        &self,
        g: &mut Graph,
        features: Var,
        temporal: Var,
        grid: &BevGrid,
        window: &[Detection],
    ) -> Result<Var> {
        let e = &self.cfg.encoder;
        let fs = g.shape(features).to_vec();
        let (fh, fw) = ((fs[1] - 1) as f64, (fs[2] - 1) as f64);
        let mut coords = Vec::with_capacity(2 * window.len());
        for d in window {
            // a capped grid can leave fast movers outside; use the border feature
            let (u, v) = grid.continuous_index(d.pose.x, d.pose.y);
            coords.push(e.feature_coord(u).clamp(0.0, fw));
            coords.push(e.feature_coord(v).clamp(0.0, fh));
        }
        let q = g.input(Tensor::new(vec![window.len(), 2], coords)?);
        let fp = g.bilinear_query(features, q)?;
        let fm = g.transpose(temporal)?;
        let fused = g.concat(&[fp, fm], 1)?;
        self.cfg.head.forward(g, &self.params, HEAD_PREFIX, fused)
    }

    /// Full forward for one window: deltas `[N,3]`.
    pub fn forward(&self, g: &mut Graph, grid: &BevGrid, window: &[Detection]) -> Result<Var> {
        let f = self.encode(g, grid)?;
        let t = self.temporal(g, &motion_features(window))?;
        self.decode(g, f, t, grid, window)
    }

    pub fn predict_window(&self, log: &SceneLog, window: &[Detection]) -> Result<Vec<PoseDelta>> {
        let grid = self.rasterize(log, window)?;
        let mut g = Graph::inference();
        let out = self.forward(&mut g, &grid, window)?;
        let d = &g.value(out).data;
        let deltas: Vec<PoseDelta> = d
            .chunks_exact(3)
            .map(|r| PoseDelta {
                dx: r[0],
                dy: r[1],
                dtheta: r[2],
            })
            .collect();
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("path deltas"));
        }
        Ok(deltas)
    }

    /// Training loss for one window: box loss of the refined boxes against
    /// `gt`, summed over the window.
    pub fn loss(
        &self,
        g: &mut Graph,
        grid: &BevGrid,
        window: &[Detection],
        gt: &[BoxBEV],
    ) -> Result<Var> {
        let deltas = self.forward(g, grid, window)?;
        let (a, c) = refinement_rows(window, self.cfg.literal_update);
        let boxes = g.affine_rows(deltas, &a, &c, window.len(), 5)?;
        g.box_loss(boxes, gt, Reduction::Sum)
    }

    /// Refines every pose of a constant-size trajectory. Moving objects use
    /// overlapping windows with averaged deltas; static objects are decoded
    /// once around their highest-score detection and that pose is broadcast.
    pub fn refine_trajectory(&self, log: &SceneLog, traj: &Trajectory) -> Result<Trajectory> {
        let dets = &traj.detections;
        let mut out = traj.clone();
        if dets.is_empty() {
            return Ok(out);
        }
        let w = self.cfg.window;
        if traj.static_flag == Some(true) {
            let best = traj.argmax_score().expect("non-empty");
            let start = best.saturating_sub(w / 2).min(dets.len().saturating_sub(w));
            let end = (start + w).min(dets.len());
            let deltas = self.predict_window(log, &dets[start..end])?;
            let refined = apply_pose_refinement(&dets[best], &deltas[best - start], self.cfg.literal_update);
            for d in &mut out.detections {
                d.pose = refined.pose;
            }
            return Ok(out);
        }
        let mut acc = vec![(PoseDelta::default(), 0usize); dets.len()];
        for s in window_starts(dets.len(), w, self.cfg.stride) {
            let end = (s + w).min(dets.len());
            for (k, delta) in self.predict_window(log, &dets[s..end])?.into_iter().enumerate() {
                let (sum, n) = &mut acc[s + k];
                sum.dx += delta.dx;
                sum.dy += delta.dy;
                sum.dtheta += delta.dtheta;
                *n += 1;
            }
        }
        for (d, (sum, n)) in out.detections.iter_mut().zip(acc) {
            let k = 1.0 / n as f64;
            let mean = PoseDelta {
                dx: sum.dx * k,
                dy: sum.dy * k,
                dtheta: sum.dtheta * k,
            };
            *d = apply_pose_refinement(d, &mean, self.cfg.literal_update);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
