//! Object size branch: aggregate a trajectory's interior points in the object
//! frame, rasterize them, and predict one box size for the whole trajectory.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bev::{height_bin, BevGrid};
use crate::error::{Error, Result};
use crate::geom::{
    center_align_resize, closest_corner_index, corner_align_resize, points_in_box, Point3,
    Pose2D, Size2D, CORNER_SIGNS,
};
use crate::label::{Detection, Trajectory};
use crate::nn::{EncoderConfig, Graph, MlpConfig, ParamSet, Tensor, Var};
use crate::seed::{rng, stream};
use crate::sim::SceneLog;

/// Scale applied to each detection box before collecting its interior points.
pub const BOX_SCALE: f64 = 1.1;

/// One aggregated point and the frame it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObsPoint {
    pub p: Point3,
    pub frame: usize,
}

/// Points of one trajectory expressed in its object frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectObservation {
    pub trajectory_id: u64,
    pub points: Vec<ObsPoint>,
}

impl ObjectObservation {
    /// True when no detection captured any point; prediction then falls back
    /// to what the network makes of an empty raster.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn sweep_points(log: &SceneLog, frame: usize) -> Result<&[crate::geom::Point4]> {
    log.sweep(frame)
        .map(|s| s.points.as_slice())
        .ok_or(Error::MissingFrame(frame))
}

/// Per-detection interior points, each moved into its own detection's frame.
pub fn build_object_observation(log: &SceneLog, traj: &Trajectory) -> Result<ObjectObservation> {
    if traj.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let mut points = Vec::new();
    for d in &traj.detections {
        for p in points_in_box(sweep_points(log, d.frame)?, &d.bbox(), BOX_SCALE) {
            let (x, y) = d.pose.apply_inverse(p.x, p.y);
            points.push(ObsPoint {
                p: Point3::new(x, y, p.z),
                frame: d.frame,
            });
        }
    }
    Ok(ObjectObservation {
        trajectory_id: traj.id,
        points,
    })
}

/// Static-only variant: interior points stay in the world frame and are moved
/// once, by the inverse of the highest-score detection's pose.
pub fn build_object_observation_world(
    log: &SceneLog,
    traj: &Trajectory,
) -> Result<ObjectObservation> {
    if traj.static_flag != Some(true) {
        return Err(Error::NotStatic(traj.id));
    }
    let best = traj.argmax_score().ok_or(Error::Empty("trajectory"))?;
    let anchor = traj.detections[best].pose;
    let mut points = Vec::new();
    for d in &traj.detections {
        for p in points_in_box(sweep_points(log, d.frame)?, &d.bbox(), BOX_SCALE) {
            let (x, y) = anchor.apply_inverse(p.x, p.y);
            points.push(ObsPoint {
                p: Point3::new(x, y, p.z),
                frame: d.frame,
            });
        }
    }
    Ok(ObjectObservation {
        trajectory_id: traj.id,
        points,
    })
}

/// How a predicted size is applied to each per-frame box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Align {
    /// Keep the corner nearest the ego vehicle fixed.
    #[default]
    Corner,
    Center,
}

impl FromStr for Align {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corner" => Ok(Align::Corner),
            "center" => Ok(Align::Center),
            other => Err(Error::InvalidConfig(format!("unknown alignment `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeBranchConfig {
    /// Raster cell edge, meters.
    pub cell: f64,
    /// Raster edge in cells; the window is centered on the object origin.
    pub window_cells: usize,
    pub height_bins: usize,
    pub z_max: f64,
    pub encoder: EncoderConfig,
    pub head: MlpConfig,
    /// Size prior (w, l); the head predicts log-residuals against it.
    pub prior: (f64, f64),
    /// Aggregate static trajectories in the world frame.
    pub world_static: bool,
}

impl Default for SizeBranchConfig {
    fn default() -> Self {
        Self {
            cell: 0.05,
            window_cells: 256,
            height_bins: 4,
            z_max: 3.0,
            encoder: EncoderConfig {
                in_channels: 4,
                widths: [16, 32, 64],
                stem_pool: 4,
            },
            head: MlpConfig::new(&[64, 64, 2]),
            prior: (2.0, 4.5),
            world_static: false,
        }
    }
}

impl SizeBranchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.cell > 0.0 && self.z_max > 0.0) || self.height_bins == 0 {
            return bad("size raster cell, height bins and z_max must be positive".into());
        }
        if self.encoder.in_channels != self.height_bins {
            return bad(format!(
                "encoder takes {} channels but the raster has {} height bins",
                self.encoder.in_channels, self.height_bins
            ));
        }
        if self.window_cells == 0 || !self.window_cells.is_multiple_of(self.encoder.granularity()) {
            return bad(format!(
                "window of {} cells is not a multiple of {}",
                self.window_cells,
                self.encoder.granularity()
            ));
        }
        let h = &self.head.widths;
        if h.first() != Some(&self.encoder.out_channels()) || h.last() != Some(&2) {
            return bad(format!("size head widths {h:?} must map encoder channels to 2"));
        }
        if !(self.prior.0 > 0.0 && self.prior.1 > 0.0) {
            return bad("size prior must be positive".into());
        }
        Ok(())
    }
}

/// Binary occupancy raster of an observation, one channel per height bin,
/// centered on the object origin.
pub fn rasterize_bev(obs: &ObjectObservation, cfg: &SizeBranchConfig) -> BevGrid {
    let n = cfg.window_cells;
    let mut grid = BevGrid::centered(cfg.height_bins, n, n, cfg.cell, 0.0, 0.0);
    for op in &obs.points {
        grid.mark(height_bin(op.p.z, cfg.height_bins, cfg.z_max), op.p.x, op.p.y);
    }
    grid
}

/// Encoder + head parameters with the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeModel {
    pub cfg: SizeBranchConfig,
    pub params: ParamSet,
}

pub const ENCODER_PREFIX: &str = "size.enc.";
pub const HEAD_PREFIX: &str = "size.head.";

impl SizeModel {
    pub fn init(cfg: SizeBranchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng(seed, stream::INIT_PARAMS);
        let mut params = ParamSet::new();
        params.merge_prefixed(ENCODER_PREFIX, cfg.encoder.init(&mut r));
        params.merge_prefixed(HEAD_PREFIX, cfg.head.init(&mut r, true));
        Ok(Self { cfg, params })
    }

    /// Wraps trained parameters; fails when a tensor the forward pass needs is absent.
    pub fn from_params(cfg: SizeBranchConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
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

    /// Feature map of a raster.
    pub fn encode(&self, g: &mut Graph, grid: &BevGrid) -> Result<Var> {
        let x = g.input(grid.to_tensor());
        self.cfg.encoder.forward(g, &self.params, ENCODER_PREFIX, x)
    }

    /// Size `[1, 2]` as (w, l) predicted from a feature map: query at the object
    /// origin, log-residual head, scaled by the prior.
    pub fn head(&self, g: &mut Graph, features: Var, grid: &BevGrid) -> Result<Var> {
        let (u, v) = grid.continuous_index(0.0, 0.0);
        let e = &self.cfg.encoder;
        let q = g.input(Tensor::new(vec![1, 2], vec![e.feature_coord(u), e.feature_coord(v)])?);
        let f = g.bilinear_query(features, q)?;
        let r = self.cfg.head.forward(g, &self.params, HEAD_PREFIX, f)?;
        let s = g.exp(r);
        g.mul_const(s, &[self.cfg.prior.0, self.cfg.prior.1])
    }

    pub fn forward(&self, g: &mut Graph, grid: &BevGrid) -> Result<Var> {
        let f = self.encode(g, grid)?;
        self.head(g, f, grid)
    }

    pub fn predict(&self, grid: &BevGrid) -> Result<Size2D> {
        let mut g = Graph::inference();
        let s = self.forward(&mut g, grid)?;
        let d = &g.value(s).data;
        Size2D::new(d[0], d[1])
    }

    /// Builds the observation the configuration asks for.
    pub fn observe(&self, log: &SceneLog, traj: &Trajectory) -> Result<ObjectObservation> {
        if self.cfg.world_static && traj.static_flag == Some(true) {
            build_object_observation_world(log, traj)
        } else {
            build_object_observation(log, traj)
        }
    }

    pub fn predict_trajectory(&self, log: &SceneLog, traj: &Trajectory) -> Result<Size2D> {
        let obs = self.observe(log, traj)?;
        self.predict(&rasterize_bev(&obs, &self.cfg))
    }

    /// Training loss for one trajectory: mean box loss between `gt` and the
    /// chosen detections resized to the predicted size.
    pub fn loss(
        &self,
        g: &mut Graph,
        grid: &BevGrid,
        dets: &[Detection],
        gt: &[crate::geom::BoxBEV],
        egos: &[Pose2D],
        align: Align,
    ) -> Result<Var> {
        let size = self.forward(g, grid)?;
        let (a, c) = resize_rows(dets, egos, align)?;
        let boxes = g.affine_rows(size, &a, &c, dets.len(), 5)?;
        g.box_loss(boxes, gt, crate::nn::Reduction::Mean)
    }
}

/// Affine coefficients mapping a size `(w, l)` to box rows `(x, y, θ, w, l)`
/// for each detection, reproducing [`apply_size`] as a linear function of the
/// size. Returns `(A, c)` flattened for [`Graph::affine_rows`].
pub fn resize_rows(dets: &[Detection], egos: &[Pose2D], align: Align) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut a = Vec::with_capacity(dets.len() * 10);
    let mut c = Vec::with_capacity(dets.len() * 5);
    for d in dets {
        let b = d.bbox();
        let theta = b.pose.theta;
        match align {
            Align::Corner => {
                let ego = egos.get(d.frame).ok_or(Error::MissingFrame(d.frame))?;
                let idx = closest_corner_index(&b, ego);
                let anchor = b.corner(idx);
                let (sl, sw) = CORNER_SIGNS[idx];
                let (s, co) = theta.sin_cos();
                a.extend_from_slice(&[
                    0.5 * s * sw,
                    -0.5 * co * sl,
                    -0.5 * co * sw,
                    -0.5 * s * sl,
                    0.0,
                    0.0,
                ]);
                c.extend_from_slice(&[anchor.x, anchor.y, theta]);
            }
            Align::Center => {
                a.extend_from_slice(&[0.0; 6]);
                c.extend_from_slice(&[b.pose.x, b.pose.y, theta]);
            }
        }
        a.extend_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        c.extend_from_slice(&[0.0, 0.0]);
    }
    Ok((a, c))
}

/// Gives every detection `size`, resized per `align` using that frame's ego pose.
pub fn apply_size(traj: &Trajectory, size: Size2D, align: Align, egos: &[Pose2D]) -> Result<Trajectory> {
    let mut out = traj.clone();
    for d in &mut out.detections {
        let b = match align {
            Align::Corner => {
                let ego = egos.get(d.frame).ok_or(Error::MissingFrame(d.frame))?;
                corner_align_resize(&d.bbox(), size, ego)
            }
            Align::Center => center_align_resize(&d.bbox(), size),
        };
        *d = d.with_box(b);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
