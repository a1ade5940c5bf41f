//! Sequential training of the two branches on benchmark scenes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bev::SparseGrid;
use crate::error::{Error, Result};
use crate::geom::{box_iou_bev, BoxBEV, Pose2D};
use crate::label::{Detection, Trajectory};
use crate::nn::{Adam, AdamConfig, Graph};
use crate::path_branch::{
    apply_pose_refinement, classify_static, window_starts, PathBranchConfig, PathModel, PoseDelta,
};
use crate::seed::{rng, stream};
use crate::sim::SceneLog;
use crate::size_branch::{apply_size, rasterize_bev, Align, SizeBranchConfig, SizeModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub size_steps: usize,
    pub size_batch: usize,
    pub size_lr: f64,
    pub path_steps: usize,
    pub path_batch: usize,
    pub path_lr: f64,
    pub clip_norm: Option<f64>,
    /// Cosine decay ends at this fraction of the initial learning rate.
    pub final_lr_fraction: f64,
    /// Frames per size sample; evenly spaced over the trajectory.
    pub size_frames: usize,
    /// Samples used to measure the objective before and after training.
    pub probe_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            size_steps: 3000,
            size_batch: 2,
            size_lr: 1e-3,
            path_steps: 6000,
            path_batch: 4,
            path_lr: 1e-3,
            clip_norm: Some(5.0),
            final_lr_fraction: 0.1,
            size_frames: 16,
            probe_samples: 48,
        }
    }
}

/// Loss curve and objective of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub samples: usize,
    pub steps: usize,
    /// Mean loss of each optimizer step.
    pub losses: Vec<f64>,
    /// Mean loss over the probe samples before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Ground-truth boxes keyed by (identity, frame).
#[derive(Debug, Clone, Default)]
pub struct GtIndex(BTreeMap<(u64, usize), BoxBEV>);

impl GtIndex {
    pub fn new(gt: &[Trajectory]) -> Self {
        Self(
            gt.iter()
                .flat_map(|t| t.detections.iter().map(move |d| ((t.id, d.frame), d.bbox())))
                .collect(),
        )
    }

    pub fn get(&self, d: &Detection) -> Option<BoxBEV> {
        d.gt_id.and_then(|id| self.0.get(&(id, d.frame)).copied())
    }
}

/// One trajectory's raster, a few of its detections and their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeSample {
    pub grid: SparseGrid,
    pub dets: Vec<Detection>,
    pub gt: Vec<BoxBEV>,
    pub egos: Vec<Pose2D>,
}

/// One window of a size-corrected trajectory with its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub grid: SparseGrid,
    pub window: Vec<Detection>,
    pub gt: Vec<BoxBEV>,
}

fn evenly_spaced(n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    (0..k).map(|i| i * (n - 1) / (k - 1).max(1)).collect()
}

/// Size samples for every trajectory that has ground truth on some frame.
pub fn size_samples(
    model: &SizeModel,
    log: &SceneLog,
    trajectories: &[Trajectory],
    gt: &[Trajectory],
    frames_per_sample: usize,
) -> Result<Vec<SizeSample>> {
    let index = GtIndex::new(gt);
    let egos = log.ego_poses();
    let mut out = Vec::new();
    for t in trajectories {
        let labeled: Vec<(Detection, BoxBEV)> = t
            .detections
            .iter()
            .filter_map(|d| index.get(d).map(|g| (*d, g)))
            .collect();
        if labeled.is_empty() {
            continue;
        }
        let obs = model.observe(log, t)?;
        let pick = evenly_spaced(labeled.len(), frames_per_sample);
        out.push(SizeSample {
            grid: SparseGrid::from_grid(&rasterize_bev(&obs, &model.cfg)),
            dets: pick.iter().map(|&i| labeled[i].0).collect(),
            gt: pick.iter().map(|&i| labeled[i].1).collect(),
            egos: egos.clone(),
        });
    }
    Ok(out)
}

/// Path samples: windows of trajectories after size refinement, every
/// detection of the window labeled.
pub fn path_samples(
    model: &PathModel,
    log: &SceneLog,
    resized: &[Trajectory],
    gt: &[Trajectory],
) -> Result<Vec<PathSample>> {
    let index = GtIndex::new(gt);
    let mut out = Vec::new();
    for t in resized {
        let n = t.len();
        for s in window_starts(n, model.cfg.window, model.cfg.stride) {
            let window = &t.detections[s..(s + model.cfg.window).min(n)];
            let Some(targets) = window.iter().map(|d| index.get(d)).collect::<Option<Vec<_>>>() else {
                continue;
            };
            out.push(PathSample {
                grid: SparseGrid::from_grid(&model.rasterize(log, window)?),
                window: window.to_vec(),
                gt: targets,
            });
        }
    }
    Ok(out)
}

/// Applies a trained size model to every trajectory (corner alignment).
pub fn resize_all(model: &SizeModel, log: &SceneLog, trajectories: &[Trajectory]) -> Result<Vec<Trajectory>> {
    let egos = log.ego_poses();
    trajectories
        .iter()
        .map(|t| apply_size(t, model.predict_trajectory(log, t)?, Align::Corner, &egos))
        .collect()
}

/// Sets each trajectory's static flag from its smoothed path length.
pub fn flag_static(trajectories: &mut [Trajectory], cfg: &PathBranchConfig) {
    for t in trajectories {
        t.static_flag = Some(classify_static(t, cfg.static_threshold, &cfg.kalman));
    }
}

fn size_loss(model: &SizeModel, s: &SizeSample, g: &mut Graph) -> Result<crate::nn::Var> {
    model.loss(g, &s.grid.to_grid(), &s.dets, &s.gt, &s.egos, Align::Corner)
}

fn path_loss(model: &PathModel, s: &PathSample, g: &mut Graph) -> Result<crate::nn::Var> {
    model.loss(g, &s.grid.to_grid(), &s.window, &s.gt)
}

struct Schedule {
    steps: usize,
    batch: usize,
    adam: AdamConfig,
    seed: u64,
    probe: usize,
    final_lr_fraction: f64,
}

/// Shared optimizer loop: `loss` builds one sample's graph on the given
/// parameters; batches are drawn from a per-epoch shuffle.
fn optimize<M, S>(
    model: &mut M,
    params: fn(&mut M) -> &mut crate::nn::ParamSet,
    samples: &[S],
    loss: fn(&M, &S, &mut Graph) -> Result<crate::nn::Var>,
    sched: Schedule,
) -> Result<TrainReport> {
    let Schedule {
        steps,
        batch,
        adam: adam_cfg,
        seed,
        probe,
        final_lr_fraction,
    } = sched;
    if samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let probe_idx = evenly_spaced(samples.len(), probe.max(1));
    let probe_loss = |m: &M| -> Result<f64> {
        let mut total = 0.0;
        for &i in &probe_idx {
            let mut g = Graph::inference();
            let l = loss(m, &samples[i], &mut g)?;
            total += g.value(l).data[0];
        }
        Ok(total / probe_idx.len() as f64)
    };
    let initial_loss = probe_loss(model)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut r = rng(seed, stream::TRAIN);
    order.shuffle(&mut r);
    let mut cursor = 0;
    let mut adam = Adam::new(adam_cfg);
    let mut losses = Vec::with_capacity(steps);
    let batch = batch.max(1);
    let lr0 = adam.cfg.lr;
    for step in 0..steps {
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos());
        adam.cfg.lr = lr0 * (final_lr_fraction + (1.0 - final_lr_fraction) * cos);
        params(model).zero_grad();
        let mut step_loss = 0.0;
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut r);
                cursor = 0;
            }
            let s = &samples[order[cursor]];
            cursor += 1;
            let mut g = Graph::new();
            let l = loss(model, s, &mut g)?;
            let l = g.scale(l, 1.0 / batch as f64);
            step_loss += g.value(l).data[0];
            g.backward(l)?;
            g.accumulate_param_grads(params(model))?;
        }
        if !step_loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        adam.step(params(model));
        losses.push(step_loss);
    }
    params(model).zero_grad();
    Ok(TrainReport {
        samples: samples.len(),
        steps,
        losses,
        initial_loss,
        final_loss: probe_loss(model)?,
    })
}

/// Trains a fresh size model on prepared samples.
pub fn train_size_on(
    cfg: SizeBranchConfig,
    samples: &[SizeSample],
    train: &TrainConfig,
) -> Result<(SizeModel, TrainReport)> {
    let mut model = SizeModel::init(cfg, train.seed)?;
    let report = optimize(
        &mut model,
        |m| &mut m.params,
        samples,
        size_loss,
        Schedule {
            steps: train.size_steps,
            batch: train.size_batch,
            adam: AdamConfig {
                lr: train.size_lr,
                clip_norm: train.clip_norm,
                ..AdamConfig::default()
            },
            seed: train.seed,
            probe: train.probe_samples,
            final_lr_fraction: train.final_lr_fraction,
        },
    )?;
    Ok((model, report))
}

/// Trains a fresh path model on prepared samples.
pub fn train_path_on(
    cfg: PathBranchConfig,
    samples: &[PathSample],
    train: &TrainConfig,
) -> Result<(PathModel, TrainReport)> {
    let mut model = PathModel::init(cfg, train.seed)?;
    let report = optimize(
        &mut model,
        |m| &mut m.params,
        samples,
        path_loss,
        Schedule {
            steps: train.path_steps,
            batch: train.path_batch,
            adam: AdamConfig {
                lr: train.path_lr,
                clip_norm: train.clip_norm,
                ..AdamConfig::default()
            },
            seed: train.seed ^ 0x9a7,
            probe: train.probe_samples,
            final_lr_fraction: train.final_lr_fraction,
        },
    )?;
    Ok((model, report))
}

/// Training data for one scene: its log, input trajectories and ground truth.
pub struct TrainScene<'a> {
    pub log: &'a SceneLog,
    pub init: &'a [Trajectory],
    pub gt: &'a [Trajectory],
}

/// Trains the size branch on the initial trajectories of `scenes`.
pub fn train_size_branch(
    scenes: &[TrainScene<'_>],
    cfg: SizeBranchConfig,
    train: &TrainConfig,
) -> Result<(SizeModel, TrainReport)> {
    let probe = SizeModel::init(cfg.clone(), train.seed)?;
    let mut samples = Vec::new();
    for s in scenes {
        samples.extend(size_samples(&probe, s.log, s.init, s.gt, train.size_frames)?);
    }
    train_size_on(cfg, &samples, train)
}

/// Trains the path branch on trajectories refined by a frozen size model.
pub fn train_path_branch(
    scenes: &[TrainScene<'_>],
    cfg: PathBranchConfig,
    size_model: &SizeModel,
    train: &TrainConfig,
) -> Result<(PathModel, TrainReport)> {
    let probe = PathModel::init(cfg.clone(), train.seed)?;
    let mut samples = Vec::new();
    for s in scenes {
        let resized = resize_all(size_model, s.log, s.init)?;
        samples.extend(path_samples(&probe, s.log, &resized, s.gt)?);
    }
    train_path_on(cfg, &samples, train)
}

/// Mean IoU of the size-refined sample boxes against their targets.
pub fn size_sample_iou(model: &SizeModel, samples: &[SizeSample]) -> Result<f64> {
    let mut ious = Vec::new();
    for s in samples {
        let size = model.predict(&s.grid.to_grid())?;
        let t = Trajectory::new(0, s.dets.clone());
        let resized = apply_size(&t, size, Align::Corner, &s.egos)?;
        ious.extend(resized.detections.iter().zip(&s.gt).map(|(d, g)| box_iou_bev(&d.bbox(), g)));
    }
    Ok(ious.iter().sum::<f64>() / ious.len().max(1) as f64)
}

/// Mean IoU of the path-refined sample boxes against their targets.
pub fn path_sample_iou(model: &PathModel, samples: &[PathSample]) -> Result<f64> {
    let mut ious = Vec::new();
    for s in samples {
        let grid = s.grid.to_grid();
        let mut g = Graph::inference();
        let out = model.forward(&mut g, &grid, &s.window)?;
        let d = &g.value(out).data;
        for (k, (det, gt)) in s.window.iter().zip(&s.gt).enumerate() {
            let delta = PoseDelta {
                dx: d[3 * k],
                dy: d[3 * k + 1],
                dtheta: d[3 * k + 2],
            };
            let r = apply_pose_refinement(det, &delta, model.cfg.literal_update);
            ious.push(box_iou_bev(&r.bbox(), gt));
        }
    }
    Ok(ious.iter().sum::<f64>() / ious.len().max(1) as f64)
}
