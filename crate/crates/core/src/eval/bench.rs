//! Synthetic benchmark: simulated scenes, noisy detections and their tracks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Trajectory;
use crate::sim::{inject_detection_noise, simulate_scene, NoiseConfig, SceneConfig, SceneLog};
use crate::track::{bucket_by_frame, track, TrackerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    /// Scene `i` is simulated with seed `seed + i`.
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub scene: SceneConfig,
    pub noise: NoiseConfig,
    /// Variance factor of the emulated offline detector relative to `noise`.
    pub offline_variance_scale: f64,
    pub tracker: TrackerConfig,
    /// Ground-truth boxes with fewer LiDAR returns are not labelable and are
    /// neither detected nor evaluated.
    pub min_points: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 1000,
            train_scenes: 60,
            val_scenes: 10,
            test_scenes: 30,
            scene: SceneConfig {
                n_frames: 100,
                ..SceneConfig::default()
            },
            noise: NoiseConfig::default(),
            offline_variance_scale: 0.5,
            tracker: TrackerConfig::default(),
            min_points: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl BenchmarkConfig {
    pub fn n_scenes(&self) -> usize {
        self.train_scenes + self.val_scenes + self.test_scenes
    }

    /// Scene indices of a split; splits are consecutive seed ranges.
    pub fn indices(&self, split: Split) -> std::ops::Range<usize> {
        let a = self.train_scenes;
        let b = a + self.val_scenes;
        match split {
            Split::Train => 0..a,
            Split::Val => a..b,
            Split::Test => b..self.n_scenes(),
        }
    }

    pub fn scene_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_add(index as u64)
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if !(self.offline_variance_scale > 0.0) {
            return Err(Error::InvalidConfig("offline variance scale must be positive".into()));
        }
        if self.n_scenes() == 0 {
            return Err(Error::InvalidConfig("benchmark has no scenes".into()));
        }
        Ok(())
    }
}

/// One benchmark scene with its labelable ground truth and the initial
/// trajectories of both detector variants.
#[derive(Debug, Clone)]
pub struct BenchScene {
    pub index: usize,
    pub seed: u64,
    pub log: SceneLog,
    pub gt: Vec<Trajectory>,
    pub init: Vec<Trajectory>,
    pub offline: Vec<Trajectory>,
}

/// Ground truth restricted to frames with at least `min_points` returns.
pub fn labelable_gt(log: &SceneLog, min_points: usize) -> Vec<Trajectory> {
    log.gt_trajectories
        .iter()
        .filter_map(|t| {
            let dets: Vec<_> = t
                .detections
                .iter()
                .filter(|d| {
                    log.visible_points
                        .get(d.frame)
                        .and_then(|v| v.get(&t.id))
                        .is_some_and(|&n| n >= min_points)
                })
                .copied()
                .collect();
            (!dets.is_empty()).then(|| Trajectory {
                detections: dets,
                ..t.clone()
            })
        })
        .collect()
}

/// Perturbs every labelable box and associates the detections into tracks.
pub fn detect_and_track(
    log: &SceneLog,
    gt: &[Trajectory],
    noise: &NoiseConfig,
    tracker: &TrackerConfig,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let ctx = log.frame_context();
    let dets = gt
        .iter()
        .flat_map(|t| inject_detection_noise(t, noise, &ctx, seed).detections);
    track(&bucket_by_frame(dets, log.n_frames()), tracker)
}

pub fn generate_scene(cfg: &BenchmarkConfig, index: usize) -> Result<BenchScene> {
    let seed = cfg.scene_seed(index);
    let log = simulate_scene(&cfg.scene, seed)?;
    let gt = labelable_gt(&log, cfg.min_points);
    let init = detect_and_track(&log, &gt, &cfg.noise, &cfg.tracker, seed)?;
    let offline_noise = cfg.noise.with_variance_scale(cfg.offline_variance_scale);
    let offline = detect_and_track(&log, &gt, &offline_noise, &cfg.tracker, seed)?;
    Ok(BenchScene {
        index,
        seed,
        log,
        gt,
        init,
        offline,
    })
}
