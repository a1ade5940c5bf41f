//! Initial trajectories and the non-learned baselines: Hungarian tracking,
//! Kalman/RTS smoothing and per-trajectory size selection.

pub mod hungarian;
pub mod kalman;
pub mod size_baseline;
pub mod tracker;

pub use hungarian::{hungarian_match, Assignment};
pub use kalman::{kalman_smooth, KalmanConfig};
pub use size_baseline::{size_baseline, SizeStrategy};
pub use tracker::{bucket_by_frame, track, TrackerConfig};
