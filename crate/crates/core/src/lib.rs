//! Offline 4D auto-labeling: refine noisy per-frame vehicle detections into
//! trajectories with one fixed size and a smoothed motion path, and measure
//! label quality against simulated ground truth.

pub mod bev;
pub mod error;
pub mod eval;
pub mod geom;
pub mod label;
pub mod nn;
pub mod seed;
pub mod path_branch;
pub mod sim;
pub mod size_branch;
pub mod store;
pub mod track;

pub use error::{Error, Result};
pub use geom::{BoxBEV, Point2, Point3, Point4, Polygon2D, Pose2D, Size2D};
pub use label::{Detection, Trajectory};
