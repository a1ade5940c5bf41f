//! Minimal reverse-mode automatic differentiation in float64, with the
//! operators and layers used by the size and path branches.

pub mod adam;
pub mod box_loss;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{gradcheck, gradcheck_params, GradCheckOptions, GradCheckReport};
pub use graph::{ConvSpec, Graph, Reduction, Var};
pub use layers::{EncoderConfig, MlpConfig, UNetConfig};
pub use tensor::{ParamSet, Tensor};
