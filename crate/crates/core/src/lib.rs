//! Light-head two-stage detector: operators with analytic gradients, RoI warping,
//! RPN machinery, the single-FC R-CNN head, an analytic cost model and a
//! desk-scale end-to-end pipeline.

pub mod autograd;
pub mod backbone;
pub mod config;
pub mod cost;
pub mod detector;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod ops;
pub mod params;
pub mod roi_warp;
pub mod rpn;
pub mod scene;
pub mod tensor;
pub mod thinmap;
pub mod train;
pub mod verify;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{ConvSpec, Tensor};
