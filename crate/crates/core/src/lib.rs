//! Single-stage ConvDet object detection at desk scale, together with a
//! static model-cost analyzer and a power-trace energy analyzer.

pub mod convdet;
pub mod cost;
pub mod energy;
pub mod error;
pub mod harness;
pub mod loss;
pub mod network;
pub mod postprocess;
pub mod tensor;

pub use error::{Error, Result};
