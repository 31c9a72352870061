//! Desk-scale instance-mask toolkit: a minimal dense-tensor kernel with
//! explicit backward passes, a dual (spatial + channel) attention module,
//! mask assembly from position-sensitive bases, point-based mask refinement,
//! training losses, and BestDice evaluation.
//!
//! Every numerical operation is a pure function over immutable tensors and
//! ships with an analytic gradient that is verified against central finite
//! differences in 64-bit mode (see [`gradcheck`]).

pub mod assembly;
pub mod attention;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod losses;
pub mod metrics;
pub mod refine;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
