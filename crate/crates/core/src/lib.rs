//! Task-specific knowledge distillation for small models, end to end:
//! tensor autodiff, MLP encoders/heads, distillation objectives,
//! synthetic-data construction by sample mixing, training loops, and a
//! multi-seed experiment harness with deterministic reporting.

pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{finite_diff_check, NodeId, Tape, Tensor};
