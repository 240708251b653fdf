// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod exec;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod planner;
pub mod prune;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, SRModel};
pub use tensor::{Graph, PadMode, Tensor, Var};
