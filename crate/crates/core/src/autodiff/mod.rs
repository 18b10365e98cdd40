//! Dense-tensor reverse-mode automatic differentiation.

mod adam;
mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, DEFAULT_LR};
pub use checkpoint::Checkpoint;
pub use params::{Bound, Param, ParamId, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
