//! Reverse-mode differentiation over dense `f64` matrices, plus Adam.

mod adam;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
