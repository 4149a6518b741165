//! Compact reverse-mode automatic differentiation over dense `f64` tensors.

mod adamw;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adamw::AdamW;
pub use gradcheck::{check_gradients, GradCheck};
pub use params::{ParamStore, CHECKPOINT_FORMAT};
pub use tape::{Gradients, Tape, Var, STD_EPS};
pub use tensor::Tensor;
