//! Minimal dense-tensor arithmetic with reverse-mode automatic
//! differentiation, sized for the fusion network and nothing more.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use params::{xavier_uniform, Binder, ParamEntry, ParamId, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
