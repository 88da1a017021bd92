//! Dense NCHW tensors with reverse-mode automatic differentiation.

pub mod conv;
mod gemm;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use conv::ConvAlgo;
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use params::{ParamStore, Param};
pub use tape::{pixel_shuffle, pixel_unshuffle, sigmoid, Gradients, Tape, Var};
pub use tensor::{Shape, Tensor};
