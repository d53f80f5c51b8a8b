//! Dense reverse-mode differentiation with sparse-dense products and Adam.

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use optim::{Adam, AdamConfig};
pub use params::{init_normal, init_uniform, ParamId, ParamStore};
pub use tape::{sigmoid, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
