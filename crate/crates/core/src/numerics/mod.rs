//! Dense tensors, reverse-mode differentiation, MLPs and Adam.

mod adam;
mod gradcheck;
pub(crate) mod kernels;
mod mlp;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::grad_check;
pub use mlp::{Activation, FourierFeatures, Mlp};
pub use tape::{Gradients, Precision, Tape, Var};
pub use tensor::Tensor;
