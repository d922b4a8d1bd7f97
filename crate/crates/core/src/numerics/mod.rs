//! Deterministic `f64` tensor math with reverse-mode differentiation.

mod adam;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod rng;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{check_gradients, gradient_report, GradCheckReport};
pub use graph::{AttentionSpec, ConvGeometry, CustomBackward, Graph, Var};
pub use rng::{dropout, dropout_mask, RngStream};
pub use tensor::Tensor;
