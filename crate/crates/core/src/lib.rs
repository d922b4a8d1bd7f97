//! Multi-task consistency training on a toy speech/text encoder-decoder, and
//! the total-regularization analysis built on top of it.

pub mod data;
pub mod error;
pub mod horizon;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod selfcheck;
pub mod trainer;

pub use error::{Error, Result};
