//! Reverse-mode automatic differentiation over dense `f64` tensors, with the
//! layer primitives (dense, LSTM, 3×3 convolution, batch normalization,
//! additive attention) and the Adam optimizer used by the forecasting models.

mod error;
pub mod gradcheck;
pub mod init;
pub mod nn;
mod ops;
mod optim;
mod params;
pub mod rng;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use init::{xavier_init, xavier_uniform};
pub use ops::{BatchStats, ZERO_FILL};
pub use optim::{adam_step, AdamState};
pub use params::{Graph, Mode, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
