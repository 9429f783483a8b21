//! Minimal dense-tensor algebra for desk-scale contrastive training.
//!
//! Everything is `f64` and row-major. Computation is recorded on a [`Tape`]
//! that is reset between optimizer steps; [`Tape::backward`] walks it in
//! reverse to produce [`Gradients`]. Parameters live in a [`ParamStore`]
//! outside the tape and are bound onto it once per step.

pub mod error;
pub mod gradcheck;
mod kernels;
pub mod optim;
pub mod params;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_many};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Binding, ParamId, ParamStore};
pub use schedule::LrSchedule;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{cosine, l2_normalize_in_place, Tensor};
