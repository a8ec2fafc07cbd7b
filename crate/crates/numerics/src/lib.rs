//! Minimal dense-array numerics for the adaptation lab.
//!
//! Everything is `f64`. A [`Tape`] records forward operations on [`Var`]s and
//! replays their adjoints in reverse; parameters live in a [`ParamStore`]
//! with explicit, additive gradient buffers and a content-hash checkpoint id.

mod error;
pub mod gradcheck;
mod logspace;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{NumericsError, Result};
pub use logspace::{log_sigmoid, log_softmax, logsumexp, sigmoid};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamStore, CHECKPOINT_MANIFEST};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
