//! Unsupervised domain adaptation of a toy speech recognizer with rewards from
//! a prompt-conditioned language model.
//!
//! The crate holds the synthetic world, the recognizer policy, the reward LM,
//! the adaptation algorithms, the metrics and the on-disk pipeline that ties
//! them together. Numerics live in `rlfb-numerics`.

pub mod config;
pub mod error;
pub mod eval;
pub mod grads;
pub mod lm;
pub mod pipeline;
pub mod policy;
pub mod report;
pub mod rng;
pub mod trainers;
pub mod world;

pub use config::RunConfig;
pub use error::{Error, Result};

use sha2::{Digest, Sha256};

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
