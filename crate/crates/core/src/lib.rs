//! Variational neural cellular automata.
//!
//! An encoder maps an image to a latent distribution, a hypernetwork decoder
//! maps a sampled code to the weights of a neural cellular automaton, and the
//! automaton grows the image from a single seed cell. The crate contains the
//! small reverse-mode engine used to train all of it through the rollout.

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod nca;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
pub use nca::{CellGrid, PerceptionConfig, RuleParams};
pub use tensor::{Rng, Scalar, Tape, Tensor, Var};
pub use vae::{LatentCode, ModelConfig, VaeNca};
