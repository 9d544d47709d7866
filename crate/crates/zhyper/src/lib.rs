//! Hypernetwork-modulated low-rank adaptation, end to end at desk scale.
//!
//! The core idea: keep one shared pair of low-rank factors per adapted
//! weight and let a small hypernetwork emit only a rank-sized modulation
//! signal per context — a diagonal (r values) or a small square matrix
//! (r² values) inserted between the factors. The crate provides the
//! pieces to exercise that idea for real: a tensor/autodiff substrate, the
//! factorized hypernetwork, a toy decoder-only transformer whose Q/V
//! projections take adapters, an SFT training loop with the matching
//! schedule and regularizers, synthetic conditioned-generation tasks, the
//! binary formats that move adapters and embeddings around, and a
//! parameter-budget analyzer that compares adapter-generation approaches.

pub mod checks;
pub mod complexity;
pub mod contexts;
pub mod error;
pub mod hypernet;
pub mod lora;
pub mod model;
pub mod numerics;
pub mod params;
pub mod tasks;
pub mod training;
pub mod zadp;

pub use error::{Error, Result};
