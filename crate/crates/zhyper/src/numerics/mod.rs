//! Numeric substrate: tensors with reverse-mode differentiation, the
//! deterministic RNG, the finite-difference gradient oracle, and the
//! ZTSR tensor block format.

pub mod gradcheck;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod ztsr;

pub use ops::{concat_cols, matmul_nt, matmul_raw, matmul_tn, stack_rows, MASK_VALUE};
pub use rng::Rng;
pub use tensor::Tensor;
pub use ztsr::Precision;
