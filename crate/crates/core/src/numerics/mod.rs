//! Linear algebra, random streams, MLPs and the optimizer shared by every stage.

mod adamw;
mod matrix;
mod mlp;
mod rng;
pub mod tensor;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use matrix::{axpy, cholesky_solve, dot, kron_vec, norm2, sym_eigh, Matrix, SymEigen};
pub use mlp::{Activation, Layer, LayerTrace, MlpBackward, MlpCache, MlpParams};
pub use rng::{derive_seed, mix64, Rng};
pub use tensor::Tensor;
