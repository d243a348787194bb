//! Data attribution for a toy conditional diffusion model.
//!
//! The pipeline trains a small denoiser, scores training examples against
//! generated queries with a one-step Newton unlearning teacher preconditioned
//! by (E)K-FAC curvature, and distills the resulting ranks into a cosine
//! embedding that answers attribution queries with a single similarity scan.

pub mod attribution;
pub mod curation;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod fisher;
pub mod hash;
pub mod numerics;
pub mod ranker;
pub mod retrieval;

pub use error::{Error, Result};
