pub mod divergences;
pub mod embeddings;
pub mod entropic_ot;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod linear_teachers;
pub mod rng;
pub mod semb;
pub mod shift_metrics;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
