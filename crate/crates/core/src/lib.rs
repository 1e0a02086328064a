//! Concept-based semantic hashing.
//!
//! Builds a pairwise semantic similarity from image–concept score
//! matrices (temperature softmax, frequency-based concept denoising,
//! cosine between concept distributions), trains a small hashing head
//! against it, and evaluates the resulting binary codes with bit-packed
//! Hamming retrieval.
//!
//! Modules:
//!
//! - [`datastore`]: validated containers and the `UHSM`/`UHSF`/`UHSD`/`UHSB`
//!   binary formats plus the labels TSV.
//! - [`conceptsim`]: concept distributions, denoising and similarity blocks.
//! - [`hashnet`]: the hashing head, loss, gradients, SGD and training loop.
//! - [`hamming`]: binarization, popcount distance, ranking and radius counts.
//! - [`eval`]: MAP, precision at N and precision–recall over radius.

pub mod conceptsim;
pub mod datastore;
pub mod error;
pub mod eval;
pub mod hamming;
pub mod hashnet;
pub mod matrix;

pub use error::{Error, Result};
pub use matrix::DenseMatrix;
