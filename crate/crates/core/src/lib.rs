//! Training-free compression of linear-layer weight matrices.
//!
//! A weight `W` (m×n, acting as `X·W`) is whitened with the Cholesky factor
//! of its calibration Gram matrix, factorized as an orthonormal dictionary
//! times column-sparse codes by alternating hard-threshold coding and
//! Procrustes updates, then dewhitened and packed (f16 values plus a
//! position bitmask). A one-shot allocator distributes a model-wide
//! compression budget across matrices from their pooled normalized spectra.
//!
//! Module map:
//! - [`tensorio`]: tensor container files, weights, manifests
//! - [`gram`]: Gram accumulation, Cholesky with ridge, whitening
//! - [`factorizer`]: sparse coding, Procrustes, the alternating loop
//! - [`packing`]: bit-exact code packing and storage accounting
//! - [`artifact`]: deployable per-layer artifacts and their serialization
//! - [`allocator`]: global compression-ratio allocation
//! - [`baselines`]: whitened truncated SVD, theoretical-loss allocation, brute-force coding
//! - [`report`]: per-layer and global metrics

// `!(x > y)` is deliberate throughout: it rejects NaN along with the
// out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocator;
pub mod artifact;
pub mod baselines;
pub mod error;
pub mod factorizer;
pub mod gram;
pub mod linalg;
pub mod packing;
pub mod report;
pub mod tensorio;

pub use error::{Error, ErrorKind, Result};
pub use faer::Mat;
