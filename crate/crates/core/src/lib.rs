//! Structural alignment for prototype-based heterogeneous federated learning.
//!
//! `fedsaf-core` is `no_std` (with `alloc`) and carries every piece of math
//! the simulator needs:
//!
//! * [`tensor`]: dense row-major matrices, Jacobi SVD, Householder QR and the
//!   centering / normalization / Gram / RDM helpers the losses are built on.
//! * [`losses`]: coordinate (MSE, cosine, contrastive) and structural (GCSA,
//!   RCSA) alignment losses with analytic gradients, the Procrustes split of
//!   coordinate alignment, and a finite-difference gradient checker.
//! * [`model`]: small tanh MLP feature extractors with a linear head, explicit
//!   forward/backward and SGD.
//! * [`data`]: Gaussian-mixture data and non-IID partitioners.
//! * [`fed`]: the client/server protocol (local training with two-level
//!   alignment, prototype upload and aggregation, round orchestration).
//! * [`analysis`]: effective dimensionality of stacked prototypes and the
//!   three-scenario comparison.
//!
//! File formats, configuration and the command line live in the `fedsaf`
//! companion crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod data;
mod error;
pub mod fed;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::FeatureMatrix;
