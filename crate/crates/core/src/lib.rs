//! Learning single-layer noisy-or networks from binary observation samples.
//!
//! A noisy-or network models `n` binary observations as the noisy OR of `m`
//! hidden binary causes: each cause is active independently with probability
//! `rho`, and an active cause `j` fails to trip observation `i` with
//! probability `exp(-W_ij)`. Given only samples of the observation vector,
//! this crate recovers the nonnegative weight matrix `W`.
//!
//! The recovery pipeline works on pointwise-mutual-information (PMI)
//! statistics of the *absence* indicators `z_i = 1 - s_i`:
//!
//! 1. estimate cross-block PMI matrices and the third-order PMI tensor from
//!    samples ([`pmi`]), or evaluate them in closed form from a known model
//!    ([`model`]);
//! 2. build approximate whitening matrices from the three asymmetric PMI
//!    blocks ([`whitening`]);
//! 3. run a randomized orthogonal tensor decomposition that tolerates the
//!    structured (non-vanishing) error carried by the PMI statistics
//!    ([`tensor`]);
//! 4. reassemble the recovered components into weight columns ([`pipeline`]).
//!
//! [`diagnostics`] quantifies the spectral assumptions the method relies on
//! (relative spectral boundedness, incoherence, block conditioning), and
//! [`linalg`] provides the dense spectral substrate shared by all stages.

pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod pmi;
pub mod tensor;
pub mod whitening;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
