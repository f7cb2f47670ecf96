//! Near-field cascaded channel estimation for extremely large-scale RIS.
//!
//! The crate is `no_std` with `alloc`: every routine here is pure computation
//! driven by explicit seeds. File formats, the CLI and experiment orchestration
//! live in the companion `xlris` crate.
//!
//! Layout:
//! - [`linalg`], [`rng`], [`autodiff`], [`optim`]: numerical substrate.
//! - [`channel`]: near-field steering vectors, scenes and pilot observations.
//! - [`polar`]: polar-domain grids, dictionaries and the cascaded dictionary.
//! - [`stage1`]: row-energy formation and the residual convolutional denoiser.
//! - [`stage2`]: subspace projection, classic ISTA and the unrolled
//!   adaptive-dictionary network.
//! - [`omp`]: orthogonal matching pursuit baselines.
//! - [`metrics`]: normalised mean squared error.
#![no_std]
// `!(x > 0.0)` guards are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod channel;
pub mod error;
pub mod exec;
pub mod linalg;
mod math;
pub mod metrics;
pub mod omp;
pub mod optim;
pub mod polar;
pub mod rng;
pub mod stage1;
pub mod stage2;

pub use error::{Error, Result};
pub use linalg::{ComplexMatrix, C64};

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
