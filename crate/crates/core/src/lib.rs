//! Gradient flow for multi-spiked tensor PCA on the normalized Stiefel manifold.
//!
//! The crate is organised bottom-up:
//!
//! - [`manifold`]: sampling, tangent projection and retraction on
//!   `S(N, r) = { X : XᵀX = N·I_r }`.
//! - [`model`]: the spiked tensor instance, its Hamiltonians, correlations and
//!   gradients.
//! - [`dynamics`]: explicit Euler + polar retraction integration of the
//!   rescaled flow `dX/dt = -∇H(X)`.
//! - [`theory`]: closed-form predictors (initialization matrix, greedy maximum
//!   selection, envelopes, hitting times, regime labels, initial-condition
//!   predicates).
//! - [`population`]: the noiseless `r × r` correlation system and
//!   sequential-elimination detection.
//! - [`experiments`]: Monte-Carlo harnesses (concentration, recovery sweeps,
//!   parity).
//! - [`io`]: CSV/JSON/SVG rendering shared by the CLI.
//!
//! Index conventions: everything is 0-based in memory. External formats (CSV
//! headers, JSON reports) use 1-based spike/column indices.

pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod io;
pub mod manifold;
pub mod model;
pub mod population;
pub mod seed;
pub mod theory;

pub use error::{Error, Result};
pub use manifold::{StiefelPoint, TangentVector};
pub use model::{CorrelationMatrix, ModelParams, NoiseTensor, SpikedModel};
