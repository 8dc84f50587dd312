//! Numerics for a system of Brownian particles on the unit circle that
//! exchange color labels at collisions, together with its deterministic
//! field limits and path-space cost functionals.
//!
//! The crate has three layers:
//!
//! * [`model`] — static color-space algebra: the diffusion-selection matrix
//!   `D`, the symmetric exchange-mobility matrix `A`, the susceptibility
//!   `χ = diag(1/ρ_c)`, the density-dependent coordinate map `F` and its
//!   inverse, and the transport coefficients of a single tracked particle.
//! * [`sim`] — a Monte-Carlo engine for `N` particles: independent Gaussian
//!   increments, rank re-sorting (so unlabeled positions are exactly
//!   independent Brownian motions), pair local-time accrual via a band or a
//!   bridge-conditioned estimator, and label swaps by Poisson thinning at
//!   rate `λN` along accrued local time. [`diag`] holds the derived
//!   statistics (local densities, replacement residual, adjusted process,
//!   tightness fraction, displacement-variance fits).
//! * [`pde`] and [`rate`] — conservative finite-volume solvers for the four
//!   limiting equations (heat, linear colored, quasi-linear colored system,
//!   drift/swap-bias driven system) and evaluators for the dynamic rate
//!   functional `½∫‖∂_tρ̃ − ½∇·[D∇ρ̃]‖²₋₁,A dt`, the Gibbs initial rate, the
//!   drift entropy cost, and the optimal control construction.
//!
//! Everything is deterministic given a seed; replicas derive per-replica
//! seeds with a splitmix step so results are independent of worker count.

pub mod diag;
pub mod error;
pub mod grid;
pub mod io;
pub mod localtime;
pub mod matrix;
pub mod model;
pub mod pde;
pub mod rate;
pub mod sim;

pub use error::{Error, Result};
pub use grid::{ColorField, FieldTrajectory, Grid};
pub use model::ModelParams;
