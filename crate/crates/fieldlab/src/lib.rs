//! # fieldlab
//!
//! A numerical laboratory for controlled mean-field (McKean–Vlasov) stochastic
//! dynamics on a spectrally truncated Hilbert space.
//!
//! ## What lives here
//!
//! The controlled state equation under study is the semilinear stochastic
//! evolution equation
//!
//! ```text
//! dX(t) = A X(t) dt + a(t, X(t), ℒ(X(t)), u(t)) dt + b(t, X(t), ℒ(X(t)), u(t)) dW(t),
//! X(0)  = ξ,
//! ```
//!
//! where `ℒ(X(t))` is the law of the state — the dynamics feel the whole
//! population, not just the individual path — and the cost to be minimized is
//!
//! ```text
//! J(u) = E [ ∫₀ᵀ f(t, X(t), ℒ(X(t)), u(t)) dt + h(X(T), ℒ(X(T))) ].
//! ```
//!
//! Everything is discretized three ways at once:
//!
//! - **Galerkin in space** ([`space`]): `A` is diagonal on a retained
//!   eigenbasis, the semigroup is an exact coordinatewise exponential, and the
//!   cylindrical noise is truncated to finitely many scalar Brownian motions.
//! - **Particles in law** ([`ensemble`]): `ℒ(X(t))` is carried as an
//!   interacting ensemble of N equally-weighted samples; expectations over
//!   independent copies of the population become permuted ensemble averages.
//! - **Exponential Euler in time** ([`forward`]): the mild-form update
//!   `x_{k+1} = S(Δt)[x_k + a Δt + b ΔW]` integrates the stiff linear part
//!   exactly.
//!
//! On top of the forward solver sit the analysis layers:
//!
//! - [`variation`]: first/second-order spike-variation processes and the
//!   remainder-rate and smoothing diagnostics that certify the expansion
//!   orders in the spike width ε.
//! - [`adjoint`]: first-order (vector) and second-order (matrix) backward
//!   equations, solved by Picard iteration with least-squares Monte-Carlo
//!   conditional expectations or by closed-form ODEs on the linear–quadratic
//!   benchmark, plus duality (transposition) residual checks.
//! - [`pmp`]: Hamiltonian, maximum-principle gap reports, cost-expansion
//!   consistency checks, and a control-improvement loop.
//!
//! ## Reproducibility contract
//!
//! Every random draw in the crate derives from a single 64-bit master seed
//! through the counter-based splitting scheme in [`rng`]. Parallel sweeps
//! ([`exec`]) only ever map over pre-assigned streams and reduce in a fixed
//! order, so outputs are bit-identical for any worker count, including the
//! sequential fallback built without the `parallel` feature.

pub mod adjoint;
pub mod coeffs;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod exec;
pub mod forward;
pub mod linalg;
pub mod pmp;
pub mod report;
pub mod rng;
pub mod space;
pub mod stats;
pub mod variation;

pub use error::{Error, Result};
