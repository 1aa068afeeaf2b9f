//! Spectral model of the state space, the generator, and the noise.
//!
//! The abstract ingredients — a separable Hilbert space H, a self-adjoint
//! generator A of a contraction semigroup, and a cylindrical Wiener process W
//! on a second Hilbert space — are reduced to their coordinates on a retained
//! eigenbasis:
//!
//! - H becomes ℝ^{n_state}; an H-valued quantity is a [`StateVector`] of
//!   eigenbasis coefficients.
//! - A becomes the diagonal matrix `diag(λ_1, …, λ_{n_state})` with
//!   `λ_k ≤ 0`, so the semigroup `S(t) = diag(e^{λ_k t})` is an exact,
//!   coordinatewise contraction and `A* = A`.
//! - W is truncated to `n_noise` independent scalar Brownian motions with
//!   per-mode covariance weights `w_j > 0`; an increment over `Δt` is a
//!   Gaussian vector with `Var(ΔW_j) = w_j Δt`.
//! - The Hilbert–Schmidt operators carrying diffusion values become
//!   `n_state×n_noise` matrices ([`HsMatrix`]) with the Frobenius norm.
//!
//! The canonical instance to keep in mind is the Dirichlet Laplacian on an
//! interval with its sine basis; the laboratory only ever sees the eigenvalue
//! list, so any diagonal non-positive spectrum is admissible. `n_state = 1`
//! is a first-class configuration: it collapses the evolution equation to a
//! mean-field SDE and is used by the brute-force oracles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::RngStream;

/// Truncated eigenbasis model of (H, A, S(t)) and the noise space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalerkinSpace {
    n_state: usize,
    n_noise: usize,
    eigenvalues: Vec<f64>,
    hs_weights: Vec<f64>,
}

impl GalerkinSpace {
    /// Build a space from the retained spectrum of A and the noise weights.
    ///
    /// Validates the structural invariants:
    /// - `eigenvalues` are finite, non-increasing, and ≤ 0 (contraction);
    /// - `hs_weights` are finite and > 0;
    /// - both dimensions are ≥ 1.
    pub fn new(eigenvalues: Vec<f64>, hs_weights: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::domain("GalerkinSpace::new", "need n_state >= 1"));
        }
        if hs_weights.is_empty() {
            return Err(Error::domain("GalerkinSpace::new", "need n_noise >= 1"));
        }
        if !linalg::all_finite(&eigenvalues) {
            return Err(Error::domain("GalerkinSpace::new", "non-finite eigenvalue"));
        }
        if eigenvalues.iter().any(|&l| l > 0.0) {
            return Err(Error::domain(
                "GalerkinSpace::new",
                format!("eigenvalues must be <= 0, got {eigenvalues:?}"),
            ));
        }
        if eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::domain(
                "GalerkinSpace::new",
                format!("eigenvalues must be sorted non-increasing, got {eigenvalues:?}"),
            ));
        }
        if !linalg::all_finite(&hs_weights) || hs_weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::domain(
                "GalerkinSpace::new",
                format!("hs_weights must be finite and > 0, got {hs_weights:?}"),
            ));
        }
        Ok(GalerkinSpace {
            n_state: eigenvalues.len(),
            n_noise: hs_weights.len(),
            eigenvalues,
            hs_weights,
        })
    }

    /// Dimension of the retained state basis.
    pub fn n_state(&self) -> usize {
        self.n_state
    }

    /// Number of retained scalar noise modes.
    pub fn n_noise(&self) -> usize {
        self.n_noise
    }

    /// Retained spectrum of A (non-increasing, ≤ 0).
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Per-mode noise covariance weights (> 0).
    pub fn hs_weights(&self) -> &[f64] {
        &self.hs_weights
    }

    /// The zero element of H.
    pub fn zero_state(&self) -> StateVector {
        StateVector {
            coords: vec![0.0; self.n_state],
        }
    }

    /// The zero element of the Hilbert–Schmidt space.
    pub fn zero_hs(&self) -> HsMatrix {
        HsMatrix {
            rows: self.n_state,
            cols: self.n_noise,
            entries: vec![0.0; self.n_state * self.n_noise],
        }
    }

    /// Wrap raw eigenbasis coordinates, validating conformance.
    pub fn state_from(&self, coords: Vec<f64>) -> Result<StateVector> {
        if coords.len() != self.n_state {
            return Err(Error::DimensionMismatch {
                context: "GalerkinSpace::state_from",
                expected: self.n_state,
                actual: coords.len(),
            });
        }
        if !linalg::all_finite(&coords) {
            return Err(Error::domain("GalerkinSpace::state_from", "non-finite coordinate"));
        }
        Ok(StateVector { coords })
    }

    /// Wrap raw row-major entries as an `HsMatrix`, validating conformance.
    pub fn hs_from(&self, entries: Vec<f64>) -> Result<HsMatrix> {
        if entries.len() != self.n_state * self.n_noise {
            return Err(Error::DimensionMismatch {
                context: "GalerkinSpace::hs_from",
                expected: self.n_state * self.n_noise,
                actual: entries.len(),
            });
        }
        if !linalg::all_finite(&entries) {
            return Err(Error::domain("GalerkinSpace::hs_from", "non-finite entry"));
        }
        Ok(HsMatrix {
            rows: self.n_state,
            cols: self.n_noise,
            entries,
        })
    }

    /// Apply the semigroup: `S(t) v = (e^{λ_k t} v_k)_k`.
    ///
    /// Exact for the diagonal generator; a contraction since all `λ_k ≤ 0`.
    pub fn semigroup_apply(&self, t: f64, v: &StateVector) -> Result<StateVector> {
        if t < 0.0 || !t.is_finite() {
            return Err(Error::domain(
                "semigroup_apply",
                format!("time must be finite and >= 0, got {t}"),
            ));
        }
        if v.dim() != self.n_state {
            return Err(Error::DimensionMismatch {
                context: "semigroup_apply",
                expected: self.n_state,
                actual: v.dim(),
            });
        }
        let coords = self
            .eigenvalues
            .iter()
            .zip(&v.coords)
            .map(|(&l, &x)| (l * t).exp() * x)
            .collect();
        Ok(StateVector { coords })
    }

    /// Coordinatewise semigroup factors `e^{λ_k dt}`, precomputed once per
    /// time grid so the inner particle loop multiplies instead of
    /// exponentiating.
    pub fn semigroup_factors(&self, dt: f64) -> Result<Vec<f64>> {
        if dt < 0.0 || !dt.is_finite() {
            return Err(Error::domain(
                "semigroup_factors",
                format!("time must be finite and >= 0, got {dt}"),
            ));
        }
        Ok(self.eigenvalues.iter().map(|&l| (l * dt).exp()).collect())
    }

    /// Sample one noise increment: independent Gaussians with variance
    /// `hs_weights[j]·dt` per mode, deterministic given the stream.
    pub fn sample_noise_increment(&self, dt: f64, stream: &mut RngStream) -> Result<Vec<f64>> {
        if dt <= 0.0 || !dt.is_finite() {
            return Err(Error::domain(
                "sample_noise_increment",
                format!("dt must be finite and > 0, got {dt}"),
            ));
        }
        Ok(self
            .hs_weights
            .iter()
            .map(|&w| (w * dt).sqrt() * stream.standard_normal())
            .collect())
    }
}

/// An H-valued quantity: coefficients on the retained eigenbasis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    /// Eigenbasis coefficients (length `n_state`).
    pub coords: Vec<f64>,
}

impl StateVector {
    /// Construct from raw coordinates without a space at hand (callers must
    /// ensure conformance; prefer [`GalerkinSpace::state_from`]).
    pub fn from_coords(coords: Vec<f64>) -> Self {
        StateVector { coords }
    }

    /// Dimension.
    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// Euclidean (H-) inner product.
    pub fn inner(&self, other: &StateVector) -> f64 {
        linalg::dot(&self.coords, &other.coords)
    }

    /// H-norm.
    pub fn norm(&self) -> f64 {
        linalg::norm(&self.coords)
    }

    /// Squared H-norm.
    pub fn norm_sq(&self) -> f64 {
        linalg::norm_sq(&self.coords)
    }

    /// `self ← self + alpha · other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &StateVector) {
        linalg::axpy(alpha, &other.coords, &mut self.coords);
    }

    /// `self ← alpha · self`.
    pub fn scale(&mut self, alpha: f64) {
        linalg::scale(alpha, &mut self.coords);
    }

    /// `self - other` as a new vector.
    pub fn minus(&self, other: &StateVector) -> StateVector {
        let mut out = self.clone();
        out.add_scaled(-1.0, other);
        out
    }
}

/// A Hilbert–Schmidt (diffusion-valued) quantity: an `n_state×n_noise`
/// matrix in row-major storage. The Frobenius norm is the operator's
/// Hilbert–Schmidt norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl HsMatrix {
    /// Construct from dimensions and row-major entries (internal callers;
    /// prefer [`GalerkinSpace::hs_from`]).
    pub fn from_rows(rows: usize, cols: usize, entries: Vec<f64>) -> Self {
        debug_assert_eq!(entries.len(), rows * cols);
        HsMatrix { rows, cols, entries }
    }

    /// State dimension (rows).
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Noise dimension (columns).
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major entries.
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Mutable row-major entries.
    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    /// Entry (r, c).
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries[r * self.cols + c]
    }

    /// Set entry (r, c).
    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.entries[r * self.cols + c] = v;
    }

    /// Frobenius (Hilbert–Schmidt) inner product.
    pub fn frobenius_inner(&self, other: &HsMatrix) -> f64 {
        linalg::dot(&self.entries, &other.entries)
    }

    /// Frobenius (Hilbert–Schmidt) norm.
    pub fn frobenius_norm(&self) -> f64 {
        linalg::norm(&self.entries)
    }

    /// Squared Frobenius norm.
    pub fn frobenius_norm_sq(&self) -> f64 {
        linalg::norm_sq(&self.entries)
    }

    /// `self ← self + alpha · other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &HsMatrix) {
        linalg::axpy(alpha, &other.entries, &mut self.entries);
    }

    /// `self - other` as a new matrix.
    pub fn minus(&self, other: &HsMatrix) -> HsMatrix {
        let mut out = self.clone();
        out.add_scaled(-1.0, other);
        out
    }

    /// Apply to a noise increment: `(b ΔW)_r = Σ_j b_{rj} ΔW_j`.
    pub fn apply_increment(&self, dw: &[f64]) -> StateVector {
        let mut out = vec![0.0; self.rows];
        linalg::matvec(&self.entries, self.rows, self.cols, dw, &mut out);
        StateVector { coords: out }
    }

    /// Accumulate `self · dw` into `out` (allocation-free inner-loop form).
    pub fn accumulate_increment(&self, dw: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.rows);
        for r in 0..self.rows {
            out[r] += linalg::dot(&self.entries[r * self.cols..(r + 1) * self.cols], dw);
        }
    }

    /// Column `j` as a state vector (the loading of noise mode j).
    pub fn column(&self, j: usize) -> StateVector {
        StateVector {
            coords: (0..self.rows).map(|r| self.get(r, j)).collect(),
        }
    }
}
