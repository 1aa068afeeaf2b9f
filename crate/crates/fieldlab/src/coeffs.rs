//! Coefficient families for the controlled mean-field dynamics, with every
//! derivative the analysis layers consume available in closed form.
//!
//! A model bundles four maps on the Galerkin coordinates,
//!
//! ```text
//!   drift         a(t, x, μ, u) ∈ H
//!   diffusion     b(t, x, μ, u) ∈ ℒ₂⁰   (n_state × n_noise)
//!   running cost  f(t, x, μ, u) ∈ ℝ
//!   terminal cost h(x, μ)       ∈ ℝ
//! ```
//!
//! together with the control set U. The measure argument enters every
//! shipped family only through the scalar interaction statistic
//! `m(μ) = ∫ ⟨ψ, y⟩ μ(dy)` (empirical mean of a fixed linear functional), so
//! all measure derivatives in the Lions sense reduce to ordinary partial
//! derivatives in m:
//!
//! ```text
//!   ∂_μ φ(μ)(y)        = ∂_m φ · ψ          (constant in y)
//!   ∂_y ∂_μ φ(μ)(y)    = 0                  (exactly)
//!   ∂_x ∂_μ φ(μ)(y)    = ∂_x ∂_m φ ⊗ ψ
//!   ∂²_μ φ(μ)(y₁, y₂)  = ∂²_m φ · ψ ⊗ ψ
//! ```
//!
//! These closed forms are cross-checked against the lifted definition of the
//! measure derivative — perturb the whole sample cloud and differentiate the
//! lift — by [`CoefficientModel::check_lions_lift`], and all state/control
//! derivatives against central finite differences by the `fd_check_*`
//! harnesses.
//!
//! Three families ship:
//!
//! - **`scalar_interaction`** — tanh-saturated nonlinear family. Every map
//!   and derivative is globally bounded (outer functions saturate), which is
//!   the regime the error analysis assumes. Controls enter both drift and
//!   diffusion, and the control's drift/diffusion loadings depend on the
//!   state, so control variations shift the state-Jacobians too.
//! - **`linear_quadratic`** — affine dynamics with quadratic costs. Globally
//!   Lipschitz but not bounded; it deliberately trades the boundedness
//!   hypothesis for analytic benchmark solutions (Lyapunov flows for the
//!   adjoints, moment ODEs for the cost) used as oracles elsewhere.
//! - **`custom_table`** — a pure time schedule read from CSV: prescribed
//!   drift/diffusion/running-cost values per time window, no state, measure,
//!   or control dependence (all such derivatives vanish identically). Useful
//!   for forcing-driven diagnostics and for exercising file-driven setups.
//!
//! Diffusion derivative structure: both dynamic families factor the
//! state/measure/control-dependent part of the diffusion through a single
//! column, `b = b₀(t) + c(t,x,m,u) · sᵀ` with a fixed noise profile
//! `s ∈ ℝ^{n_noise}`; consequently per-column Jacobians are `s_j · ∂c/∂x`.
//! The duality test systems elsewhere use general per-column matrices, so
//! nothing downstream relies on this factorization beyond these families.
//!
//! Models are immutable after construction and all evaluators are pure, so
//! values may be shared freely across worker threads.

use std::io::Read as IoRead;

use serde::{Deserialize, Serialize};

use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::linalg::{self, DMat};
use crate::rng::{RngStream, SeedSplitter, StreamDomain};
use crate::space::{GalerkinSpace, HsMatrix, StateVector};

// ── Control sets ─────────────────────────────────────────────────────────

/// The admissible control set U ⊂ ℝ. Finite grids realize nonconvex sets
/// (two-point sets in particular); boxes are intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlSet {
    /// An explicit finite set of admissible values.
    FiniteGrid {
        /// The admissible control values (need not be convex or ordered).
        points: Vec<f64>,
    },
    /// The interval `[lo, hi]`.
    Box {
        /// Lower endpoint.
        lo: f64,
        /// Upper endpoint.
        hi: f64,
    },
}

/// Absolute tolerance for finite-grid membership tests.
const GRID_MEMBERSHIP_TOL: f64 = 1e-9;

impl ControlSet {
    /// Validate non-emptiness and finiteness.
    pub fn validate(&self) -> Result<()> {
        match self {
            ControlSet::FiniteGrid { points } => {
                if points.is_empty() {
                    return Err(Error::domain("ControlSet", "finite_grid needs at least one point"));
                }
                if !linalg::all_finite(points) {
                    return Err(Error::domain("ControlSet", "non-finite grid point"));
                }
            }
            ControlSet::Box { lo, hi } => {
                if !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::domain("ControlSet", "non-finite box endpoint"));
                }
                if lo > hi {
                    return Err(Error::domain("ControlSet", format!("empty box [{lo}, {hi}]")));
                }
            }
        }
        Ok(())
    }

    /// Membership test (finite grids use a small absolute tolerance).
    pub fn contains(&self, u: f64) -> bool {
        if !u.is_finite() {
            return false;
        }
        match self {
            ControlSet::FiniteGrid { points } => points.iter().any(|p| (p - u).abs() <= GRID_MEMBERSHIP_TOL),
            ControlSet::Box { lo, hi } => (*lo..=*hi).contains(&u),
        }
    }

    /// Nearest admissible value.
    pub fn project(&self, u: f64) -> f64 {
        match self {
            ControlSet::FiniteGrid { points } => {
                let mut best = points[0];
                for &p in points {
                    if (p - u).abs() < (best - u).abs() {
                        best = p;
                    }
                }
                best
            }
            ControlSet::Box { lo, hi } => u.clamp(*lo, *hi),
        }
    }

    /// Smallest interval containing the set.
    pub fn hull(&self) -> (f64, f64) {
        match self {
            ControlSet::FiniteGrid { points } => {
                let lo = points.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = points.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            }
            ControlSet::Box { lo, hi } => (*lo, *hi),
        }
    }

    /// The grid points, when the set is a finite grid.
    pub fn grid_points(&self) -> Option<&[f64]> {
        match self {
            ControlSet::FiniteGrid { points } => Some(points),
            ControlSet::Box { .. } => None,
        }
    }

    /// Uniform random admissible value (grids: uniform over points).
    pub fn sample(&self, stream: &mut RngStream) -> f64 {
        match self {
            ControlSet::FiniteGrid { points } => points[stream.uniform_index(points.len())],
            ControlSet::Box { lo, hi } => lo + (hi - lo) * stream.uniform(),
        }
    }
}

// ── Value plumbing ───────────────────────────────────────────────────────

/// Which of the four coefficient maps an operation addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Which {
    /// The drift a.
    Drift,
    /// The diffusion b.
    Diffusion,
    /// The running cost f.
    RunningCost,
    /// The terminal cost h.
    TerminalCost,
}

/// All four coefficient selectors, for test sweeps.
pub const ALL_COEFFS: [Which; 4] = [Which::Drift, Which::Diffusion, Which::RunningCost, Which::TerminalCost];

/// A coefficient (or derivative) value: the codomain depends on the map.
#[derive(Debug, Clone, PartialEq)]
pub enum CoeffValue {
    /// H-valued (drift and its vector-shaped derivatives).
    Vector(StateVector),
    /// ℒ₂⁰-valued (diffusion and its matrix-shaped derivatives).
    Matrix(HsMatrix),
    /// Real-valued (costs and fully-contracted derivatives).
    Scalar(f64),
}

impl CoeffValue {
    /// Euclidean / Frobenius / absolute norm, by shape.
    pub fn norm(&self) -> f64 {
        match self {
            CoeffValue::Vector(v) => v.norm(),
            CoeffValue::Matrix(m) => m.frobenius_norm(),
            CoeffValue::Scalar(s) => s.abs(),
        }
    }

    /// Shape-checked difference (panics on shape mismatch; internal harness
    /// use).
    pub fn minus(&self, other: &CoeffValue) -> CoeffValue {
        match (self, other) {
            (CoeffValue::Vector(a), CoeffValue::Vector(b)) => CoeffValue::Vector(a.minus(b)),
            (CoeffValue::Matrix(a), CoeffValue::Matrix(b)) => CoeffValue::Matrix(a.minus(b)),
            (CoeffValue::Scalar(a), CoeffValue::Scalar(b)) => CoeffValue::Scalar(a - b),
            _ => panic!("CoeffValue shape mismatch"),
        }
    }

    /// Multiply by a scalar.
    pub fn scaled(&self, alpha: f64) -> CoeffValue {
        match self {
            CoeffValue::Vector(v) => {
                let mut w = v.clone();
                w.scale(alpha);
                CoeffValue::Vector(w)
            }
            CoeffValue::Matrix(m) => {
                let mut out = HsMatrix::from_rows(m.rows(), m.cols(), vec![0.0; m.rows() * m.cols()]);
                out.add_scaled(alpha, m);
                CoeffValue::Matrix(out)
            }
            CoeffValue::Scalar(s) => CoeffValue::Scalar(alpha * s),
        }
    }

    /// Unwrap a scalar value (panics otherwise).
    pub fn expect_scalar(&self) -> f64 {
        match self {
            CoeffValue::Scalar(s) => *s,
            other => panic!("expected scalar coefficient value, got {other:?}"),
        }
    }

    /// Unwrap a vector value (panics otherwise).
    pub fn expect_vector(&self) -> &StateVector {
        match self {
            CoeffValue::Vector(v) => v,
            other => panic!("expected vector coefficient value, got {other:?}"),
        }
    }

    /// Unwrap a matrix value (panics otherwise).
    pub fn expect_matrix(&self) -> &HsMatrix {
        match self {
            CoeffValue::Matrix(m) => m,
            other => panic!("expected matrix coefficient value, got {other:?}"),
        }
    }
}

/// Order of a state derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivOrder {
    /// First Fréchet derivative in x.
    First,
    /// Second Fréchet derivative in x.
    Second,
}

/// Which measure derivative [`CoefficientModel::deriv_mu_dir`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasureDerivKind {
    /// `∂_μ φ(μ)(y)`, contracted with one direction.
    Mu,
    /// `∂_y ∂_μ φ(μ)(y)` (vanishes identically for all shipped families).
    YMu,
    /// `∂_x ∂_μ φ(μ)(y)`, contracted with a measure direction and an
    /// x-direction.
    MuX,
    /// `∂²_μ φ(μ)(y₁, y₂)`, contracted with two measure directions.
    MuMu,
}

// ── Family parameter blocks (configuration surface) ──────────────────────

/// Parameters of the tanh-saturated interaction family.
///
/// With `σ` the componentwise tanh, `τ = tanh`, `m` the interaction
/// statistic and `s` the noise profile:
///
/// ```text
/// a = A₁σ(x) + gₐ·τ(κₐm)·(1 + βₘτ⟨w_m,x⟩)·dₐ + u·(1 + βₐτ⟨w_a,x⟩)·vₐ
/// b = b₀ + [ A_bσ(x) + g_b·τ(κ_b m)·(1 + β_{bm}τ⟨w_{bm},x⟩)·d_b
///            + u·(1 + β_bτ⟨w_b,x⟩)·v_b ] · sᵀ
/// f = q_f τ²⟨w_f,x⟩ + g_f τ²(κ_f m) + r_f u² + c_f τ⟨w_f,x⟩ τ(κ_f m)
/// h = q_h τ²⟨w_h,x⟩ + g_h τ²(κ_h m)         + c_h τ⟨w_h,x⟩ τ(κ_h m)
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarInteractionParams {
    /// Interaction direction ψ defining m(μ).
    pub psi: Vec<f64>,
    /// Drift matrix A₁ applied to σ(x).
    pub drift_matrix: Vec<Vec<f64>>,
    /// Mean-coupling gain gₐ in the drift.
    pub drift_mean_gain: f64,
    /// Mean-coupling rate κₐ in the drift.
    pub drift_mean_rate: f64,
    /// State modulation βₘ of the drift's mean term.
    pub drift_mean_state_gain: f64,
    /// State modulation direction w_m of the drift's mean term.
    pub drift_mean_state_dir: Vec<f64>,
    /// Output direction dₐ of the drift's mean term.
    pub drift_mean_dir: Vec<f64>,
    /// State modulation βₐ of the drift's control term.
    pub drift_control_state_gain: f64,
    /// State modulation direction w_a of the drift's control term.
    pub drift_control_state_dir: Vec<f64>,
    /// Output direction vₐ of the drift's control term.
    pub drift_control_dir: Vec<f64>,
    /// Constant diffusion block b₀ (n_state × n_noise).
    pub diffusion_const: Vec<Vec<f64>>,
    /// Diffusion matrix A_b applied to σ(x).
    pub diffusion_matrix: Vec<Vec<f64>>,
    /// Mean-coupling gain g_b in the diffusion.
    pub diffusion_mean_gain: f64,
    /// Mean-coupling rate κ_b in the diffusion.
    pub diffusion_mean_rate: f64,
    /// State modulation β_bm of the diffusion's mean term.
    pub diffusion_mean_state_gain: f64,
    /// State modulation direction w_bm of the diffusion's mean term.
    pub diffusion_mean_state_dir: Vec<f64>,
    /// Output direction d_b of the diffusion's mean term.
    pub diffusion_mean_dir: Vec<f64>,
    /// State modulation β_b of the diffusion's control term.
    pub diffusion_control_state_gain: f64,
    /// State modulation direction w_b of the diffusion's control term.
    pub diffusion_control_state_dir: Vec<f64>,
    /// Output direction v_b of the diffusion's control term.
    pub diffusion_control_dir: Vec<f64>,
    /// Noise profile s (length n_noise) multiplying the structured column.
    pub noise_profile: Vec<f64>,
    /// Running-cost state weight q_f.
    pub running_state_weight: f64,
    /// Running-cost state direction w_f.
    pub running_state_dir: Vec<f64>,
    /// Running-cost mean weight g_f.
    pub running_mean_weight: f64,
    /// Running-cost mean rate κ_f.
    pub running_mean_rate: f64,
    /// Running-cost control weight r_f (u² coefficient).
    pub running_control_weight: f64,
    /// Running-cost state–mean cross weight c_f.
    pub running_cross_weight: f64,
    /// Terminal-cost state weight q_h.
    pub terminal_state_weight: f64,
    /// Terminal-cost state direction w_h.
    pub terminal_state_dir: Vec<f64>,
    /// Terminal-cost mean weight g_h.
    pub terminal_mean_weight: f64,
    /// Terminal-cost mean rate κ_h.
    pub terminal_mean_rate: f64,
    /// Terminal-cost state–mean cross weight c_h.
    pub terminal_cross_weight: f64,
}

/// Parameters of the linear-quadratic family:
///
/// ```text
/// a = A₁x + ā₁·m·dₐ + B₁·u·eₐ
/// b = b₀ + (C₁x + c̄₁·m·d_b + D₁·u·e_b) · sᵀ
/// f = ½⟨x, Mx⟩ + ½ f̄ m² + ½ R u²
/// h = ½⟨x, Gx⟩ + ⟨g₁, x⟩ + ½ h̄ m²
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearQuadraticParams {
    /// Interaction direction ψ defining m(μ).
    pub psi: Vec<f64>,
    /// Drift matrix A₁.
    pub drift_matrix: Vec<Vec<f64>>,
    /// Mean-coupling gain ā₁ in the drift.
    pub drift_mean_gain: f64,
    /// Output direction dₐ of the drift's mean term.
    pub drift_mean_dir: Vec<f64>,
    /// Control gain B₁ in the drift.
    pub drift_control_gain: f64,
    /// Control direction eₐ in the drift.
    pub drift_control_dir: Vec<f64>,
    /// Constant diffusion block b₀ (n_state × n_noise).
    pub diffusion_const: Vec<Vec<f64>>,
    /// Diffusion state matrix C₁.
    pub diffusion_matrix: Vec<Vec<f64>>,
    /// Mean-coupling gain c̄₁ in the diffusion.
    pub diffusion_mean_gain: f64,
    /// Output direction d_b of the diffusion's mean term.
    pub diffusion_mean_dir: Vec<f64>,
    /// Control gain D₁ in the diffusion.
    pub diffusion_control_gain: f64,
    /// Control direction e_b in the diffusion.
    pub diffusion_control_dir: Vec<f64>,
    /// Noise profile s (length n_noise).
    pub noise_profile: Vec<f64>,
    /// Running-cost state matrix M (symmetric).
    pub running_state_quad: Vec<Vec<f64>>,
    /// Running-cost mean weight f̄.
    pub running_mean_quad: f64,
    /// Running-cost control weight R.
    pub running_control_quad: f64,
    /// Terminal-cost state matrix G (symmetric).
    pub terminal_state_quad: Vec<Vec<f64>>,
    /// Terminal-cost mean weight h̄.
    pub terminal_mean_quad: f64,
    /// Linear terminal-cost coefficient g₁ (empty means zero).
    #[serde(default)]
    pub terminal_linear: Vec<f64>,
}

/// Parameters of the schedule-driven family: coefficients are read from a
/// CSV file with columns `t, a_0..a_{n−1}, b_00..b_{n−1,m−1}, f` (header row
/// skipped, diffusion row-major), interpreted piecewise-constant from the
/// left. The terminal cost is the given constant. No state, measure, or
/// control dependence: all such derivatives vanish identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomTableParams {
    /// Path to the CSV schedule.
    pub schedule: String,
    /// Constant terminal cost.
    pub terminal_cost: f64,
}

/// A coefficient family plus its parameters, as declared in configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FamilySpec {
    /// Tanh-saturated interaction family.
    ScalarInteraction(ScalarInteractionParams),
    /// Affine dynamics, quadratic costs.
    LinearQuadratic(LinearQuadraticParams),
    /// CSV time schedule.
    CustomTable(CustomTableParams),
}

// ── Runtime families ─────────────────────────────────────────────────────

fn mat_from(nested: &[Vec<f64>], rows: usize, cols: usize, ctx: &'static str) -> Result<DMat> {
    if nested.len() != rows {
        return Err(Error::DimensionMismatch {
            context: ctx,
            expected: rows,
            actual: nested.len(),
        });
    }
    for row in nested {
        if row.len() != cols {
            return Err(Error::DimensionMismatch {
                context: ctx,
                expected: cols,
                actual: row.len(),
            });
        }
        if !linalg::all_finite(row) {
            return Err(Error::domain(ctx, "non-finite matrix entry"));
        }
    }
    Ok(DMat::from_rows(nested))
}

fn vec_from(v: &[f64], len: usize, ctx: &'static str) -> Result<Vec<f64>> {
    if v.len() != len {
        return Err(Error::DimensionMismatch {
            context: ctx,
            expected: len,
            actual: v.len(),
        });
    }
    if !linalg::all_finite(v) {
        return Err(Error::domain(ctx, "non-finite vector entry"));
    }
    Ok(v.to_vec())
}

fn finite_scalar(v: f64, ctx: &'static str) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::domain(ctx, format!("non-finite parameter {v}")));
    }
    Ok(v)
}

#[inline]
fn sech2(s: f64) -> f64 {
    let t = s.tanh();
    1.0 - t * t
}

/// One tanh-saturated vector block
/// `v(x, m, u) = L σ(x) + g·τ(κm)(1 + β_s τ⟨w_s,x⟩)·d + u(1 + β_c τ⟨w_c,x⟩)·e`
/// with all its partial derivatives. Used for both the drift and the
/// diffusion's structured column.
#[derive(Debug, Clone, PartialEq)]
struct SaturatedBlock {
    lin: DMat,
    mean_gain: f64,
    mean_rate: f64,
    mean_state_gain: f64,
    mean_state_dir: Vec<f64>,
    mean_dir: Vec<f64>,
    control_state_gain: f64,
    control_state_dir: Vec<f64>,
    control_dir: Vec<f64>,
}

impl SaturatedBlock {
    fn value(&self, x: &[f64], m: f64, u: f64) -> Vec<f64> {
        let sig: Vec<f64> = x.iter().map(|v| v.tanh()).collect();
        let mut out = self.lin.apply(&sig);
        let mean_amp = self.mean_gain
            * (self.mean_rate * m).tanh()
            * (1.0 + self.mean_state_gain * linalg::dot(&self.mean_state_dir, x).tanh());
        linalg::axpy(mean_amp, &self.mean_dir, &mut out);
        let ctrl_amp = u * (1.0 + self.control_state_gain * linalg::dot(&self.control_state_dir, x).tanh());
        linalg::axpy(ctrl_amp, &self.control_dir, &mut out);
        out
    }

    /// Jacobian ∂v/∂x as a dense matrix.
    fn jac_x(&self, x: &[f64], m: f64, u: f64) -> DMat {
        let n = x.len();
        let mut jac = DMat::zeros(self.lin.rows, n);
        for i in 0..self.lin.rows {
            for j in 0..n {
                jac.set(i, j, self.lin.get(i, j) * sech2(x[j]));
            }
        }
        let sm = linalg::dot(&self.mean_state_dir, x);
        let coef_m = self.mean_gain * (self.mean_rate * m).tanh() * self.mean_state_gain * sech2(sm);
        jac.add_scaled(coef_m, &DMat::outer(&self.mean_dir, &self.mean_state_dir));
        let sc = linalg::dot(&self.control_state_dir, x);
        let coef_c = u * self.control_state_gain * sech2(sc);
        jac.add_scaled(coef_c, &DMat::outer(&self.control_dir, &self.control_state_dir));
        jac
    }

    /// Second derivative contracted with two directions: ∂²v(y, w).
    fn hess_apply(&self, x: &[f64], m: f64, u: f64, y: &[f64], w: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut out = vec![0.0; self.lin.rows];
        // σ''(s) = −2 tanh(s) sech²(s), componentwise in the linear block.
        for k in 0..n {
            let spp = -2.0 * x[k].tanh() * sech2(x[k]);
            let factor = spp * y[k] * w[k];
            if factor != 0.0 {
                for i in 0..self.lin.rows {
                    out[i] += self.lin.get(i, k) * factor;
                }
            }
        }
        let sm = linalg::dot(&self.mean_state_dir, x);
        let coef_m = self.mean_gain
            * (self.mean_rate * m).tanh()
            * self.mean_state_gain
            * (-2.0 * sm.tanh() * sech2(sm))
            * linalg::dot(&self.mean_state_dir, y)
            * linalg::dot(&self.mean_state_dir, w);
        linalg::axpy(coef_m, &self.mean_dir, &mut out);
        let sc = linalg::dot(&self.control_state_dir, x);
        let coef_c = u
            * self.control_state_gain
            * (-2.0 * sc.tanh() * sech2(sc))
            * linalg::dot(&self.control_state_dir, y)
            * linalg::dot(&self.control_state_dir, w);
        linalg::axpy(coef_c, &self.control_dir, &mut out);
        out
    }

    /// Second derivative contracted with a covector p: the matrix
    /// `H[j,k] = Σᵢ pᵢ ∂²vᵢ/∂x_j∂x_k` (symmetric).
    fn hess_contract(&self, x: &[f64], m: f64, u: f64, p: &[f64]) -> DMat {
        let n = x.len();
        let mut out = DMat::zeros(n, n);
        let lt_p = self.lin.apply_transpose(p);
        for k in 0..n {
            let spp = -2.0 * x[k].tanh() * sech2(x[k]);
            out.set(k, k, spp * lt_p[k]);
        }
        let sm = linalg::dot(&self.mean_state_dir, x);
        let coef_m = self.mean_gain
            * (self.mean_rate * m).tanh()
            * self.mean_state_gain
            * (-2.0 * sm.tanh() * sech2(sm))
            * linalg::dot(&self.mean_dir, p);
        out.add_scaled(coef_m, &DMat::outer(&self.mean_state_dir, &self.mean_state_dir));
        let sc = linalg::dot(&self.control_state_dir, x);
        let coef_c = u
            * self.control_state_gain
            * (-2.0 * sc.tanh() * sech2(sc))
            * linalg::dot(&self.control_dir, p);
        out.add_scaled(coef_c, &DMat::outer(&self.control_state_dir, &self.control_state_dir));
        out
    }

    fn dm(&self, x: &[f64], m: f64) -> Vec<f64> {
        let amp = self.mean_gain
            * self.mean_rate
            * sech2(self.mean_rate * m)
            * (1.0 + self.mean_state_gain * linalg::dot(&self.mean_state_dir, x).tanh());
        self.mean_dir.iter().map(|d| amp * d).collect()
    }

    /// Mixed derivative ∂x(∂m v) as a matrix (apply to an x-direction).
    fn dm_dx(&self, x: &[f64], m: f64) -> DMat {
        let sm = linalg::dot(&self.mean_state_dir, x);
        let coef = self.mean_gain * self.mean_rate * sech2(self.mean_rate * m) * self.mean_state_gain * sech2(sm);
        let mut out = DMat::outer(&self.mean_dir, &self.mean_state_dir);
        for v in out.data.iter_mut() {
            *v *= coef;
        }
        out
    }

    fn d2m(&self, x: &[f64], m: f64) -> Vec<f64> {
        let km = self.mean_rate * m;
        let amp = self.mean_gain
            * self.mean_rate
            * self.mean_rate
            * (-2.0 * km.tanh() * sech2(km))
            * (1.0 + self.mean_state_gain * linalg::dot(&self.mean_state_dir, x).tanh());
        self.mean_dir.iter().map(|d| amp * d).collect()
    }

    fn du(&self, x: &[f64]) -> Vec<f64> {
        let amp = 1.0 + self.control_state_gain * linalg::dot(&self.control_state_dir, x).tanh();
        self.control_dir.iter().map(|d| amp * d).collect()
    }
}

/// One tanh-saturated scalar cost block
/// `c(x, m, u) = q τ²⟨w,x⟩ + g τ²(κm) + r u² + c τ⟨w,x⟩ τ(κm)`.
#[derive(Debug, Clone, PartialEq)]
struct SaturatedCostBlock {
    state_weight: f64,
    state_dir: Vec<f64>,
    mean_weight: f64,
    mean_rate: f64,
    control_weight: f64,
    cross_weight: f64,
}

impl SaturatedCostBlock {
    fn value(&self, x: &[f64], m: f64, u: f64) -> f64 {
        let ts = linalg::dot(&self.state_dir, x).tanh();
        let tm = (self.mean_rate * m).tanh();
        self.state_weight * ts * ts
            + self.mean_weight * tm * tm
            + self.control_weight * u * u
            + self.cross_weight * ts * tm
    }

    fn grad_x(&self, x: &[f64], m: f64) -> Vec<f64> {
        let s = linalg::dot(&self.state_dir, x);
        let tm = (self.mean_rate * m).tanh();
        let amp = 2.0 * self.state_weight * s.tanh() * sech2(s) + self.cross_weight * sech2(s) * tm;
        self.state_dir.iter().map(|w| amp * w).collect()
    }

    fn hess_x(&self, x: &[f64], m: f64) -> DMat {
        let s = linalg::dot(&self.state_dir, x);
        let tm = (self.mean_rate * m).tanh();
        let c2 = sech2(s);
        let t = s.tanh();
        let amp = 2.0 * self.state_weight * (c2 * c2 - 2.0 * t * t * c2) + self.cross_weight * (-2.0 * t * c2) * tm;
        let mut out = DMat::outer(&self.state_dir, &self.state_dir);
        for v in out.data.iter_mut() {
            *v *= amp;
        }
        out
    }

    fn dm(&self, x: &[f64], m: f64) -> f64 {
        let km = self.mean_rate * m;
        let ts = linalg::dot(&self.state_dir, x).tanh();
        (2.0 * self.mean_weight * km.tanh() + self.cross_weight * ts) * self.mean_rate * sech2(km)
    }

    fn dm_dx(&self, x: &[f64], m: f64) -> Vec<f64> {
        let s = linalg::dot(&self.state_dir, x);
        let km = self.mean_rate * m;
        let amp = self.cross_weight * sech2(s) * self.mean_rate * sech2(km);
        self.state_dir.iter().map(|w| amp * w).collect()
    }

    fn d2m(&self, x: &[f64], m: f64) -> f64 {
        let km = self.mean_rate * m;
        let c2 = sech2(km);
        let t = km.tanh();
        let ts = linalg::dot(&self.state_dir, x).tanh();
        2.0 * self.mean_weight * self.mean_rate * self.mean_rate * c2 * c2
            + (2.0 * self.mean_weight * t + self.cross_weight * ts) * self.mean_rate * self.mean_rate * (-2.0 * t * c2)
    }

    fn du(&self, u: f64) -> f64 {
        2.0 * self.control_weight * u
    }

    fn d2u(&self) -> f64 {
        2.0 * self.control_weight
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SaturatedModel {
    psi: Vec<f64>,
    drift: SaturatedBlock,
    diffusion_const: DMat,
    diffusion_core: SaturatedBlock,
    noise_profile: Vec<f64>,
    running: SaturatedCostBlock,
    terminal: SaturatedCostBlock,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct QuadraticModel {
    pub(crate) psi: Vec<f64>,
    pub(crate) drift_matrix: DMat,
    pub(crate) drift_mean_gain: f64,
    pub(crate) drift_mean_dir: Vec<f64>,
    pub(crate) drift_control_gain: f64,
    pub(crate) drift_control_dir: Vec<f64>,
    pub(crate) diffusion_const: DMat,
    pub(crate) diffusion_matrix: DMat,
    pub(crate) diffusion_mean_gain: f64,
    pub(crate) diffusion_mean_dir: Vec<f64>,
    pub(crate) diffusion_control_gain: f64,
    pub(crate) diffusion_control_dir: Vec<f64>,
    pub(crate) noise_profile: Vec<f64>,
    pub(crate) running_state_quad: DMat,
    pub(crate) running_mean_quad: f64,
    pub(crate) running_control_quad: f64,
    pub(crate) terminal_state_quad: DMat,
    pub(crate) terminal_mean_quad: f64,
    pub(crate) terminal_linear: Vec<f64>,
}

/// One row of the schedule family.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleRow {
    /// Activation time (row applies on `[t, next row's t)`).
    pub t: f64,
    /// Drift value.
    pub drift: Vec<f64>,
    /// Diffusion value, row-major n_state × n_noise.
    pub diffusion: Vec<f64>,
    /// Running-cost value.
    pub running: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct ScheduleModel {
    rows: Vec<ScheduleRow>,
    terminal: f64,
    n_state: usize,
    n_noise: usize,
}

impl ScheduleModel {
    fn row_at(&self, t: f64) -> &ScheduleRow {
        // Piecewise constant from the left; times before the first row use
        // the first row.
        let mut active = &self.rows[0];
        for row in &self.rows {
            if row.t <= t {
                active = row;
            } else {
                break;
            }
        }
        active
    }
}

#[derive(Debug, Clone, PartialEq)]
enum RuntimeFamily {
    Saturated(SaturatedModel),
    Quadratic(QuadraticModel),
    Schedule(ScheduleModel),
}

// ── The model ────────────────────────────────────────────────────────────

/// Ceiling for the construction-time Lipschitz probe.
pub const LIPSCHITZ_DEFAULT_CEILING: f64 = 1e6;

/// Default finite-difference step sweep for derivative checks.
pub const DEFAULT_FD_STEPS: [f64; 4] = [1e-2, 1e-3, 1e-4, 1e-5];

/// Default perturbation sweep for the lifted measure-derivative check.
pub const DEFAULT_LIFT_EPS: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

/// Result of randomized Lipschitz probing over a bounded domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    /// Number of random pairs probed.
    pub pairs: usize,
    /// Radius of the state/mean ball probed.
    pub radius: f64,
    /// Largest value norm observed across a, b, f, h.
    pub max_value_norm: f64,
    /// Largest difference-quotient ratio of the values.
    pub max_value_ratio: f64,
    /// Largest difference-quotient ratio of the first derivatives.
    pub max_first_deriv_ratio: f64,
}

/// One step of a finite-difference sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdSweepPoint {
    /// Step (or lift perturbation) size.
    pub step: f64,
    /// Relative error of the difference quotient against the closed form.
    pub rel_error: f64,
}

/// Result of a central finite-difference sweep against a closed-form
/// derivative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdSweepReport {
    /// Errors per step, in the order probed.
    pub points: Vec<FdSweepPoint>,
    /// Smallest relative error across the sweep.
    pub best_rel_error: f64,
    /// Observed convergence order of the difference quotient (log–log
    /// slope), when enough points sit above roundoff.
    pub observed_order: Option<f64>,
    /// True when the quotient matches to machine precision at every step
    /// (affine cases), making an order fit meaningless.
    pub exact: bool,
}

impl FdSweepReport {
    fn from_errors(steps: &[f64], errors: Vec<f64>) -> FdSweepReport {
        let points: Vec<FdSweepPoint> = steps
            .iter()
            .zip(&errors)
            .map(|(&step, &rel_error)| FdSweepPoint { step, rel_error })
            .collect();
        let best_rel_error = errors.iter().cloned().fold(f64::INFINITY, f64::min);
        let exact = errors.iter().all(|&e| e <= 1e-12);
        // Fit the convergence order on the truncation-dominated branch only:
        // sort by decreasing step and keep the points strictly before the
        // error minimum — the minimum itself and everything past it are
        // (partially) roundoff-dominated. Points within two decades of
        // machine precision are dropped regardless.
        let mut sorted: Vec<(f64, f64)> = steps.iter().cloned().zip(errors.iter().cloned()).collect();
        sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite steps"));
        let min_idx = sorted
            .iter()
            .enumerate()
            .min_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).expect("finite errors"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let end = if min_idx >= 2 { min_idx } else { (min_idx + 1).min(sorted.len()) };
        let usable: Vec<(f64, f64)> = sorted[..end].iter().filter(|(_, e)| *e > 1e-10).cloned().collect();
        let observed_order = if usable.len() >= 2 {
            let xs: Vec<f64> = usable.iter().map(|(s, _)| *s).collect();
            let ys: Vec<f64> = usable.iter().map(|(_, e)| *e).collect();
            crate::stats::log_log_slope(&xs, &ys).ok().map(|fit| fit.slope)
        } else {
            None
        };
        FdSweepReport {
            points,
            best_rel_error,
            observed_order,
            exact,
        }
    }

    /// Pass criterion used by the validation suites: either exact, or the
    /// best error is below `tol` with observed order in `[lo, hi]`.
    ///
    /// Sweeps whose best error is below `1e-6` pass irrespective of the
    /// fitted order: at that accuracy the quotient sits at (or near) its
    /// roundoff floor, where no order is measurable, while any structurally
    /// wrong closed form plateaus many decades higher.
    pub fn passes(&self, tol: f64, lo: f64, hi: f64) -> bool {
        const NEAR_EXACT_REL: f64 = 1e-6;
        if self.exact {
            return true;
        }
        if self.best_rel_error > tol {
            return false;
        }
        if self.best_rel_error <= NEAR_EXACT_REL {
            return true;
        }
        match self.observed_order {
            Some(order) => (lo..=hi).contains(&order),
            None => false,
        }
    }
}

/// Report of the lifted measure-derivative check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftCheckReport {
    /// Per-ε relative errors of the lift difference quotient against the
    /// particle average of the closed-form measure derivative.
    pub points: Vec<FdSweepPoint>,
    /// Smallest relative error across the sweep.
    pub best_rel_error: f64,
    /// Observed convergence order in ε, when measurable.
    pub observed_order: Option<f64>,
    /// True when every ε matches to machine precision (linear lifts).
    pub exact: bool,
}

/// A coefficient model: family, interaction direction, control set.
///
/// Immutable after construction; evaluators are pure and thread-safe.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientModel {
    n_state: usize,
    n_noise: usize,
    control_dim: usize,
    control_set: ControlSet,
    psi: StateVector,
    family: RuntimeFamily,
    lipschitz: LipschitzReport,
}

impl CoefficientModel {
    /// Build and validate a model for `space`, then run a short randomized
    /// boundedness/Lipschitz probe over the reference ball (radius 5) and
    /// reject non-finite or exploding families.
    pub fn new(space: &GalerkinSpace, spec: FamilySpec, control_set: ControlSet) -> Result<Self> {
        control_set.validate()?;
        let n = space.n_state();
        let nn = space.n_noise();
        let family = match &spec {
            FamilySpec::ScalarInteraction(p) => RuntimeFamily::Saturated(SaturatedModel {
                psi: vec_from(&p.psi, n, "scalar_interaction.psi")?,
                drift: SaturatedBlock {
                    lin: mat_from(&p.drift_matrix, n, n, "scalar_interaction.drift_matrix")?,
                    mean_gain: finite_scalar(p.drift_mean_gain, "scalar_interaction.drift_mean_gain")?,
                    mean_rate: finite_scalar(p.drift_mean_rate, "scalar_interaction.drift_mean_rate")?,
                    mean_state_gain: finite_scalar(p.drift_mean_state_gain, "scalar_interaction.drift_mean_state_gain")?,
                    mean_state_dir: vec_from(&p.drift_mean_state_dir, n, "scalar_interaction.drift_mean_state_dir")?,
                    mean_dir: vec_from(&p.drift_mean_dir, n, "scalar_interaction.drift_mean_dir")?,
                    control_state_gain: finite_scalar(
                        p.drift_control_state_gain,
                        "scalar_interaction.drift_control_state_gain",
                    )?,
                    control_state_dir: vec_from(
                        &p.drift_control_state_dir,
                        n,
                        "scalar_interaction.drift_control_state_dir",
                    )?,
                    control_dir: vec_from(&p.drift_control_dir, n, "scalar_interaction.drift_control_dir")?,
                },
                diffusion_const: mat_from(&p.diffusion_const, n, nn, "scalar_interaction.diffusion_const")?,
                diffusion_core: SaturatedBlock {
                    lin: mat_from(&p.diffusion_matrix, n, n, "scalar_interaction.diffusion_matrix")?,
                    mean_gain: finite_scalar(p.diffusion_mean_gain, "scalar_interaction.diffusion_mean_gain")?,
                    mean_rate: finite_scalar(p.diffusion_mean_rate, "scalar_interaction.diffusion_mean_rate")?,
                    mean_state_gain: finite_scalar(
                        p.diffusion_mean_state_gain,
                        "scalar_interaction.diffusion_mean_state_gain",
                    )?,
                    mean_state_dir: vec_from(
                        &p.diffusion_mean_state_dir,
                        n,
                        "scalar_interaction.diffusion_mean_state_dir",
                    )?,
                    mean_dir: vec_from(&p.diffusion_mean_dir, n, "scalar_interaction.diffusion_mean_dir")?,
                    control_state_gain: finite_scalar(
                        p.diffusion_control_state_gain,
                        "scalar_interaction.diffusion_control_state_gain",
                    )?,
                    control_state_dir: vec_from(
                        &p.diffusion_control_state_dir,
                        n,
                        "scalar_interaction.diffusion_control_state_dir",
                    )?,
                    control_dir: vec_from(&p.diffusion_control_dir, n, "scalar_interaction.diffusion_control_dir")?,
                },
                noise_profile: vec_from(&p.noise_profile, nn, "scalar_interaction.noise_profile")?,
                running: SaturatedCostBlock {
                    state_weight: finite_scalar(p.running_state_weight, "scalar_interaction.running_state_weight")?,
                    state_dir: vec_from(&p.running_state_dir, n, "scalar_interaction.running_state_dir")?,
                    mean_weight: finite_scalar(p.running_mean_weight, "scalar_interaction.running_mean_weight")?,
                    mean_rate: finite_scalar(p.running_mean_rate, "scalar_interaction.running_mean_rate")?,
                    control_weight: finite_scalar(p.running_control_weight, "scalar_interaction.running_control_weight")?,
                    cross_weight: finite_scalar(p.running_cross_weight, "scalar_interaction.running_cross_weight")?,
                },
                terminal: SaturatedCostBlock {
                    state_weight: finite_scalar(p.terminal_state_weight, "scalar_interaction.terminal_state_weight")?,
                    state_dir: vec_from(&p.terminal_state_dir, n, "scalar_interaction.terminal_state_dir")?,
                    mean_weight: finite_scalar(p.terminal_mean_weight, "scalar_interaction.terminal_mean_weight")?,
                    mean_rate: finite_scalar(p.terminal_mean_rate, "scalar_interaction.terminal_mean_rate")?,
                    control_weight: 0.0,
                    cross_weight: finite_scalar(p.terminal_cross_weight, "scalar_interaction.terminal_cross_weight")?,
                },
            }),
            FamilySpec::LinearQuadratic(p) => {
                let running_state_quad = mat_from(&p.running_state_quad, n, n, "linear_quadratic.running_state_quad")?;
                let terminal_state_quad = mat_from(&p.terminal_state_quad, n, n, "linear_quadratic.terminal_state_quad")?;
                let sym_tol = 1e-12;
                if running_state_quad.asymmetry() > sym_tol * (1.0 + running_state_quad.frobenius_norm()) {
                    return Err(Error::domain("linear_quadratic.running_state_quad", "matrix must be symmetric"));
                }
                if terminal_state_quad.asymmetry() > sym_tol * (1.0 + terminal_state_quad.frobenius_norm()) {
                    return Err(Error::domain("linear_quadratic.terminal_state_quad", "matrix must be symmetric"));
                }
                let terminal_linear = if p.terminal_linear.is_empty() {
                    vec![0.0; n]
                } else if p.terminal_linear.len() == n {
                    p.terminal_linear.clone()
                } else {
                    return Err(Error::DimensionMismatch {
                        context: "linear_quadratic.terminal_linear",
                        expected: n,
                        actual: p.terminal_linear.len(),
                    });
                };
                RuntimeFamily::Quadratic(QuadraticModel {
                    psi: vec_from(&p.psi, n, "linear_quadratic.psi")?,
                    drift_matrix: mat_from(&p.drift_matrix, n, n, "linear_quadratic.drift_matrix")?,
                    drift_mean_gain: finite_scalar(p.drift_mean_gain, "linear_quadratic.drift_mean_gain")?,
                    drift_mean_dir: vec_from(&p.drift_mean_dir, n, "linear_quadratic.drift_mean_dir")?,
                    drift_control_gain: finite_scalar(p.drift_control_gain, "linear_quadratic.drift_control_gain")?,
                    drift_control_dir: vec_from(&p.drift_control_dir, n, "linear_quadratic.drift_control_dir")?,
                    diffusion_const: mat_from(&p.diffusion_const, n, nn, "linear_quadratic.diffusion_const")?,
                    diffusion_matrix: mat_from(&p.diffusion_matrix, n, n, "linear_quadratic.diffusion_matrix")?,
                    diffusion_mean_gain: finite_scalar(p.diffusion_mean_gain, "linear_quadratic.diffusion_mean_gain")?,
                    diffusion_mean_dir: vec_from(&p.diffusion_mean_dir, n, "linear_quadratic.diffusion_mean_dir")?,
                    diffusion_control_gain: finite_scalar(
                        p.diffusion_control_gain,
                        "linear_quadratic.diffusion_control_gain",
                    )?,
                    diffusion_control_dir: vec_from(&p.diffusion_control_dir, n, "linear_quadratic.diffusion_control_dir")?,
                    noise_profile: vec_from(&p.noise_profile, nn, "linear_quadratic.noise_profile")?,
                    running_state_quad,
                    running_mean_quad: finite_scalar(p.running_mean_quad, "linear_quadratic.running_mean_quad")?,
                    running_control_quad: finite_scalar(p.running_control_quad, "linear_quadratic.running_control_quad")?,
                    terminal_state_quad,
                    terminal_mean_quad: finite_scalar(p.terminal_mean_quad, "linear_quadratic.terminal_mean_quad")?,
                    terminal_linear,
                })
            }
            FamilySpec::CustomTable(p) => {
                let file = std::fs::File::open(&p.schedule).map_err(Error::Io)?;
                let rows = parse_schedule_csv(file, n, nn)?;
                RuntimeFamily::Schedule(ScheduleModel {
                    rows,
                    terminal: finite_scalar(p.terminal_cost, "custom_table.terminal_cost")?,
                    n_state: n,
                    n_noise: nn,
                })
            }
        };
        Self::finish(n, nn, control_set, family)
    }

    /// Build a schedule-family model from in-memory rows (no file access).
    pub fn from_schedule_rows(
        space: &GalerkinSpace,
        rows: Vec<ScheduleRow>,
        terminal_cost: f64,
        control_set: ControlSet,
    ) -> Result<Self> {
        control_set.validate()?;
        let n = space.n_state();
        let nn = space.n_noise();
        validate_schedule_rows(&rows, n, nn)?;
        let family = RuntimeFamily::Schedule(ScheduleModel {
            rows,
            terminal: finite_scalar(terminal_cost, "custom_table.terminal_cost")?,
            n_state: n,
            n_noise: nn,
        });
        Self::finish(n, nn, control_set, family)
    }

    fn finish(n: usize, nn: usize, control_set: ControlSet, family: RuntimeFamily) -> Result<Self> {
        let psi = StateVector::from_coords(match &family {
            RuntimeFamily::Saturated(m) => m.psi.clone(),
            RuntimeFamily::Quadratic(m) => m.psi.clone(),
            RuntimeFamily::Schedule(_) => vec![0.0; n],
        });
        let mut model = CoefficientModel {
            n_state: n,
            n_noise: nn,
            control_dim: 1,
            control_set,
            psi,
            family,
            lipschitz: LipschitzReport {
                pairs: 0,
                radius: 0.0,
                max_value_norm: 0.0,
                max_value_ratio: 0.0,
                max_first_deriv_ratio: 0.0,
            },
        };
        let splitter = SeedSplitter::new(0x0C0E_FF1C_1E27_57AB);
        let mut stream = splitter.stream(StreamDomain::CoefficientProbe, n as u64, nn as u64);
        let report = model.lipschitz_probe(200, 5.0, &mut stream)?;
        if !report.max_value_ratio.is_finite()
            || !report.max_first_deriv_ratio.is_finite()
            || report.max_value_ratio > LIPSCHITZ_DEFAULT_CEILING
            || report.max_first_deriv_ratio > LIPSCHITZ_DEFAULT_CEILING
        {
            return Err(Error::numerical(
                "CoefficientModel::new",
                format!(
                    "Lipschitz probe failed: value ratio {}, derivative ratio {}",
                    report.max_value_ratio, report.max_first_deriv_ratio
                ),
            ));
        }
        model.lipschitz = report;
        Ok(model)
    }

    // ── Accessors ────────────────────────────────────────────────────────

    /// State dimension the model was built for.
    pub fn n_state(&self) -> usize {
        self.n_state
    }

    /// Noise dimension the model was built for.
    pub fn n_noise(&self) -> usize {
        self.n_noise
    }

    /// Control dimension (scalar controls throughout: 1).
    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    /// The admissible control set U.
    pub fn control_set(&self) -> &ControlSet {
        &self.control_set
    }

    /// The interaction direction ψ (zero vector for the schedule family).
    pub fn psi(&self) -> &StateVector {
        &self.psi
    }

    /// Result of the construction-time Lipschitz probe.
    pub fn lipschitz_report(&self) -> &LipschitzReport {
        &self.lipschitz
    }

    /// True when the family's affine/quadratic structure admits the
    /// analytic benchmark flows (linear-quadratic family only).
    pub fn is_linear_quadratic(&self) -> bool {
        matches!(self.family, RuntimeFamily::Quadratic(_))
    }

    /// `∂_y ∂_μ φ ≡ 0` holds for every shipped family (measure dependence is
    /// through a mean statistic, whose Lions derivative is constant in the
    /// evaluation point). Solvers assembling the cross term may rely on
    /// this; it is asserted here so a future family violating it fails loud.
    pub fn y_mu_identically_zero(&self) -> bool {
        true
    }

    /// Quadratic-family raw parts (internal benchmark-oracle access).
    pub(crate) fn quadratic_parts(&self) -> Option<&QuadraticModel> {
        match &self.family {
            RuntimeFamily::Quadratic(q) => Some(q),
            _ => None,
        }
    }

    /// Interaction statistic of an ensemble under this model's ψ.
    pub fn mean_statistic(&self, mu: &ParticleEnsemble) -> Result<f64> {
        mu.empirical_mean_statistic(&self.psi)
    }

    // ── Kernels (precomputed mean statistic m) ───────────────────────────

    /// Drift a(t, x, m, u).
    pub fn drift_at(&self, t: f64, x: &StateVector, m: f64, u: f64) -> StateVector {
        match &self.family {
            RuntimeFamily::Saturated(f) => StateVector::from_coords(f.drift.value(&x.coords, m, u)),
            RuntimeFamily::Quadratic(f) => {
                let mut out = f.drift_matrix.apply(&x.coords);
                linalg::axpy(f.drift_mean_gain * m, &f.drift_mean_dir, &mut out);
                linalg::axpy(f.drift_control_gain * u, &f.drift_control_dir, &mut out);
                StateVector::from_coords(out)
            }
            RuntimeFamily::Schedule(f) => StateVector::from_coords(f.row_at(t).drift.clone()),
        }
    }

    /// Diffusion b(t, x, m, u) as an n_state × n_noise matrix.
    pub fn diffusion_at(&self, t: f64, x: &StateVector, m: f64, u: f64) -> HsMatrix {
        match &self.family {
            RuntimeFamily::Saturated(f) => {
                let core = f.diffusion_core.value(&x.coords, m, u);
                rank_one_plus_const(&f.diffusion_const, &core, &f.noise_profile)
            }
            RuntimeFamily::Quadratic(f) => {
                let mut core = f.diffusion_matrix.apply(&x.coords);
                linalg::axpy(f.diffusion_mean_gain * m, &f.diffusion_mean_dir, &mut core);
                linalg::axpy(f.diffusion_control_gain * u, &f.diffusion_control_dir, &mut core);
                rank_one_plus_const(&f.diffusion_const, &core, &f.noise_profile)
            }
            RuntimeFamily::Schedule(f) => {
                let row = f.row_at(t);
                HsMatrix::from_rows(f.n_state, f.n_noise, row.diffusion.clone())
            }
        }
    }

    /// Running cost f(t, x, m, u).
    pub fn running_cost_at(&self, t: f64, x: &StateVector, m: f64, u: f64) -> f64 {
        match &self.family {
            RuntimeFamily::Saturated(f) => f.running.value(&x.coords, m, u),
            RuntimeFamily::Quadratic(f) => {
                0.5 * f.running_state_quad.quadratic_form(&x.coords, &x.coords)
                    + 0.5 * f.running_mean_quad * m * m
                    + 0.5 * f.running_control_quad * u * u
            }
            RuntimeFamily::Schedule(f) => f.row_at(t).running,
        }
    }

    /// Terminal cost h(x, m).
    pub fn terminal_cost_at(&self, x: &StateVector, m: f64) -> f64 {
        match &self.family {
            RuntimeFamily::Saturated(f) => f.terminal.value(&x.coords, m, 0.0),
            RuntimeFamily::Quadratic(f) => {
                0.5 * f.terminal_state_quad.quadratic_form(&x.coords, &x.coords)
                    + linalg::dot(&f.terminal_linear, &x.coords)
                    + 0.5 * f.terminal_mean_quad * m * m
            }
            RuntimeFamily::Schedule(f) => f.terminal,
        }
    }

    /// Drift Jacobian ∂a/∂x as a dense n×n matrix.
    pub fn drift_jac_x(&self, t: f64, x: &StateVector, m: f64, u: f64) -> DMat {
        let _ = t;
        match &self.family {
            RuntimeFamily::Saturated(f) => f.drift.jac_x(&x.coords, m, u),
            RuntimeFamily::Quadratic(f) => f.drift_matrix.clone(),
            RuntimeFamily::Schedule(_) => DMat::zeros(self.n_state, self.n_state),
        }
    }

    /// Second drift derivative contracted with two directions: a_xx(y, w).
    pub fn drift_hess_apply(&self, t: f64, x: &StateVector, m: f64, u: f64, y: &StateVector, w: &StateVector) -> StateVector {
        let _ = t;
        match &self.family {
            RuntimeFamily::Saturated(f) => StateVector::from_coords(f.drift.hess_apply(&x.coords, m, u, &y.coords, &w.coords)),
            _ => StateVector::from_coords(vec![0.0; self.n_state]),
        }
    }

    /// Second drift derivative contracted with a covector p:
    /// `[Σᵢ pᵢ ∂²aᵢ/∂x∂x]` as a symmetric n×n matrix.
    pub fn drift_hess_contract(&self, t: f64, x: &StateVector, m: f64, u: f64, p: &StateVector) -> DMat {
        let _ = t;
        match &self.family {
            RuntimeFamily::Saturated(f) => f.drift.hess_contract(&x.coords, m, u, &p.coords),
            _ => DMat::zeros(self.n_state, self.n_state),
        }
    }

    /// Mean-statistic derivative ∂_m a.
    pub fn drift_dm(&self, t: f64, x: &StateVector, m: f64, u: f64) -> StateVector {
        let _ = (t, u);
        match &self.family {
            RuntimeFamily::Saturated(f) => StateVector::from_coords(f.drift.dm(&x.coords, m)),
            RuntimeFamily::Quadratic(f) => {
                StateVector::from_coords(f.drift_mean_dir.iter().map(|d| f.drift_mean_gain * d).collect())
            }
            RuntimeFamily::Schedule(_) => StateVector::from_coords(vec![0.0; self.n_state]),
        }
    }

    /// Mixed derivative ∂x(∂m a) as a matrix.
    pub fn drift_dm_dx(&self, t: f64, x: &StateVector, m: f64, u: f64) -> DMat {
        let _ = (t, u);
        match &self.family {
            RuntimeFamily::Saturated(f) => f.drift.dm_dx(&x.coords, m),
            _ => DMat::zeros(self.n_state, self.n_state),
        }
    }

    /// Second mean-statistic derivative ∂²_m a.
    pub fn drift_d2m(&self, t: f64, x: &StateVector, m: f64, u: f64) -> StateVector {
        let _ = (t, u);
        match &self.family {
            RuntimeFamily::Saturated(f) => StateVector::from_coords(f.drift.d2m(&x.coords, m)),
            _ => StateVector::from_coords(vec![0.0; self.n_state]),
        }
    }

    /// Control derivative ∂a/∂u.
    pub fn drift_du(&self, t: f64, x: &StateVector, m: f64, u: f64) -> StateVector {
        let _ = (t, m, u);
        match &self.family {
            RuntimeFamily::Saturated(f) => StateVector::from_coords(f.drift.du(&x.coords)),
            RuntimeFamily::Quadratic(f) => {
                StateVector::from_coords(f.drift_control_dir.iter().map(|d| f.drift_control_gain * d).collect())
            }
            RuntimeFamily::Schedule(_) => StateVector::from_coords(vec![0.0; self.n_state]),
        }
    }

    /// The fixed noise profile s with `b − b₀ = c·sᵀ` (zeros for the
    /// schedule family, whose diffusion has no structured part).
    pub fn diffusion_profile(&self) -> Vec<f64> {
        match &self.family {
            RuntimeFamily::Saturated(f) => f.noise_profile.clone(),
            RuntimeFamily::Quadratic(f) => f.noise_profile.clone(),
            RuntimeFamily::Schedule(f) => vec![0.0; f.n_noise],
        }
    }

    /// Jacobian ∂c/∂x of the diffusion's structured column.
    pub fn diffusion_core_jac_x(&self, t: f64, x: &StateVector, m: f64, u: f64) -> DMat {
        let _ = t;
        match &self.family {
            RuntimeFamily::Saturated(f) => f.diffusion_core.jac_x(&x.coords, m, u),
            RuntimeFamily::Quadratic(f) => f.diffusion_matrix.clone(),
            RuntimeFamily::Schedule(_) => DMat::zeros(self.n_state, self.n_state),
        }
    }

    /// Second derivative of the structured column contracted with two
    /// directions: c_xx(y, w).
    pub fn diffusion_core_hess_apply(
        &self,
        t: f64,
        x: &StateVector,
        m: f64,
        u: f64,
        y: &StateVector,
        w: &StateVector,
    ) -> StateVector {
        let _ = t;
        match &self.family {
            RuntimeFamily::Saturated(f) => {
                StateVector::from_coords(f.diffusion_core.hess_apply(&x.coords, m, u, &y.coords, &w.coords))
            }
            _ => StateVector::from_coords(vec![0.0; self.n_state]),
        }
    }

    /// Second derivative of the structured column contracted with a
    /// covector v: `[Σᵢ vᵢ ∂²cᵢ/∂x∂x]`.
    pub fn diffusion_core_hess_contract(&self, t: f64, x: &StateVector, m: f64, u: f64, v: &StateVector) -> DMat {
        let _ = t;
        match &self.family {
            RuntimeFamily::Saturated(f) => f.diffusion_core.hess_contract(&x.coords, m, u, &v.coords),
            _ => DMat::zeros(self.n_state, self.n_state),
        }
    }

    /// Mean-statistic derivative ∂_m c of the structured column.
    pub fn diffusion_core_dm(&self, t: f64, x: &StateVector, m: f64, u: f64) -> StateVector {
        let _ = (t, u);
        match &self.family {
            RuntimeFamily::Saturated(f) => StateVector::from_coords(f.diffusion_core.dm(&x.coords, m)),
            RuntimeFamily::Quadratic(f) => {
                StateVector::from_coords(f.diffusion_mean_dir.iter().map(|d| f.diffusion_mean_gain * d).collect())
            }
            RuntimeFamily::Schedule(_) => StateVector::from_coords(vec![0.0; self.n_state]),
        }
    }

    /// Mixed derivative ∂x(∂m c) of the structured column.
    pub fn diffusion_core_dm_dx(&self, t: f64, x: &StateVector, m: f64, u: f64) -> DMat {
        let _ = (t, u);
        match &self.family {
            RuntimeFamily::Saturated(f) => f.diffusion_core.dm_dx(&x.coords, m),
            _ => DMat::zeros(self.n_state, self.n_state),
        }
    }

    /// Second mean-statistic derivative ∂²_m c of the structured column.
    pub fn diffusion_core_d2m(&self, t: f64, x: &StateVector, m: f64, u: f64) -> StateVector {
        let _ = (t, u);
        match &self.family {
            RuntimeFamily::Saturated(f) => StateVector::from_coords(f.diffusion_core.d2m(&x.coords, m)),
            _ => StateVector::from_coords(vec![0.0; self.n_state]),
        }
    }

    /// Control derivative ∂c/∂u of the structured column.
    pub fn diffusion_core_du(&self, t: f64, x: &StateVector, m: f64, u: f64) -> StateVector {
        let _ = (t, m, u);
        match &self.family {
            RuntimeFamily::Saturated(f) => StateVector::from_coords(f.diffusion_core.du(&x.coords)),
            RuntimeFamily::Quadratic(f) => {
                StateVector::from_coords(f.diffusion_control_dir.iter().map(|d| f.diffusion_control_gain * d).collect())
            }
            RuntimeFamily::Schedule(_) => StateVector::from_coords(vec![0.0; self.n_state]),
        }
    }

    /// Full diffusion Jacobian applied to a state direction:
    /// `b_x(y) = (∂c/∂x · y) sᵀ`.
    pub fn diffusion_jac_apply(&self, t: f64, x: &StateVector, m: f64, u: f64, y: &StateVector) -> HsMatrix {
        let core = self.diffusion_core_jac_x(t, x, m, u).apply(&y.coords);
        let s = self.diffusion_profile();
        rank_one(&core, &s)
    }

    /// Per-noise-column Jacobian `K_j = ∂(b eⱼ)/∂x = s_j · ∂c/∂x`.
    pub fn diffusion_column_jacobian(&self, t: f64, x: &StateVector, m: f64, u: f64, j: usize) -> DMat {
        let mut jac = self.diffusion_core_jac_x(t, x, m, u);
        let s = self.diffusion_profile();
        for v in jac.data.iter_mut() {
            *v *= s[j];
        }
        jac
    }

    /// Running-cost gradient ∂f/∂x.
    pub fn running_grad_x(&self, t: f64, x: &StateVector, m: f64, u: f64) -> StateVector {
        let _ = (t, u);
        match &self.family {
            RuntimeFamily::Saturated(f) => StateVector::from_coords(f.running.grad_x(&x.coords, m)),
            RuntimeFamily::Quadratic(f) => StateVector::from_coords(f.running_state_quad.apply(&x.coords)),
            RuntimeFamily::Schedule(_) => StateVector::from_coords(vec![0.0; self.n_state]),
        }
    }

    /// Running-cost Hessian ∂²f/∂x∂x.
    pub fn running_hess_x(&self, t: f64, x: &StateVector, m: f64, u: f64) -> DMat {
        let _ = (t, u);
        match &self.family {
            RuntimeFamily::Saturated(f) => f.running.hess_x(&x.coords, m),
            RuntimeFamily::Quadratic(f) => f.running_state_quad.clone(),
            RuntimeFamily::Schedule(_) => DMat::zeros(self.n_state, self.n_state),
        }
    }

    /// Running-cost mean derivative ∂f/∂m.
    pub fn running_dm(&self, t: f64, x: &StateVector, m: f64, u: f64) -> f64 {
        let _ = (t, u);
        match &self.family {
            RuntimeFamily::Saturated(f) => f.running.dm(&x.coords, m),
            RuntimeFamily::Quadratic(f) => f.running_mean_quad * m,
            RuntimeFamily::Schedule(_) => 0.0,
        }
    }

    /// Running-cost mixed derivative ∂x(∂m f).
    pub fn running_dm_dx(&self, t: f64, x: &StateVector, m: f64, u: f64) -> StateVector {
        let _ = (t, u);
        match &self.family {
            RuntimeFamily::Saturated(f) => StateVector::from_coords(f.running.dm_dx(&x.coords, m)),
            _ => StateVector::from_coords(vec![0.0; self.n_state]),
        }
    }

    /// Running-cost second mean derivative ∂²f/∂m².
    pub fn running_d2m(&self, t: f64, x: &StateVector, m: f64, u: f64) -> f64 {
        let _ = (t, u);
        match &self.family {
            RuntimeFamily::Saturated(f) => f.running.d2m(&x.coords, m),
            RuntimeFamily::Quadratic(f) => f.running_mean_quad,
            RuntimeFamily::Schedule(_) => 0.0,
        }
    }

    /// Running-cost control derivative ∂f/∂u.
    pub fn running_du(&self, t: f64, x: &StateVector, m: f64, u: f64) -> f64 {
        let _ = (t, x, m);
        match &self.family {
            RuntimeFamily::Saturated(f) => f.running.du(u),
            RuntimeFamily::Quadratic(f) => f.running_control_quad * u,
            RuntimeFamily::Schedule(_) => 0.0,
        }
    }

    /// Running-cost second control derivative ∂²f/∂u².
    pub fn running_d2u(&self, t: f64, x: &StateVector, m: f64, u: f64) -> f64 {
        let _ = (t, x, m, u);
        match &self.family {
            RuntimeFamily::Saturated(f) => f.running.d2u(),
            RuntimeFamily::Quadratic(f) => f.running_control_quad,
            RuntimeFamily::Schedule(_) => 0.0,
        }
    }

    /// Terminal-cost gradient ∂h/∂x.
    pub fn terminal_grad_x(&self, x: &StateVector, m: f64) -> StateVector {
        match &self.family {
            RuntimeFamily::Saturated(f) => StateVector::from_coords(f.terminal.grad_x(&x.coords, m)),
            RuntimeFamily::Quadratic(f) => {
                let mut g = f.terminal_state_quad.apply(&x.coords);
                linalg::axpy(1.0, &f.terminal_linear, &mut g);
                StateVector::from_coords(g)
            }
            RuntimeFamily::Schedule(_) => StateVector::from_coords(vec![0.0; self.n_state]),
        }
    }

    /// Terminal-cost Hessian ∂²h/∂x∂x.
    pub fn terminal_hess_x(&self, x: &StateVector, m: f64) -> DMat {
        match &self.family {
            RuntimeFamily::Saturated(f) => f.terminal.hess_x(&x.coords, m),
            RuntimeFamily::Quadratic(f) => f.terminal_state_quad.clone(),
            RuntimeFamily::Schedule(_) => DMat::zeros(self.n_state, self.n_state),
        }
    }

    /// Terminal-cost mean derivative ∂h/∂m.
    pub fn terminal_dm(&self, x: &StateVector, m: f64) -> f64 {
        match &self.family {
            RuntimeFamily::Saturated(f) => f.terminal.dm(&x.coords, m),
            RuntimeFamily::Quadratic(f) => f.terminal_mean_quad * m,
            RuntimeFamily::Schedule(_) => 0.0,
        }
    }

    /// Terminal-cost mixed derivative ∂x(∂m h).
    pub fn terminal_dm_dx(&self, x: &StateVector, m: f64) -> StateVector {
        match &self.family {
            RuntimeFamily::Saturated(f) => StateVector::from_coords(f.terminal.dm_dx(&x.coords, m)),
            _ => StateVector::from_coords(vec![0.0; self.n_state]),
        }
    }

    /// Terminal-cost second mean derivative ∂²h/∂m².
    pub fn terminal_d2m(&self, x: &StateVector, m: f64) -> f64 {
        match &self.family {
            RuntimeFamily::Saturated(f) => f.terminal.d2m(&x.coords, m),
            RuntimeFamily::Quadratic(f) => f.terminal_mean_quad,
            RuntimeFamily::Schedule(_) => 0.0,
        }
    }

    // ── Validated entry points (ensemble signatures) ─────────────────────

    fn validate_point(&self, ctx: &'static str, x: &StateVector, u: f64) -> Result<()> {
        if x.dim() != self.n_state {
            return Err(Error::DimensionMismatch {
                context: ctx,
                expected: self.n_state,
                actual: x.dim(),
            });
        }
        if !linalg::all_finite(&x.coords) {
            return Err(Error::domain(ctx, "non-finite state"));
        }
        if !self.control_set.contains(u) {
            return Err(Error::domain(ctx, format!("control {u} outside the admissible set")));
        }
        Ok(())
    }

    /// Evaluate a coefficient at a state/law/control triple.
    pub fn eval(&self, which: Which, t: f64, x: &StateVector, mu: &ParticleEnsemble, u: f64) -> Result<CoeffValue> {
        self.validate_point("CoefficientModel::eval", x, u)?;
        let m = self.mean_statistic(mu)?;
        Ok(match which {
            Which::Drift => CoeffValue::Vector(self.drift_at(t, x, m, u)),
            Which::Diffusion => CoeffValue::Matrix(self.diffusion_at(t, x, m, u)),
            Which::RunningCost => CoeffValue::Scalar(self.running_cost_at(t, x, m, u)),
            Which::TerminalCost => CoeffValue::Scalar(self.terminal_cost_at(x, m)),
        })
    }

    /// Directional state derivative: first order along `d1`, second order
    /// contracted with `(d1, d2)`.
    pub fn deriv_x_dir(
        &self,
        which: Which,
        order: DerivOrder,
        t: f64,
        x: &StateVector,
        mu: &ParticleEnsemble,
        u: f64,
        d1: &StateVector,
        d2: Option<&StateVector>,
    ) -> Result<CoeffValue> {
        self.validate_point("CoefficientModel::deriv_x_dir", x, u)?;
        let m = self.mean_statistic(mu)?;
        if d1.dim() != self.n_state {
            return Err(Error::DimensionMismatch {
                context: "CoefficientModel::deriv_x_dir",
                expected: self.n_state,
                actual: d1.dim(),
            });
        }
        match order {
            DerivOrder::First => Ok(match which {
                Which::Drift => CoeffValue::Vector(StateVector::from_coords(
                    self.drift_jac_x(t, x, m, u).apply(&d1.coords),
                )),
                Which::Diffusion => CoeffValue::Matrix(self.diffusion_jac_apply(t, x, m, u, d1)),
                Which::RunningCost => CoeffValue::Scalar(self.running_grad_x(t, x, m, u).inner(d1)),
                Which::TerminalCost => CoeffValue::Scalar(self.terminal_grad_x(x, m).inner(d1)),
            }),
            DerivOrder::Second => {
                let d2 = d2.ok_or_else(|| {
                    Error::domain("CoefficientModel::deriv_x_dir", "second-order derivative needs two directions")
                })?;
                if d2.dim() != self.n_state {
                    return Err(Error::DimensionMismatch {
                        context: "CoefficientModel::deriv_x_dir",
                        expected: self.n_state,
                        actual: d2.dim(),
                    });
                }
                Ok(match which {
                    Which::Drift => CoeffValue::Vector(self.drift_hess_apply(t, x, m, u, d1, d2)),
                    Which::Diffusion => {
                        let core = self.diffusion_core_hess_apply(t, x, m, u, d1, d2);
                        CoeffValue::Matrix(rank_one(&core.coords, &self.diffusion_profile()))
                    }
                    Which::RunningCost => {
                        CoeffValue::Scalar(self.running_hess_x(t, x, m, u).quadratic_form(&d1.coords, &d2.coords))
                    }
                    Which::TerminalCost => {
                        CoeffValue::Scalar(self.terminal_hess_x(x, m).quadratic_form(&d1.coords, &d2.coords))
                    }
                })
            }
        }
    }

    /// Measure derivatives in fully-contracted directional form.
    ///
    /// With φ the selected coefficient and μ the ensemble's law:
    ///
    /// - `Mu`: `[∂_μφ(μ)(y_point)] · dir1`;
    /// - `YMu`: the y-derivative of the above along `dir2` (identically zero
    ///   for every shipped family);
    /// - `MuX`: the x-derivative of the `Mu` value along `dir2`;
    /// - `MuMu`: `[∂²_μφ(μ)(y_point, y_point)](dir1, dir2)` (shipped
    ///   families' second measure derivative does not depend on the
    ///   evaluation points).
    pub fn deriv_mu_dir(
        &self,
        which: Which,
        kind: MeasureDerivKind,
        t: f64,
        x: &StateVector,
        mu: &ParticleEnsemble,
        u: f64,
        y_point: &StateVector,
        dir1: &StateVector,
        dir2: Option<&StateVector>,
    ) -> Result<CoeffValue> {
        self.validate_point("CoefficientModel::deriv_mu_dir", x, u)?;
        let m = self.mean_statistic(mu)?;
        for d in [y_point, dir1] {
            if d.dim() != self.n_state {
                return Err(Error::DimensionMismatch {
                    context: "CoefficientModel::deriv_mu_dir",
                    expected: self.n_state,
                    actual: d.dim(),
                });
            }
        }
        let psi_dot = |v: &StateVector| self.psi.inner(v);
        let needs_dir2 = !matches!(kind, MeasureDerivKind::Mu);
        let dir2 = match (needs_dir2, dir2) {
            (true, Some(d)) => {
                if d.dim() != self.n_state {
                    return Err(Error::DimensionMismatch {
                        context: "CoefficientModel::deriv_mu_dir",
                        expected: self.n_state,
                        actual: d.dim(),
                    });
                }
                Some(d)
            }
            (true, None) => {
                return Err(Error::domain(
                    "CoefficientModel::deriv_mu_dir",
                    "this derivative kind needs a second direction",
                ))
            }
            (false, d) => d,
        };
        let zero_like = |which: Which| match which {
            Which::Drift => CoeffValue::Vector(StateVector::from_coords(vec![0.0; self.n_state])),
            Which::Diffusion => CoeffValue::Matrix(HsMatrix::from_rows(
                self.n_state,
                self.n_noise,
                vec![0.0; self.n_state * self.n_noise],
            )),
            Which::RunningCost | Which::TerminalCost => CoeffValue::Scalar(0.0),
        };
        let scale_shape = |base: CoeffValue, factor: f64| base.scaled(factor);
        Ok(match kind {
            MeasureDerivKind::Mu => {
                let w = psi_dot(dir1);
                match which {
                    Which::Drift => scale_shape(CoeffValue::Vector(self.drift_dm(t, x, m, u)), w),
                    Which::Diffusion => {
                        let core = self.diffusion_core_dm(t, x, m, u);
                        scale_shape(CoeffValue::Matrix(rank_one(&core.coords, &self.diffusion_profile())), w)
                    }
                    Which::RunningCost => CoeffValue::Scalar(self.running_dm(t, x, m, u) * w),
                    Which::TerminalCost => CoeffValue::Scalar(self.terminal_dm(x, m) * w),
                }
            }
            MeasureDerivKind::YMu => zero_like(which),
            MeasureDerivKind::MuX => {
                let w = psi_dot(dir1);
                let d = dir2.expect("checked above");
                match which {
                    Which::Drift => {
                        let v = self.drift_dm_dx(t, x, m, u).apply(&d.coords);
                        scale_shape(CoeffValue::Vector(StateVector::from_coords(v)), w)
                    }
                    Which::Diffusion => {
                        let core = self.diffusion_core_dm_dx(t, x, m, u).apply(&d.coords);
                        scale_shape(CoeffValue::Matrix(rank_one(&core, &self.diffusion_profile())), w)
                    }
                    Which::RunningCost => CoeffValue::Scalar(self.running_dm_dx(t, x, m, u).inner(d) * w),
                    Which::TerminalCost => CoeffValue::Scalar(self.terminal_dm_dx(x, m).inner(d) * w),
                }
            }
            MeasureDerivKind::MuMu => {
                let w = psi_dot(dir1) * psi_dot(dir2.expect("checked above"));
                match which {
                    Which::Drift => scale_shape(CoeffValue::Vector(self.drift_d2m(t, x, m, u)), w),
                    Which::Diffusion => {
                        let core = self.diffusion_core_d2m(t, x, m, u);
                        scale_shape(CoeffValue::Matrix(rank_one(&core.coords, &self.diffusion_profile())), w)
                    }
                    Which::RunningCost => CoeffValue::Scalar(self.running_d2m(t, x, m, u) * w),
                    Which::TerminalCost => CoeffValue::Scalar(self.terminal_d2m(x, m) * w),
                }
            }
        })
    }

    /// Check the closed-form measure derivative against its lifted
    /// definition: perturb the whole sample cloud by ±ε·Y and compare the
    /// central difference quotient of the lift with the particle average
    /// `(1/N) Σᵢ [∂_μφ(μ)(xᵢ)](yᵢ)`.
    pub fn check_lions_lift(
        &self,
        which: Which,
        t: f64,
        x: &StateVector,
        mu: &ParticleEnsemble,
        u: f64,
        direction_ensemble: &ParticleEnsemble,
        eps_list: &[f64],
    ) -> Result<LiftCheckReport> {
        self.validate_point("CoefficientModel::check_lions_lift", x, u)?;
        if direction_ensemble.len() != mu.len() {
            return Err(Error::DimensionMismatch {
                context: "check_lions_lift",
                expected: mu.len(),
                actual: direction_ensemble.len(),
            });
        }
        let m = self.mean_statistic(mu)?;
        // Exact side: (1/N) Σᵢ [∂_μφ(μ)(xᵢ)](yᵢ). The shipped families'
        // Lions derivative is constant in the evaluation point, and the
        // contraction is ∂_mφ · ⟨ψ, yᵢ⟩, so the average closes over
        // m_Y = (1/N) Σ ⟨ψ, yᵢ⟩.
        let m_dir = direction_ensemble.empirical_mean_statistic(&self.psi)?;
        let eval_at = |m_val: f64| -> CoeffValue {
            match which {
                Which::Drift => CoeffValue::Vector(self.drift_at(t, x, m_val, u)),
                Which::Diffusion => CoeffValue::Matrix(self.diffusion_at(t, x, m_val, u)),
                Which::RunningCost => CoeffValue::Scalar(self.running_cost_at(t, x, m_val, u)),
                Which::TerminalCost => CoeffValue::Scalar(self.terminal_cost_at(x, m_val)),
            }
        };
        let exact = match which {
            Which::Drift => CoeffValue::Vector(self.drift_dm(t, x, m, u)),
            Which::Diffusion => {
                let core = self.diffusion_core_dm(t, x, m, u);
                CoeffValue::Matrix(rank_one(&core.coords, &self.diffusion_profile()))
            }
            Which::RunningCost => CoeffValue::Scalar(self.running_dm(t, x, m, u)),
            Which::TerminalCost => CoeffValue::Scalar(self.terminal_dm(x, m)),
        }
        .scaled(m_dir);
        let scale = exact.norm().max(1e-5 * eval_at(m).norm()).max(1e-12);
        let mut errors = Vec::with_capacity(eps_list.len());
        for &eps in eps_list {
            if !(eps > 0.0) {
                return Err(Error::domain("check_lions_lift", format!("perturbation {eps} must be positive")));
            }
            // Shifting every particle by ±ε yᵢ shifts the interaction
            // statistic by ±ε m_Y and changes nothing else the coefficient
            // sees; evaluate the lift through the shifted statistic.
            let plus = eval_at(m + eps * m_dir);
            let minus = eval_at(m - eps * m_dir);
            let quotient = plus.minus(&minus).scaled(0.5 / eps);
            errors.push(quotient.minus(&exact).norm() / scale);
        }
        let base = FdSweepReport::from_errors(eps_list, errors);
        Ok(LiftCheckReport {
            points: base.points,
            best_rel_error: base.best_rel_error,
            observed_order: base.observed_order,
            exact: base.exact,
        })
    }

    /// Randomized boundedness and Lipschitz probing over the ball
    /// `‖x‖ ≤ radius`, `|m| ≤ radius` with admissible controls: reports the
    /// worst value norm and worst difference quotients of the values and of
    /// the first derivatives.
    pub fn lipschitz_probe(&self, pairs: usize, radius: f64, stream: &mut RngStream) -> Result<LipschitzReport> {
        if pairs == 0 || !(radius > 0.0) {
            return Err(Error::domain("lipschitz_probe", "need pairs ≥ 1 and radius > 0"));
        }
        let n = self.n_state;
        let draw_point = |stream: &mut RngStream| -> (StateVector, f64, f64) {
            let mut x = vec![0.0; n];
            loop {
                for v in x.iter_mut() {
                    *v = radius * (2.0 * stream.uniform() - 1.0);
                }
                if linalg::norm(&x) <= radius {
                    break;
                }
            }
            let m = radius * (2.0 * stream.uniform() - 1.0);
            let u = self.control_set.sample(stream);
            (StateVector::from_coords(x), m, u)
        };
        let t_probe = 0.0;
        let mut max_value_norm: f64 = 0.0;
        let mut max_value_ratio: f64 = 0.0;
        let mut max_first_deriv_ratio: f64 = 0.0;
        for _ in 0..pairs {
            let (x1, m1, u1) = draw_point(stream);
            let (x2, m2, u2) = draw_point(stream);
            let dist = (x1.minus(&x2).norm_sq() + (m1 - m2) * (m1 - m2) + (u1 - u2) * (u1 - u2)).sqrt();
            if dist < 1e-9 {
                continue;
            }
            let a1 = self.drift_at(t_probe, &x1, m1, u1);
            let a2 = self.drift_at(t_probe, &x2, m2, u2);
            let b1 = self.diffusion_at(t_probe, &x1, m1, u1);
            let b2 = self.diffusion_at(t_probe, &x2, m2, u2);
            let f1 = self.running_cost_at(t_probe, &x1, m1, u1);
            let f2 = self.running_cost_at(t_probe, &x2, m2, u2);
            let h1 = self.terminal_cost_at(&x1, m1);
            let h2 = self.terminal_cost_at(&x2, m2);
            for v in [a1.norm(), b1.frobenius_norm(), f1.abs(), h1.abs()] {
                if !v.is_finite() {
                    return Err(Error::numerical("lipschitz_probe", "non-finite coefficient value"));
                }
                max_value_norm = max_value_norm.max(v);
            }
            let value_gap = [
                a1.minus(&a2).norm(),
                b1.minus(&b2).frobenius_norm(),
                (f1 - f2).abs(),
                (h1 - h2).abs(),
            ]
            .into_iter()
            .fold(0.0f64, f64::max);
            max_value_ratio = max_value_ratio.max(value_gap / dist);
            let j1 = self.drift_jac_x(t_probe, &x1, m1, u1);
            let mut j2 = self.drift_jac_x(t_probe, &x2, m2, u2);
            j2.add_scaled(-1.0, &j1);
            let c1 = self.diffusion_core_jac_x(t_probe, &x1, m1, u1);
            let mut c2m = self.diffusion_core_jac_x(t_probe, &x2, m2, u2);
            c2m.add_scaled(-1.0, &c1);
            let deriv_gap = [
                j2.frobenius_norm(),
                c2m.frobenius_norm(),
                self.running_grad_x(t_probe, &x1, m1, u1)
                    .minus(&self.running_grad_x(t_probe, &x2, m2, u2))
                    .norm(),
                self.terminal_grad_x(&x1, m1).minus(&self.terminal_grad_x(&x2, m2)).norm(),
                self.drift_dm(t_probe, &x1, m1, u1).minus(&self.drift_dm(t_probe, &x2, m2, u2)).norm(),
                (self.running_dm(t_probe, &x1, m1, u1) - self.running_dm(t_probe, &x2, m2, u2)).abs(),
            ]
            .into_iter()
            .fold(0.0f64, f64::max);
            max_first_deriv_ratio = max_first_deriv_ratio.max(deriv_gap / dist);
        }
        Ok(LipschitzReport {
            pairs,
            radius,
            max_value_norm,
            max_value_ratio,
            max_first_deriv_ratio,
        })
    }
}

fn rank_one(core: &[f64], s: &[f64]) -> HsMatrix {
    let n = core.len();
    let nn = s.len();
    let mut entries = vec![0.0; n * nn];
    for (i, c) in core.iter().enumerate() {
        for (j, sv) in s.iter().enumerate() {
            entries[i * nn + j] = c * sv;
        }
    }
    HsMatrix::from_rows(n, nn, entries)
}

fn rank_one_plus_const(b0: &DMat, core: &[f64], s: &[f64]) -> HsMatrix {
    let n = b0.rows;
    let nn = b0.cols;
    let mut entries = b0.data.clone();
    for (i, c) in core.iter().enumerate() {
        for (j, sv) in s.iter().enumerate() {
            entries[i * nn + j] += c * sv;
        }
    }
    HsMatrix::from_rows(n, nn, entries)
}

fn validate_schedule_rows(rows: &[ScheduleRow], n: usize, nn: usize) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::domain("custom_table", "schedule needs at least one row"));
    }
    let mut last_t = f64::NEG_INFINITY;
    for row in rows {
        if !row.t.is_finite() || row.t <= last_t {
            return Err(Error::domain("custom_table", "schedule times must be finite and strictly increasing"));
        }
        last_t = row.t;
        if row.drift.len() != n {
            return Err(Error::DimensionMismatch {
                context: "custom_table.drift",
                expected: n,
                actual: row.drift.len(),
            });
        }
        if row.diffusion.len() != n * nn {
            return Err(Error::DimensionMismatch {
                context: "custom_table.diffusion",
                expected: n * nn,
                actual: row.diffusion.len(),
            });
        }
        if !linalg::all_finite(&row.drift) || !linalg::all_finite(&row.diffusion) || !row.running.is_finite() {
            return Err(Error::domain("custom_table", "non-finite schedule entry"));
        }
    }
    Ok(())
}

/// Parse a CSV schedule (`t, a_0.., b_00.., f`; header skipped; diffusion
/// row-major) into rows for the schedule family.
pub fn parse_schedule_csv<R: IoRead>(reader: R, n_state: usize, n_noise: usize) -> Result<Vec<ScheduleRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let expected_cols = 2 + n_state + n_state * n_noise;
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        if record.len() != expected_cols {
            return Err(Error::DimensionMismatch {
                context: "custom_table.csv_columns",
                expected: expected_cols,
                actual: record.len(),
            });
        }
        let parse = |field: &str| -> Result<f64> {
            field
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::domain("custom_table.csv", format!("bad number {field:?}: {e}")))
        };
        let t = parse(&record[0])?;
        let drift: Vec<f64> = (0..n_state).map(|k| parse(&record[1 + k])).collect::<Result<_>>()?;
        let diffusion: Vec<f64> = (0..n_state * n_noise)
            .map(|k| parse(&record[1 + n_state + k]))
            .collect::<Result<_>>()?;
        let running = parse(&record[1 + n_state + n_state * n_noise])?;
        rows.push(ScheduleRow {
            t,
            drift,
            diffusion,
            running,
        });
    }
    validate_schedule_rows(&rows, n_state, n_noise)?;
    Ok(rows)
}

// ── Finite-difference harnesses ──────────────────────────────────────────

/// Central FD check of a state derivative across a step sweep. Order-1
/// checks compare `(φ(x+s·d₁) − φ(x−s·d₁)) / 2s` with the closed form;
/// order-2 checks use the four-point mixed quotient.
pub fn fd_check_deriv_x(
    model: &CoefficientModel,
    which: Which,
    order: DerivOrder,
    t: f64,
    x: &StateVector,
    mu: &ParticleEnsemble,
    u: f64,
    d1: &StateVector,
    d2: Option<&StateVector>,
    steps: &[f64],
) -> Result<FdSweepReport> {
    let exact = model.deriv_x_dir(which, order, t, x, mu, u, d1, d2)?;
    // Normalize by the derivative magnitude, with a floor tied to the size
    // of the differenced values so pure cancellation noise around an exactly
    // zero derivative is not misread as a relative error.
    let base_norm = model.eval(which, t, x, mu, u)?.norm();
    let scale = exact.norm().max(1e-5 * base_norm).max(1e-12);
    let shift = |base: &StateVector, s1: f64, v1: &StateVector, s2: f64, v2: Option<&StateVector>| {
        let mut out = base.clone();
        out.add_scaled(s1, v1);
        if let Some(v2) = v2 {
            out.add_scaled(s2, v2);
        }
        out
    };
    let mut errors = Vec::with_capacity(steps.len());
    for &s in steps {
        let quotient = match order {
            DerivOrder::First => {
                let plus = model.eval(which, t, &shift(x, s, d1, 0.0, None), mu, u)?;
                let minus = model.eval(which, t, &shift(x, -s, d1, 0.0, None), mu, u)?;
                plus.minus(&minus).scaled(0.5 / s)
            }
            DerivOrder::Second => {
                let d2 = d2.ok_or_else(|| Error::domain("fd_check_deriv_x", "second order needs two directions"))?;
                let pp = model.eval(which, t, &shift(x, s, d1, s, Some(d2)), mu, u)?;
                let pm = model.eval(which, t, &shift(x, s, d1, -s, Some(d2)), mu, u)?;
                let mp = model.eval(which, t, &shift(x, -s, d1, s, Some(d2)), mu, u)?;
                let mm = model.eval(which, t, &shift(x, -s, d1, -s, Some(d2)), mu, u)?;
                pp.minus(&pm).minus(&mp.minus(&mm)).scaled(0.25 / (s * s))
            }
        };
        errors.push(quotient.minus(&exact).norm() / scale);
    }
    Ok(FdSweepReport::from_errors(steps, errors))
}

/// Central FD check of the mean-statistic kernels: differentiates the
/// m-argument of the evaluators and compares with the closed-form ∂_m, ∂²_m
/// and ∂x∂_m kernels. Returns reports in the order
/// `[∂_m, ∂²_m, ∂x∂_m (along d)]`.
pub fn fd_check_mean_kernels(
    model: &CoefficientModel,
    which: Which,
    t: f64,
    x: &StateVector,
    m: f64,
    u: f64,
    d: &StateVector,
    steps: &[f64],
) -> Result<Vec<FdSweepReport>> {
    let value_at = |m_val: f64| -> CoeffValue {
        match which {
            Which::Drift => CoeffValue::Vector(model.drift_at(t, x, m_val, u)),
            Which::Diffusion => CoeffValue::Matrix(model.diffusion_at(t, x, m_val, u)),
            Which::RunningCost => CoeffValue::Scalar(model.running_cost_at(t, x, m_val, u)),
            Which::TerminalCost => CoeffValue::Scalar(model.terminal_cost_at(x, m_val)),
        }
    };
    let dm_at = |m_val: f64| -> CoeffValue {
        match which {
            Which::Drift => CoeffValue::Vector(model.drift_dm(t, x, m_val, u)),
            Which::Diffusion => {
                let core = model.diffusion_core_dm(t, x, m_val, u);
                CoeffValue::Matrix(rank_one(&core.coords, &model.diffusion_profile()))
            }
            Which::RunningCost => CoeffValue::Scalar(model.running_dm(t, x, m_val, u)),
            Which::TerminalCost => CoeffValue::Scalar(model.terminal_dm(x, m_val)),
        }
    };
    let dm_at_x = |x_val: &StateVector| -> CoeffValue {
        match which {
            Which::Drift => CoeffValue::Vector(model.drift_dm(t, x_val, m, u)),
            Which::Diffusion => {
                let core = model.diffusion_core_dm(t, x_val, m, u);
                CoeffValue::Matrix(rank_one(&core.coords, &model.diffusion_profile()))
            }
            Which::RunningCost => CoeffValue::Scalar(model.running_dm(t, x_val, m, u)),
            Which::TerminalCost => CoeffValue::Scalar(model.terminal_dm(x_val, m)),
        }
    };
    let d2m_exact = match which {
        Which::Drift => CoeffValue::Vector(model.drift_d2m(t, x, m, u)),
        Which::Diffusion => {
            let core = model.diffusion_core_d2m(t, x, m, u);
            CoeffValue::Matrix(rank_one(&core.coords, &model.diffusion_profile()))
        }
        Which::RunningCost => CoeffValue::Scalar(model.running_d2m(t, x, m, u)),
        Which::TerminalCost => CoeffValue::Scalar(model.terminal_d2m(x, m)),
    };
    let dm_dx_exact = match which {
        Which::Drift => CoeffValue::Vector(StateVector::from_coords(model.drift_dm_dx(t, x, m, u).apply(&d.coords))),
        Which::Diffusion => {
            let core = model.diffusion_core_dm_dx(t, x, m, u).apply(&d.coords);
            CoeffValue::Matrix(rank_one(&core, &model.diffusion_profile()))
        }
        Which::RunningCost => CoeffValue::Scalar(model.running_dm_dx(t, x, m, u).inner(d)),
        Which::TerminalCost => CoeffValue::Scalar(model.terminal_dm_dx(x, m).inner(d)),
    };
    let sweep = |exact: &CoeffValue, base_norm: f64, quotient: &dyn Fn(f64) -> CoeffValue| -> FdSweepReport {
        let scale = exact.norm().max(1e-5 * base_norm).max(1e-12);
        let errors: Vec<f64> = steps.iter().map(|&s| quotient(s).minus(exact).norm() / scale).collect();
        FdSweepReport::from_errors(steps, errors)
    };
    let dm_exact = dm_at(m);
    let r1 = sweep(&dm_exact, value_at(m).norm(), &|s| {
        value_at(m + s).minus(&value_at(m - s)).scaled(0.5 / s)
    });
    let r2 = sweep(&d2m_exact, dm_exact.norm(), &|s| dm_at(m + s).minus(&dm_at(m - s)).scaled(0.5 / s));
    let r3 = sweep(&dm_dx_exact, dm_exact.norm(), &|s| {
        let mut xp = x.clone();
        xp.add_scaled(s, d);
        let mut xm = x.clone();
        xm.add_scaled(-s, d);
        dm_at_x(&xp).minus(&dm_at_x(&xm)).scaled(0.5 / s)
    });
    Ok(vec![r1, r2, r3])
}

/// Central FD check of the control derivatives `∂a/∂u`, `∂c/∂u`, `∂f/∂u`.
pub fn fd_check_control_derivs(
    model: &CoefficientModel,
    t: f64,
    x: &StateVector,
    m: f64,
    u: f64,
    steps: &[f64],
) -> Result<Vec<FdSweepReport>> {
    let sweep = |exact: CoeffValue, base_norm: f64, quotient: &dyn Fn(f64) -> CoeffValue| -> FdSweepReport {
        let scale = exact.norm().max(1e-5 * base_norm).max(1e-12);
        let errors: Vec<f64> = steps.iter().map(|&s| quotient(s).minus(&exact).norm() / scale).collect();
        FdSweepReport::from_errors(steps, errors)
    };
    let ra = sweep(CoeffValue::Vector(model.drift_du(t, x, m, u)), model.drift_at(t, x, m, u).norm(), &|s| {
        CoeffValue::Vector(model.drift_at(t, x, m, u + s))
            .minus(&CoeffValue::Vector(model.drift_at(t, x, m, u - s)))
            .scaled(0.5 / s)
    });
    let rb = sweep(
        CoeffValue::Matrix(rank_one(
            &model.diffusion_core_du(t, x, m, u).coords,
            &model.diffusion_profile(),
        )),
        model.diffusion_at(t, x, m, u).frobenius_norm(),
        &|s| {
            CoeffValue::Matrix(model.diffusion_at(t, x, m, u + s))
                .minus(&CoeffValue::Matrix(model.diffusion_at(t, x, m, u - s)))
                .scaled(0.5 / s)
        },
    );
    let rf = sweep(
        CoeffValue::Scalar(model.running_du(t, x, m, u)),
        model.running_cost_at(t, x, m, u).abs(),
        &|s| {
            CoeffValue::Scalar((model.running_cost_at(t, x, m, u + s) - model.running_cost_at(t, x, m, u - s)) * 0.5 / s)
        },
    );
    Ok(vec![ra, rb, rf])
}
