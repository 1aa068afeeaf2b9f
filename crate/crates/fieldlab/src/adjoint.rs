//! Backward costate flows and duality verification.
//!
//! The forward particle system produces a cost landscape; this module carries
//! its sensitivities backward in time.  Two backward systems are solved along
//! a frozen base path:
//!
//! ```text
//! first order   dp = −[A*p + a_x*p + Ẽ[ã_μ*p̃] + b_x*q + Ẽ[b̃_μ*q̃] − f_x − Ẽ[f̃_μ]] dt + q dW,
//!               p(T) = −h_x − Ẽ[h̃_μ],
//!
//! second order  dP = −[(A + a_x)*P + P(A + a_x) + K*PK + K*Q + QK + ℍ_xx] dt + Q dW,
//!               P(T) = −h_xx,        K = b_x + Ẽ[b̃_μ],
//! ```
//!
//! where tildes mark independent copies of the base ensemble (the empirical
//! average over particles plays the role of Ẽ), and ℍ = ⟨p, a⟩ + ⟨q, b⟩ − f
//! is the pointwise Hamiltonian.  With the scalar interaction statistic
//! m(μ) = ⟨ψ, mean⟩, every measure derivative collapses to ∂_m kernels, so
//! the mean-field terms above are scalars multiplying ψ and the operator K
//! gains the rank-one part Ẽ[∂_m c]·ψᵀ.
//!
//! Discretization mirrors the forward scheme: exponential backward Euler with
//! left-endpoint drivers,
//!
//! ```text
//! p_k = Ê_k[S(Δt) p_{k+1}] + Δt·G_k,        q_k^{(j)} = Ê_k[S(Δt) p_{k+1} ΔW_j] / (w_j Δt),
//! P_k = S(Δt)[Ê_k(P_{k+1}) + Δt·D_k]S(Δt),
//! ```
//!
//! with conditional expectations Ê_k realised as least-squares projections
//! onto a polynomial basis of total degree ≤ 2 in the state coordinates (the
//! interaction statistic is constant across a cloud at fixed time, so it is
//! absorbed by the intercept).  The mean-field driver terms couple to copies
//! of the unknown; they are frozen from the previous sweep and updated in an
//! outer Picard loop whose successive-distance ratios are monitored — three
//! consecutive non-contracting ratios abort the solve with a diagnostic.  On
//! the affine benchmark family both flows collapse to deterministic matrix
//! ODEs (`p = −(Γx + γ)`, `q = −Γb`, Lyapunov flow for `P` with `Q ≡ 0`),
//! which this module integrates with a fine Runge–Kutta sweep as an
//! independent cross-check of the regression solver.
//!
//! Correctness is not asserted against closed forms alone: the defining
//! property of both backward solutions is a duality identity against forward
//! test systems sharing the grid and the noise.  `verify_transposition_first`
//! and `verify_transposition_second` integrate random test systems (and the
//! spike-variation instance used by the expansion of the cost) and report the
//! identitys' residuals; these shrink under grid refinement and are the
//! primary evidence that signs, adjoints, and weights line up.  All noise
//! pairings use the weighted Hilbert–Schmidt product Σ_j w_j⟨·eⱼ, ·eⱼ⟩
//! matching `Var ΔW_j = w_j Δt`.
//!
//! Reductions are ordered independently of the worker count, so solves are
//! bit-reproducible for a fixed seed.

use nalgebra::{Cholesky, DMatrix};
use serde::Serialize;

use crate::coeffs::CoefficientModel;
use crate::error::{Error, Result};
use crate::exec;
use crate::forward::{ControlPath, NoiseRecord, StatePath, TimeGrid};
use crate::linalg::{self, DMat};
use crate::rng::RngStream;
use crate::space::{GalerkinSpace, HsMatrix, StateVector};
use crate::variation::solve_first_variation;

/// Ridge added to the regression Gram matrix, relative to the per-particle
/// scale (the Gram grows like the particle count, so the ridge is multiplied
/// by `N`).
const REGRESSION_RIDGE: f64 = 1e-8;

/// Maximum outer Picard sweeps for the mean-field driver terms.
const PICARD_MAX_ITERS: usize = 40;

/// Relative tolerance on the successive-sweep surrogate distance.
const PICARD_TOL_REL: f64 = 1e-9;

/// Consecutive non-contracting distance ratios that abort the solve.
const PICARD_DIVERGENCE_STREAK: usize = 3;

/// Runge–Kutta substeps per grid step in the affine closed-form flows.
const CLOSED_FORM_SUBSTEPS: usize = 8;

/// Pre-symmetrization asymmetry (relative to the matrix norm) above which the
/// second-order flow flags a symmetry warning.
const SYMMETRY_WARN_TOL: f64 = 1e-8;

/// Method selector for the first-order backward solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirstAdjointMethod {
    /// Backward exponential Euler with least-squares conditional expectations
    /// and an outer Picard loop for the mean-field driver terms.
    PicardRegression,
    /// Deterministic backward matrix/vector flow for the affine benchmark
    /// family: `p = −(Γx + γ)`, `q = −Γ·b`.
    LqClosedForm,
}

/// Method selector for the second-order backward solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecondAdjointMethod {
    /// Deterministic Lyapunov-type matrix flow; valid when the linearized
    /// coefficients and the Hamiltonian Hessian are state-independent (the
    /// affine benchmark family).  The martingale component vanishes.
    DeterministicLyapunov,
    /// Per-particle backward sweep with regression conditional expectations;
    /// handles state-dependent linearizations.
    Regression,
}

/// Convergence record of the outer Picard loop.
#[derive(Debug, Clone, Serialize)]
pub struct PicardDiagnostics {
    /// Number of backward sweeps performed.
    pub iterations: usize,
    /// Successive-sweep surrogate distances, one per sweep.
    pub distances: Vec<f64>,
    /// Whether the loop reached the distance tolerance.
    pub converged: bool,
}

/// Discrete costate pair `(p, q)` on the grid: `p` at every node
/// (`M+1 × N` state vectors), `q` on every step (`M × N` Hilbert–Schmidt
/// matrices).
#[derive(Debug, Clone)]
pub struct FirstAdjointPath {
    grid: TimeGrid,
    p: Vec<Vec<StateVector>>,
    q: Vec<Vec<HsMatrix>>,
    diagnostics: PicardDiagnostics,
}

impl FirstAdjointPath {
    /// Time grid the path lives on.
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Particle count per node.
    pub fn n_particles(&self) -> usize {
        self.p[0].len()
    }

    /// Costate cloud at node `k` (0 ≤ k ≤ M).
    pub fn costate(&self, k: usize) -> &[StateVector] {
        &self.p[k]
    }

    /// Martingale-integrand cloud on step `k` (0 ≤ k < M).
    pub fn martingale(&self, k: usize) -> &[HsMatrix] {
        &self.q[k]
    }

    /// Terminal costate cloud.
    pub fn terminal(&self) -> &[StateVector] {
        self.p.last().expect("path has at least the terminal node")
    }

    /// Convergence record of the solve that produced this path.
    pub fn diagnostics(&self) -> &PicardDiagnostics {
        &self.diagnostics
    }

    /// Costate rows as `step,time,particle,p_0,…` CSV text.
    pub fn costate_to_csv_string(&self) -> String {
        let n = self.p[0][0].dim();
        let mut out = String::from("step,time,particle");
        for c in 0..n {
            out.push_str(&format!(",p_{c}"));
        }
        out.push('\n');
        for (k, cloud) in self.p.iter().enumerate() {
            let t = self.grid.t(k);
            for (i, v) in cloud.iter().enumerate() {
                out.push_str(&format!("{k},{t}"));
                out.push_str(&format!(",{i}"));
                for c in 0..n {
                    out.push_str(&format!(",{}", v.coords[c]));
                }
                out.push('\n');
            }
        }
        out
    }

    /// Martingale-integrand rows as `step,time,particle,q_rc,…` CSV text
    /// (row-major matrix entries).
    pub fn martingale_to_csv_string(&self) -> String {
        let (n, nn) = {
            let q0 = &self.q[0][0];
            (q0.rows(), q0.cols())
        };
        let mut out = String::from("step,time,particle");
        for r in 0..n {
            for c in 0..nn {
                out.push_str(&format!(",q_{r}{c}"));
            }
        }
        out.push('\n');
        for (k, cloud) in self.q.iter().enumerate() {
            let t = self.grid.t(k);
            for (i, m) in cloud.iter().enumerate() {
                out.push_str(&format!("{k},{t},{i}"));
                for e in m.entries() {
                    out.push_str(&format!(",{e}"));
                }
                out.push('\n');
            }
        }
        out
    }

    /// Relative root-mean-square distance between the costate components of
    /// two paths on the same grid: `√(ΣΔp²) / √(Σp²)` over all nodes and
    /// particles (the reference is `other`).
    pub fn costate_rel_rmse(&self, other: &FirstAdjointPath) -> f64 {
        rel_rmse_states(&self.p, &other.p)
    }

    /// Relative root-mean-square distance between the martingale components
    /// (weighted Frobenius norms, reference `other`).
    pub fn martingale_rel_rmse(&self, other: &FirstAdjointPath, weights: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (row_a, row_b) in self.q.iter().zip(&other.q) {
            for (a, b) in row_a.iter().zip(row_b) {
                for j in 0..b.cols() {
                    for r in 0..b.rows() {
                        let d = a.get(r, j) - b.get(r, j);
                        num += weights[j] * d * d;
                        den += weights[j] * b.get(r, j) * b.get(r, j);
                    }
                }
            }
        }
        (num / den.max(f64::MIN_POSITIVE)).sqrt()
    }
}

fn rel_rmse_states(a: &[Vec<StateVector>], b: &[Vec<StateVector>]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (row_a, row_b) in a.iter().zip(b) {
        for (va, vb) in row_a.iter().zip(row_b) {
            num += va.minus(vb).norm_sq();
            den += vb.norm_sq();
        }
    }
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

/// Discrete second-order flow `P` (and, on the regression path, its
/// martingale component `Q`).
#[derive(Debug, Clone)]
pub struct SecondAdjointPath {
    grid: TimeGrid,
    kind: SecondAdjointKind,
    /// Largest pre-symmetrization asymmetry observed across all steps,
    /// relative to the matrix norm.
    pub max_asymmetry: f64,
    /// True when `max_asymmetry` exceeded the warn tolerance.
    pub symmetry_warning: bool,
}

#[derive(Debug, Clone)]
enum SecondAdjointKind {
    /// One deterministic matrix per node; `Q ≡ 0`.
    Deterministic(Vec<DMat>),
    /// Per-particle matrices; `q[k][i][j]` is the martingale component for
    /// noise index `j`.
    PerParticle {
        p: Vec<Vec<DMat>>,
        q: Vec<Vec<Vec<DMat>>>,
    },
}

impl SecondAdjointPath {
    /// Time grid the flow lives on.
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Whether the flow is the deterministic fast path (`Q ≡ 0`).
    pub fn is_deterministic(&self) -> bool {
        matches!(self.kind, SecondAdjointKind::Deterministic(_))
    }

    /// Matrix at node `k` for particle `i` (the deterministic path ignores
    /// `i`).
    pub fn matrix_at(&self, k: usize, i: usize) -> &DMat {
        match &self.kind {
            SecondAdjointKind::Deterministic(p) => &p[k],
            SecondAdjointKind::PerParticle { p, .. } => &p[k][i],
        }
    }

    /// Martingale component on step `k`, particle `i`, noise index `j`;
    /// `None` on the deterministic path where it vanishes identically.
    pub fn martingale_at(&self, k: usize, i: usize, j: usize) -> Option<&DMat> {
        match &self.kind {
            SecondAdjointKind::Deterministic(_) => None,
            SecondAdjointKind::PerParticle { q, .. } => Some(&q[k][i][j]),
        }
    }

    /// Population-mean matrix at node `k` (the deterministic matrix itself on
    /// the fast path).
    pub fn mean_matrix(&self, k: usize) -> DMat {
        match &self.kind {
            SecondAdjointKind::Deterministic(p) => p[k].clone(),
            SecondAdjointKind::PerParticle { p, .. } => {
                let cloud = &p[k];
                let n = cloud[0].rows;
                let mut out = DMat::zeros(n, n);
                for r in 0..n {
                    for c in 0..n {
                        let vals: Vec<f64> = cloud.iter().map(|m| m.get(r, c)).collect();
                        out.set(r, c, exec::ordered_sum(&vals) / cloud.len() as f64);
                    }
                }
                out
            }
        }
    }

    /// Smallest eigenvalue of `−P̄_k` over all nodes (population-mean
    /// matrices).  Non-negative means `−P` stays positive semidefinite.
    pub fn min_negated_eigenvalue(&self) -> f64 {
        let mut min_eig = f64::INFINITY;
        for k in 0..=self.grid.steps() {
            let m = self.mean_matrix(k);
            let n = m.rows;
            let neg = DMatrix::from_fn(n, n, |r, c| -m.get(r, c));
            let eigs = neg.symmetric_eigenvalues();
            for e in eigs.iter() {
                min_eig = min_eig.min(*e);
            }
        }
        min_eig
    }

    /// Population-mean matrices as `step,time,P_rc,…` CSV text.
    pub fn to_csv_string(&self) -> String {
        let n = self.matrix_at(0, 0).rows;
        let mut out = String::from("step,time");
        for r in 0..n {
            for c in 0..n {
                out.push_str(&format!(",P_{r}{c}"));
            }
        }
        out.push('\n');
        for k in 0..=self.grid.steps() {
            let m = self.mean_matrix(k);
            out.push_str(&format!("{},{}", k, self.grid.t(k)));
            for e in &m.data {
                out.push_str(&format!(",{e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// One verified duality pairing: the two sides of the identity and their
/// residual.
#[derive(Debug, Clone, Serialize)]
pub struct TranspositionCase {
    /// What was paired (`affine-source-3`, `spike-variation`, …).
    pub label: String,
    /// Terminal-pairing side of the identity.
    pub lhs: f64,
    /// Initial-pairing plus source-integral side.
    pub rhs: f64,
    /// `|lhs − rhs|`.
    pub residual: f64,
    /// Residual relative to the larger side magnitude (0 when both vanish).
    pub relative: f64,
}

/// Residual report of a duality verification run.
#[derive(Debug, Clone, Serialize)]
pub struct TranspositionReport {
    /// Individual pairings.
    pub cases: Vec<TranspositionCase>,
    /// Largest relative residual.
    pub max_relative: f64,
    /// Mean relative residual.
    pub mean_relative: f64,
}

impl TranspositionReport {
    fn from_cases(cases: Vec<TranspositionCase>) -> Self {
        let max_relative = cases.iter().map(|c| c.relative).fold(0.0, f64::max);
        let mean_relative = if cases.is_empty() {
            0.0
        } else {
            cases.iter().map(|c| c.relative).sum::<f64>() / cases.len() as f64
        };
        TranspositionReport {
            cases,
            max_relative,
            mean_relative,
        }
    }

    /// Case by label, if present.
    pub fn case(&self, label: &str) -> Option<&TranspositionCase> {
        self.cases.iter().find(|c| c.label == label)
    }

    /// Pretty-printed JSON for artifact export.
    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn make_case(label: impl Into<String>, lhs: f64, rhs: f64) -> TranspositionCase {
    let residual = (lhs - rhs).abs();
    let scale = lhs.abs().max(rhs.abs());
    let relative = if scale > 1e-14 { residual / scale } else { 0.0 };
    TranspositionCase {
        label: label.into(),
        lhs,
        rhs,
        residual,
        relative,
    }
}

/// Per-sub-horizon outcome of the Picard contraction probe.
#[derive(Debug, Clone, Serialize)]
pub struct SplitReport {
    /// Start time `T₁` of the probed sub-horizon `[T₁, T]`.
    pub t_start: f64,
    /// Sub-horizon length `T − T₁`.
    pub span: f64,
    /// Successive-sweep distances on the sub-horizon.
    pub distances: Vec<f64>,
    /// Empirical contraction factor: the largest successive-distance ratio
    /// after the first sweep (0 when the iteration lands immediately).
    pub factor: f64,
    /// True when ratios stayed ≥ 1 for the divergence streak.
    pub diverged: bool,
}

/// Contraction-probe report across sub-horizon lengths.
#[derive(Debug, Clone, Serialize)]
pub struct ContractionProbe {
    /// One entry per probed split, ordered by increasing span.
    pub splits: Vec<SplitReport>,
}

impl ContractionProbe {
    /// Whether the measured factor is nondecreasing in the sub-horizon
    /// length (up to the given multiplicative slack ≥ 1).
    pub fn factors_nondecreasing_in_span(&self, slack: f64) -> bool {
        self.splits
            .windows(2)
            .all(|w| w[1].factor >= w[0].factor / slack - 1e-12)
    }

    /// Factor measured on the shortest probed sub-horizon.
    pub fn smallest_split_factor(&self) -> f64 {
        self.splits.first().map(|s| s.factor).unwrap_or(0.0)
    }
}

// ---------------------------------------------------------------------------
// Shared backward-sweep context
// ---------------------------------------------------------------------------

/// Immutable per-solve context: references to the base path and all per-step
/// quantities every backward sweep needs.
struct AdjointFrame<'a> {
    space: &'a GalerkinSpace,
    model: &'a CoefficientModel,
    grid: TimeGrid,
    base: &'a StatePath,
    ubar: &'a ControlPath,
    noise: &'a NoiseRecord,
    /// Semigroup factors over one step.
    sg: Vec<f64>,
    /// Interaction statistic per node.
    m_path: Vec<f64>,
    /// Hilbert–Schmidt weights w.
    weights: Vec<f64>,
    /// Noise profile s (diffusion column scales).
    profile: Vec<f64>,
    /// w ∘ s, the collapse weights for adjoint pairings.
    wprofile: Vec<f64>,
    /// Σ_j w_j s_j².
    sw2: f64,
    /// Running-cost mean-derivative average Ẽ[∂_m f] per step.
    mf_running: Vec<f64>,
}

impl<'a> AdjointFrame<'a> {
    fn build(
        context: &'static str,
        space: &'a GalerkinSpace,
        model: &'a CoefficientModel,
        base: &'a StatePath,
        ubar: &'a ControlPath,
        noise: &'a NoiseRecord,
    ) -> Result<Self> {
        let grid = *base.grid();
        let steps = grid.steps();
        if ubar.n_steps() != steps || noise.n_steps() != steps {
            return Err(Error::domain(
                context,
                "base path, control, and noise must share the same step count",
            ));
        }
        let n_particles = base.n_particles();
        if ubar.n_particles() != n_particles || noise.n_particles() != n_particles {
            return Err(Error::domain(
                context,
                "base path, control, and noise must share the same particle count",
            ));
        }
        if model.n_state() != space.n_state() || model.n_noise() != space.n_noise() {
            return Err(Error::domain(
                context,
                "model dimensions do not match the mode space",
            ));
        }
        let sg = space.semigroup_factors(grid.dt())?;
        let mut m_path = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            m_path.push(model.mean_statistic(base.ensemble(k))?);
        }
        let weights = space.hs_weights().to_vec();
        let profile = model.diffusion_profile();
        let wprofile: Vec<f64> = weights
            .iter()
            .zip(&profile)
            .map(|(w, s)| w * s)
            .collect();
        let sw2 = weights
            .iter()
            .zip(&profile)
            .map(|(w, s)| w * s * s)
            .sum();
        let mut mf_running = Vec::with_capacity(steps);
        for k in 0..steps {
            let t = grid.t(k);
            let m = m_path[k];
            let cloud = base.ensemble(k).particles();
            let vals = exec::map_indexed(n_particles, |i| {
                model.running_dm(t, &cloud[i], m, ubar.value(k, i))
            });
            mf_running.push(exec::ordered_sum(&vals) / n_particles as f64);
        }
        Ok(AdjointFrame {
            space,
            model,
            grid,
            base,
            ubar,
            noise,
            sg,
            m_path,
            weights,
            profile,
            wprofile,
            sw2,
            mf_running,
        })
    }

    fn n_particles(&self) -> usize {
        self.base.n_particles()
    }

    fn n_state(&self) -> usize {
        self.space.n_state()
    }

    fn n_noise(&self) -> usize {
        self.space.n_noise()
    }

    /// Collapse a Hilbert–Schmidt matrix against `w ∘ s`: Σ_j w_j s_j col_j.
    fn collapse_weighted(&self, q: &HsMatrix) -> Vec<f64> {
        let n = q.rows();
        let mut out = vec![0.0; n];
        for j in 0..q.cols() {
            let wj = self.wprofile[j];
            if wj != 0.0 {
                for r in 0..n {
                    out[r] += wj * q.get(r, j);
                }
            }
        }
        out
    }

    /// Population average of ∂_m c on step `k` (the rank-one mean-field part
    /// of the linearized diffusion).
    fn diffusion_mean_kernel_average(&self, k: usize) -> Vec<f64> {
        let t = self.grid.t(k);
        let m = self.m_path[k];
        let cloud = self.base.ensemble(k).particles();
        let n = self.n_state();
        let rows = exec::map_indexed(cloud.len(), |i| {
            self.model
                .diffusion_core_dm(t, &cloud[i], m, self.ubar.value(k, i))
                .coords
        });
        let mut avg = vec![0.0; n];
        for c in 0..n {
            let vals: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            avg[c] = exec::ordered_sum(&vals) / cloud.len() as f64;
        }
        avg
    }

    /// Linearized-diffusion core operator for particle `i` on step `k`:
    /// `c_x(x_i) + Ẽ[∂_m c]·ψᵀ` (column `j` of the full operator is `s_j`
    /// times this).
    fn diffusion_core_operator(&self, k: usize, i: usize, cbar: &[f64]) -> DMat {
        let t = self.grid.t(k);
        let m = self.m_path[k];
        let x = &self.base.ensemble(k).particles()[i];
        let mut op = self
            .model
            .diffusion_core_jac_x(t, x, m, self.ubar.value(k, i));
        let psi = &self.model.psi().coords;
        let n = self.n_state();
        for r in 0..n {
            for c in 0..n {
                op.set(r, c, op.get(r, c) + cbar[r] * psi[c]);
            }
        }
        op
    }

    /// Costate driver for particle `i` on step `k`:
    /// `a_x*p + b_x*q − f_x + ψ·(mf_a + mf_b − mf_f)`.
    fn costate_driver(
        &self,
        k: usize,
        i: usize,
        p: &[f64],
        qs_w: &[f64],
        mf_drift: f64,
        mf_diffusion: f64,
    ) -> Vec<f64> {
        let t = self.grid.t(k);
        let m = self.m_path[k];
        let x = &self.base.ensemble(k).particles()[i];
        let u = self.ubar.value(k, i);
        let mut g = self.model.drift_jac_x(t, x, m, u).apply_transpose(p);
        let bq = self
            .model
            .diffusion_core_jac_x(t, x, m, u)
            .apply_transpose(qs_w);
        linalg::axpy(1.0, &bq, &mut g);
        let fx = self.model.running_grad_x(t, x, m, u);
        linalg::axpy(-1.0, &fx.coords, &mut g);
        let mf = mf_drift + mf_diffusion - self.mf_running[k];
        linalg::axpy(mf, &self.model.psi().coords, &mut g);
        g
    }

    /// State-Hessian of the Hamiltonian for particle `i` on step `k`:
    /// `⟨p, a_xx⟩ + ⟨q, b_xx⟩_w − f_xx`.
    fn hamiltonian_hessian(&self, k: usize, i: usize, p: &StateVector, qs_w: &StateVector) -> DMat {
        let t = self.grid.t(k);
        let m = self.m_path[k];
        let x = &self.base.ensemble(k).particles()[i];
        let u = self.ubar.value(k, i);
        let mut h = self.model.drift_hess_contract(t, x, m, u, p);
        h.add_scaled(1.0, &self.model.diffusion_core_hess_contract(t, x, m, u, qs_w));
        h.add_scaled(-1.0, &self.model.running_hess_x(t, x, m, u));
        h
    }

    /// Terminal costate cloud `p_M = −h_x − ψ·Ẽ[∂_m h]`.
    fn terminal_costate(&self) -> Vec<StateVector> {
        let steps = self.grid.steps();
        let m = self.m_path[steps];
        let cloud = self.base.ensemble(steps).particles();
        let n_particles = cloud.len();
        let dm_vals = exec::map_indexed(n_particles, |i| self.model.terminal_dm(&cloud[i], m));
        let mfh = exec::ordered_sum(&dm_vals) / n_particles as f64;
        let psi = self.model.psi();
        exec::map_indexed(n_particles, |i| {
            let mut g = self.model.terminal_grad_x(&cloud[i], m).coords;
            linalg::axpy(mfh, &psi.coords, &mut g);
            linalg::scale(-1.0, &mut g);
            StateVector::from_coords(g)
        })
    }

    /// Terminal second-order matrices `P_M = −h_xx` per particle (the
    /// mixed state–measure kernel vanishes identically for the scalar
    /// interaction statistic).
    fn terminal_curvature(&self) -> Vec<DMat> {
        let steps = self.grid.steps();
        let m = self.m_path[steps];
        let cloud = self.base.ensemble(steps).particles();
        exec::map_indexed(cloud.len(), |i| {
            let mut h = self.model.terminal_hess_x(&cloud[i], m);
            for v in h.data.iter_mut() {
                *v = -*v;
            }
            h
        })
    }
}

// ---------------------------------------------------------------------------
// Conditional-expectation regression
// ---------------------------------------------------------------------------

fn feature_count(n: usize) -> usize {
    1 + n + n * (n + 1) / 2
}

fn fill_features(x: &[f64], out: &mut [f64]) {
    let n = x.len();
    out[0] = 1.0;
    out[1..1 + n].copy_from_slice(x);
    let mut idx = 1 + n;
    for c in 0..n {
        for d in c..n {
            out[idx] = x[c] * x[d];
            idx += 1;
        }
    }
}

/// Per-step least-squares projector onto the degree ≤ 2 polynomial basis.
struct StepFit {
    nf: usize,
    /// Row-major `N × nf` feature matrix.
    feats: Vec<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

fn build_step_fit(states: &[StateVector]) -> Result<StepFit> {
    let n = states[0].dim();
    let nf = feature_count(n);
    let n_particles = states.len();
    let feats = {
        let rows = exec::map_indexed(n_particles, |i| {
            let mut row = vec![0.0; nf];
            fill_features(&states[i].coords, &mut row);
            row
        });
        let mut flat = vec![0.0; n_particles * nf];
        for (i, row) in rows.iter().enumerate() {
            flat[i * nf..(i + 1) * nf].copy_from_slice(row);
        }
        flat
    };
    // Gram assembly: per-particle outer products folded in index order so the
    // result is independent of the worker count.
    let contribs = exec::map_indexed(n_particles, |i| {
        let row = &feats[i * nf..(i + 1) * nf];
        let mut g = vec![0.0; nf * nf];
        for a in 0..nf {
            for b in 0..nf {
                g[a * nf + b] = row[a] * row[b];
            }
        }
        g
    });
    let mut gram = vec![0.0; nf * nf];
    for g in &contribs {
        for (acc, v) in gram.iter_mut().zip(g) {
            *acc += *v;
        }
    }
    let ridge = REGRESSION_RIDGE * n_particles as f64;
    for a in 0..nf {
        gram[a * nf + a] += ridge;
    }
    let gram = DMatrix::from_fn(nf, nf, |r, c| gram[r * nf + c]);
    let chol = Cholesky::new(gram).ok_or_else(|| {
        Error::numerical(
            "conditional_regression",
            "Gram matrix factorization failed despite ridge regularization",
        )
    })?;
    Ok(StepFit { nf, feats, chol })
}

impl StepFit {
    /// Project per-particle targets (`N × n_out`, row-major) onto the basis
    /// and return the fitted values at each particle (`N × n_out`).
    fn project(&self, targets: &[f64], n_out: usize) -> Vec<f64> {
        let nf = self.nf;
        let n_particles = targets.len() / n_out;
        // Cross moments Fᵀ·Y, folded in particle order.
        let contribs = exec::map_indexed(n_particles, |i| {
            let row = &self.feats[i * nf..(i + 1) * nf];
            let tgt = &targets[i * n_out..(i + 1) * n_out];
            let mut c = vec![0.0; nf * n_out];
            for a in 0..nf {
                for o in 0..n_out {
                    c[a * n_out + o] = row[a] * tgt[o];
                }
            }
            c
        });
        let mut rhs = vec![0.0; nf * n_out];
        for c in &contribs {
            for (acc, v) in rhs.iter_mut().zip(c) {
                *acc += *v;
            }
        }
        let rhs = DMatrix::from_fn(nf, n_out, |r, c| rhs[r * n_out + c]);
        let beta = self.chol.solve(&rhs);
        let beta_cols: Vec<Vec<f64>> = (0..n_out)
            .map(|o| (0..nf).map(|a| beta[(a, o)]).collect())
            .collect();
        let fitted = exec::map_indexed(n_particles, |i| {
            let row = &self.feats[i * nf..(i + 1) * nf];
            let mut out = vec![0.0; n_out];
            for (o, col) in beta_cols.iter().enumerate() {
                out[o] = linalg::dot(row, col);
            }
            out
        });
        let mut flat = vec![0.0; n_particles * n_out];
        for (i, row) in fitted.iter().enumerate() {
            flat[i * n_out..(i + 1) * n_out].copy_from_slice(row);
        }
        flat
    }
}

// ---------------------------------------------------------------------------
// First-order backward solve
// ---------------------------------------------------------------------------

struct PicardOutcome {
    p: Vec<Vec<StateVector>>,
    q: Vec<Vec<HsMatrix>>,
    distances: Vec<f64>,
    converged: bool,
    diverged: bool,
    last_ratios: Vec<f64>,
}

/// One backward sweep with frozen mean-field driver scalars.
fn costate_sweep(
    frame: &AdjointFrame<'_>,
    k_start: usize,
    p_terminal: &[StateVector],
    mf_drift: &[f64],
    mf_diffusion: &[f64],
) -> Result<(Vec<Vec<StateVector>>, Vec<Vec<HsMatrix>>)> {
    let steps = frame.grid.steps();
    let n = frame.n_state();
    let nn = frame.n_noise();
    let n_particles = frame.n_particles();
    let dt = frame.grid.dt();
    let n_out = n * (1 + nn);
    let mut p: Vec<Vec<StateVector>> = vec![Vec::new(); steps + 1];
    let mut q: Vec<Vec<HsMatrix>> = vec![Vec::new(); steps];
    p[steps] = p_terminal.to_vec();
    for k in (k_start..steps).rev() {
        let states = frame.base.ensemble(k).particles();
        let fit = build_step_fit(states)?;
        let p_next = &p[k + 1];
        // Targets: the semigroup-pulled next costate, then its noise-scaled
        // copies for the martingale regression.
        let targets = {
            let rows = exec::map_indexed(n_particles, |i| {
                let mut row = vec![0.0; n_out];
                let pn = &p_next[i].coords;
                for c in 0..n {
                    row[c] = frame.sg[c] * pn[c];
                }
                let dw = frame.noise.increment(k, i);
                for j in 0..nn {
                    let scale = dw[j] / (frame.weights[j] * dt);
                    for c in 0..n {
                        row[n + j * n + c] = row[c] * scale;
                    }
                }
                row
            });
            let mut flat = vec![0.0; n_particles * n_out];
            for (i, row) in rows.iter().enumerate() {
                flat[i * n_out..(i + 1) * n_out].copy_from_slice(row);
            }
            flat
        };
        let fitted = fit.project(&targets, n_out);
        let assembled = exec::map_indexed(n_particles, |i| {
            let row = &fitted[i * n_out..(i + 1) * n_out];
            let phat = &row[..n];
            let mut qmat = frame.space.zero_hs();
            for j in 0..nn {
                for c in 0..n {
                    qmat.set(c, j, row[n + j * n + c]);
                }
            }
            let qs_w = frame.collapse_weighted(&qmat);
            let g = frame.costate_driver(k, i, phat, &qs_w, mf_drift[k], mf_diffusion[k]);
            let mut pk = phat.to_vec();
            linalg::axpy(dt, &g, &mut pk);
            (StateVector::from_coords(pk), qmat)
        });
        let mut p_row = Vec::with_capacity(n_particles);
        let mut q_row = Vec::with_capacity(n_particles);
        for (pv, qm) in assembled {
            if !linalg::all_finite(&pv.coords) {
                return Err(Error::numerical(
                    "solve_first_adjoint",
                    format!("non-finite costate at step {k}"),
                ));
            }
            p_row.push(pv);
            q_row.push(qm);
        }
        p[k] = p_row;
        q[k] = q_row;
    }
    Ok((p, q))
}

/// Mean-field driver scalars recomputed from a costate iterate.
fn mean_field_scalars(
    frame: &AdjointFrame<'_>,
    k_start: usize,
    p: &[Vec<StateVector>],
    q: &[Vec<HsMatrix>],
) -> (Vec<f64>, Vec<f64>) {
    let steps = frame.grid.steps();
    let n_particles = frame.n_particles();
    let mut mf_drift = vec![0.0; steps];
    let mut mf_diffusion = vec![0.0; steps];
    for k in k_start..steps {
        if p[k].is_empty() {
            continue;
        }
        let t = frame.grid.t(k);
        let m = frame.m_path[k];
        let cloud = frame.base.ensemble(k).particles();
        let p_row = &p[k];
        let q_row = &q[k];
        let drift_vals = exec::map_indexed(n_particles, |i| {
            let am = frame
                .model
                .drift_dm(t, &cloud[i], m, frame.ubar.value(k, i));
            linalg::dot(&am.coords, &p_row[i].coords)
        });
        let diff_vals = exec::map_indexed(n_particles, |i| {
            let cm = frame
                .model
                .diffusion_core_dm(t, &cloud[i], m, frame.ubar.value(k, i));
            let qs_w = frame.collapse_weighted(&q_row[i]);
            linalg::dot(&cm.coords, &qs_w)
        });
        mf_drift[k] = exec::ordered_sum(&drift_vals) / n_particles as f64;
        mf_diffusion[k] = exec::ordered_sum(&diff_vals) / n_particles as f64;
    }
    (mf_drift, mf_diffusion)
}

/// Surrogate norm distance `max_k (Ê‖Δp‖²)^½ + (Σ_k Ê‖Δq‖²_w Δt)^½` between
/// two iterates (empty rows count as zero).
fn surrogate_distance(
    frame: &AdjointFrame<'_>,
    k_start: usize,
    p_a: &[Vec<StateVector>],
    q_a: &[Vec<HsMatrix>],
    p_b: &[Vec<StateVector>],
    q_b: &[Vec<HsMatrix>],
) -> f64 {
    let steps = frame.grid.steps();
    let n_particles = frame.n_particles();
    let dt = frame.grid.dt();
    let mut p_part: f64 = 0.0;
    for k in k_start..=steps {
        let vals = exec::map_indexed(n_particles, |i| {
            let za;
            let a = if p_a[k].is_empty() {
                za = frame.space.zero_state();
                &za
            } else {
                &p_a[k][i]
            };
            let zb;
            let b = if p_b[k].is_empty() {
                zb = frame.space.zero_state();
                &zb
            } else {
                &p_b[k][i]
            };
            a.minus(b).norm_sq()
        });
        let mean = exec::ordered_sum(&vals) / n_particles as f64;
        p_part = p_part.max(mean);
    }
    let mut q_part = 0.0;
    for k in k_start..steps {
        let vals = exec::map_indexed(n_particles, |i| {
            let mut s = 0.0;
            for j in 0..frame.n_noise() {
                let wj = frame.weights[j];
                for r in 0..frame.n_state() {
                    let a = if q_a[k].is_empty() { 0.0 } else { q_a[k][i].get(r, j) };
                    let b = if q_b[k].is_empty() { 0.0 } else { q_b[k][i].get(r, j) };
                    let d = a - b;
                    s += wj * d * d;
                }
            }
            s
        });
        q_part += dt * exec::ordered_sum(&vals) / n_particles as f64;
    }
    p_part.sqrt() + q_part.sqrt()
}

fn picard_costate(
    frame: &AdjointFrame<'_>,
    k_start: usize,
    max_iters: usize,
) -> Result<PicardOutcome> {
    let steps = frame.grid.steps();
    let p_terminal = frame.terminal_costate();
    let mut p: Vec<Vec<StateVector>> = vec![Vec::new(); steps + 1];
    p[steps] = p_terminal.clone();
    let mut q: Vec<Vec<HsMatrix>> = vec![Vec::new(); steps];
    let mut mf_drift = vec![0.0; steps];
    let mut mf_diffusion = vec![0.0; steps];
    let mut distances = Vec::new();
    let mut converged = false;
    let mut diverged = false;
    let mut streak = 0usize;
    for _ in 0..max_iters {
        let (p_new, q_new) = costate_sweep(frame, k_start, &p_terminal, &mf_drift, &mf_diffusion)?;
        let d = surrogate_distance(frame, k_start, &p_new, &q_new, &p, &q);
        distances.push(d);
        p = p_new;
        q = q_new;
        let (d1, d2) = mean_field_scalars(frame, k_start, &p, &q);
        mf_drift = d1;
        mf_diffusion = d2;
        let scale = surrogate_distance(
            frame,
            k_start,
            &p,
            &q,
            &vec![Vec::new(); steps + 1],
            &vec![Vec::new(); steps],
        );
        let floor = PICARD_TOL_REL * (1.0 + scale);
        if d <= floor {
            converged = true;
            break;
        }
        if distances.len() >= 2 {
            let prev = distances[distances.len() - 2];
            if prev > 0.0 && d / prev >= 1.0 && d > 8.0 * floor {
                streak += 1;
            } else {
                streak = 0;
            }
            if streak >= PICARD_DIVERGENCE_STREAK {
                diverged = true;
                break;
            }
        }
    }
    let last_ratios: Vec<f64> = distances
        .windows(2)
        .rev()
        .take(PICARD_DIVERGENCE_STREAK)
        .map(|w| w[1] / w[0].max(f64::MIN_POSITIVE))
        .collect();
    Ok(PicardOutcome {
        p,
        q,
        distances,
        converged,
        diverged,
        last_ratios,
    })
}

/// Solve the first-order backward system along `base` under `ubar`.
///
/// `PicardRegression` runs the backward exponential Euler scheme with
/// regression conditional expectations and an outer fixed-point loop on the
/// mean-field driver scalars; a sustained non-contracting distance ratio is
/// reported as an error carrying the measured ratios.  `LqClosedForm`
/// integrates the deterministic affine representation `p = −(Γx + γ)`,
/// `q = −Γ·b` (affine benchmark family only) and evaluates it on the base
/// particles — an independent oracle for the regression path.
pub fn solve_first_adjoint(
    space: &GalerkinSpace,
    model: &CoefficientModel,
    base: &StatePath,
    ubar: &ControlPath,
    noise: &NoiseRecord,
    method: FirstAdjointMethod,
) -> Result<FirstAdjointPath> {
    let frame = AdjointFrame::build("solve_first_adjoint", space, model, base, ubar, noise)?;
    match method {
        FirstAdjointMethod::PicardRegression => {
            let outcome = picard_costate(&frame, 0, PICARD_MAX_ITERS)?;
            if outcome.diverged {
                let ratios: Vec<String> = outcome
                    .last_ratios
                    .iter()
                    .map(|r| format!("{r:.3}"))
                    .collect();
                return Err(Error::numerical(
                    "solve_first_adjoint",
                    format!(
                        "mean-field fixed-point iteration is not contracting \
                         (successive distance ratios {})",
                        ratios.join(", ")
                    ),
                ));
            }
            Ok(FirstAdjointPath {
                grid: frame.grid,
                p: outcome.p,
                q: outcome.q,
                diagnostics: PicardDiagnostics {
                    iterations: outcome.distances.len(),
                    distances: outcome.distances,
                    converged: outcome.converged,
                },
            })
        }
        FirstAdjointMethod::LqClosedForm => closed_form_costate(&frame),
    }
}

/// Backward affine flow coefficients at the grid nodes.
struct AffineCostateFlow {
    gammas: Vec<DMat>,
    offsets: Vec<Vec<f64>>,
}

fn closed_form_costate(frame: &AdjointFrame<'_>) -> Result<FirstAdjointPath> {
    let flow = affine_costate_flow(frame)?;
    let steps = frame.grid.steps();
    let n_particles = frame.n_particles();
    let mut p = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let cloud = frame.base.ensemble(k).particles();
        let gamma = &flow.gammas[k];
        let offset = &flow.offsets[k];
        p.push(exec::map_indexed(n_particles, |i| {
            let mut v = gamma.apply(&cloud[i].coords);
            linalg::axpy(1.0, offset, &mut v);
            linalg::scale(-1.0, &mut v);
            StateVector::from_coords(v)
        }));
    }
    let mut q = Vec::with_capacity(steps);
    for k in 0..steps {
        let cloud = frame.base.ensemble(k).particles();
        let gamma = &flow.gammas[k];
        let t = frame.grid.t(k);
        let m = frame.m_path[k];
        q.push(exec::map_indexed(n_particles, |i| {
            let b = frame
                .model
                .diffusion_at(t, &cloud[i], m, frame.ubar.value(k, i));
            let mut out = frame.space.zero_hs();
            for j in 0..frame.n_noise() {
                let col: Vec<f64> = (0..frame.n_state()).map(|r| b.get(r, j)).collect();
                let gb = gamma.apply(&col);
                for r in 0..frame.n_state() {
                    out.set(r, j, -gb[r]);
                }
            }
            out
        }));
    }
    Ok(FirstAdjointPath {
        grid: frame.grid,
        p,
        q,
        diagnostics: PicardDiagnostics {
            iterations: 0,
            distances: Vec::new(),
            converged: true,
        },
    })
}

fn affine_costate_flow(frame: &AdjointFrame<'_>) -> Result<AffineCostateFlow> {
    let qm = frame.model.quadratic_parts().ok_or_else(|| {
        Error::domain(
            "solve_first_adjoint",
            "the closed-form method requires the affine benchmark family",
        )
    })?;
    let steps = frame.grid.steps();
    let n_particles = frame.n_particles();
    for k in 0..steps {
        let u0 = frame.ubar.value(k, 0);
        for i in 1..n_particles {
            if frame.ubar.value(k, i) != u0 {
                return Err(Error::domain(
                    "solve_first_adjoint",
                    "the closed-form method requires a particle-uniform base control",
                ));
            }
        }
    }
    let n = frame.n_state();
    // Full drift linearization A + A₁ (ambient modes plus coupling matrix).
    let mut lam_plus = qm.drift_matrix.clone();
    for (c, ev) in frame.space.eigenvalues().iter().enumerate() {
        lam_plus.set(c, c, lam_plus.get(c, c) + ev);
    }
    let lam_plus_t = lam_plus.transpose();
    let c1 = &qm.diffusion_matrix;
    let c1_t = c1.transpose();
    let sw2 = frame.sw2;
    let b0ws = qm.diffusion_const.apply(&frame.wprofile);
    let psi = &qm.psi;
    // Node means of the base ensembles, for the inhomogeneous flow.
    let means: Vec<Vec<f64>> = (0..=steps)
        .map(|k| frame.base.ensemble(k).mean().coords)
        .collect();
    let interp = |k: usize, t: f64| -> Vec<f64> {
        // Linear interpolation of the ensemble mean inside step k.
        let t0 = frame.grid.t(k);
        let w = ((t - t0) / frame.grid.dt()).clamp(0.0, 1.0);
        let lo = &means[k];
        let hi = &means[k + 1];
        (0..n).map(|c| lo[c] + w * (hi[c] - lo[c])).collect()
    };
    let gamma_rate = |g: &DMat| -> DMat {
        // Γ̇ = −[(A+A₁)ᵀΓ + Γ(A+A₁) + (Σ w s²)·C₁ᵀΓC₁ + M]
        let mut rate = lam_plus_t.matmul(g);
        rate.add_scaled(1.0, &g.matmul(&lam_plus));
        rate.add_scaled(sw2, &c1_t.matmul(&g.matmul(c1)));
        rate.add_scaled(1.0, &qm.running_state_quad);
        for v in rate.data.iter_mut() {
            *v = -*v;
        }
        rate
    };
    let offset_rate = |k: usize, t: f64, g: &DMat, off: &[f64]| -> Vec<f64> {
        let xbar = interp(k, t);
        let m = linalg::dot(psi, &xbar);
        let u = frame.ubar.value(k, 0);
        // Noise-collapsed diffusion at the mean (state part) and without it.
        let mut bs_const = b0ws.clone();
        linalg::axpy(sw2 * qm.diffusion_mean_gain * m, &qm.diffusion_mean_dir, &mut bs_const);
        linalg::axpy(
            sw2 * qm.diffusion_control_gain * u,
            &qm.diffusion_control_dir,
            &mut bs_const,
        );
        let mut bs_full = bs_const.clone();
        let c1x = c1.apply(&xbar);
        linalg::axpy(sw2, &c1x, &mut bs_full);
        let mut rate = lam_plus_t.apply(off);
        let gx_off = {
            let mut v = g.apply(&xbar);
            linalg::axpy(1.0, off, &mut v);
            v
        };
        linalg::axpy(
            qm.drift_mean_gain * linalg::dot(&qm.drift_mean_dir, &gx_off),
            psi,
            &mut rate,
        );
        linalg::axpy(1.0, &c1_t.apply(&g.apply(&bs_const)), &mut rate);
        linalg::axpy(
            qm.diffusion_mean_gain * linalg::dot(&qm.diffusion_mean_dir, &g.apply(&bs_full)),
            psi,
            &mut rate,
        );
        linalg::axpy(qm.running_mean_quad * m, psi, &mut rate);
        let mut drive = vec![0.0; n];
        linalg::axpy(qm.drift_mean_gain * m, &qm.drift_mean_dir, &mut drive);
        linalg::axpy(
            qm.drift_control_gain * u,
            &qm.drift_control_dir,
            &mut drive,
        );
        linalg::axpy(1.0, &g.apply(&drive), &mut rate);
        linalg::scale(-1.0, &mut rate);
        rate
    };
    let m_terminal = frame.m_path[steps];
    let mut gam = qm.terminal_state_quad.clone();
    let mut off = qm.terminal_linear.clone();
    linalg::axpy(qm.terminal_mean_quad * m_terminal, psi, &mut off);
    let mut gammas = vec![DMat::zeros(n, n); steps + 1];
    let mut offsets = vec![vec![0.0; n]; steps + 1];
    gammas[steps] = gam.clone();
    offsets[steps] = off.clone();
    let h = -frame.grid.dt() / CLOSED_FORM_SUBSTEPS as f64;
    for k in (0..steps).rev() {
        let mut t = frame.grid.t(k + 1);
        for _ in 0..CLOSED_FORM_SUBSTEPS {
            // Joint RK4 step on (Γ, γ) with negative step size.
            let kg1 = gamma_rate(&gam);
            let ko1 = offset_rate(k, t, &gam, &off);
            let (g2, o2) = advanced(&gam, &off, 0.5 * h, &kg1, &ko1);
            let kg2 = gamma_rate(&g2);
            let ko2 = offset_rate(k, t + 0.5 * h, &g2, &o2);
            let (g3, o3) = advanced(&gam, &off, 0.5 * h, &kg2, &ko2);
            let kg3 = gamma_rate(&g3);
            let ko3 = offset_rate(k, t + 0.5 * h, &g3, &o3);
            let (g4, o4) = advanced(&gam, &off, h, &kg3, &ko3);
            let kg4 = gamma_rate(&g4);
            let ko4 = offset_rate(k, t + h, &g4, &o4);
            for (idx, v) in gam.data.iter_mut().enumerate() {
                *v += h / 6.0
                    * (kg1.data[idx] + 2.0 * kg2.data[idx] + 2.0 * kg3.data[idx] + kg4.data[idx]);
            }
            for (idx, v) in off.iter_mut().enumerate() {
                *v += h / 6.0 * (ko1[idx] + 2.0 * ko2[idx] + 2.0 * ko3[idx] + ko4[idx]);
            }
            t += h;
        }
        gam.symmetrize();
        gammas[k] = gam.clone();
        offsets[k] = off.clone();
    }
    Ok(AffineCostateFlow { gammas, offsets })
}

fn advanced(g: &DMat, o: &[f64], h: f64, kg: &DMat, ko: &[f64]) -> (DMat, Vec<f64>) {
    let mut g2 = g.clone();
    g2.add_scaled(h, kg);
    let mut o2 = o.to_vec();
    linalg::axpy(h, ko, &mut o2);
    (g2, o2)
}

/// Measure the empirical Picard contraction factor over sub-horizons
/// `[T₁, T]` for each start time in `horizon_splits`.
///
/// The factor is the largest successive-distance ratio after the first sweep
/// in the surrogate norm `max_k(Ê‖Δp‖²)^½ + (Σ_k Ê‖Δq‖² Δt)^½`; divergent
/// iterations are flagged in the report rather than raised as errors.
pub fn picard_contraction_probe(
    space: &GalerkinSpace,
    model: &CoefficientModel,
    base: &StatePath,
    ubar: &ControlPath,
    noise: &NoiseRecord,
    horizon_splits: &[f64],
) -> Result<ContractionProbe> {
    let frame = AdjointFrame::build("picard_contraction_probe", space, model, base, ubar, noise)?;
    if horizon_splits.len() < 2 {
        return Err(Error::domain(
            "picard_contraction_probe",
            "at least two sub-horizon start times are required",
        ));
    }
    let horizon = frame.grid.horizon();
    let dt = frame.grid.dt();
    let steps = frame.grid.steps();
    let mut splits = Vec::with_capacity(horizon_splits.len());
    for &t1 in horizon_splits {
        if !(0.0..horizon).contains(&t1) {
            return Err(Error::domain(
                "picard_contraction_probe",
                format!("sub-horizon start {t1} is outside [0, T)"),
            ));
        }
        let k_start = ((t1 / dt).round() as usize).min(steps - 1);
        let outcome = picard_costate(&frame, k_start, 12)?;
        let scale = surrogate_distance(
            &frame,
            k_start,
            &outcome.p,
            &outcome.q,
            &vec![Vec::new(); steps + 1],
            &vec![Vec::new(); steps],
        );
        let floor = 64.0 * PICARD_TOL_REL * (1.0 + scale);
        let mut factor: f64 = 0.0;
        for w in outcome.distances.windows(2) {
            if w[0] > floor && w[1] > floor {
                factor = factor.max(w[1] / w[0]);
            }
        }
        splits.push(SplitReport {
            t_start: frame.grid.t(k_start),
            span: horizon - frame.grid.t(k_start),
            distances: outcome.distances,
            factor,
            diverged: outcome.diverged,
        });
    }
    splits.sort_by(|a, b| a.span.partial_cmp(&b.span).expect("finite spans"));
    Ok(ContractionProbe { splits })
}

// ---------------------------------------------------------------------------
// First duality identity
// ---------------------------------------------------------------------------

/// Left-endpoint accumulator for the first duality identity applied to one
/// test system given by per-step drift/diffusion slots.
struct FirstPairing {
    lhs: f64,
    rhs: f64,
}

fn pair_first_system(
    frame: &AdjointFrame<'_>,
    adj: &FirstAdjointPath,
    mf_drift: &[f64],
    mf_diffusion: &[f64],
    x_path: &[Vec<StateVector>],
    drift_slot: impl Fn(usize, usize) -> Vec<f64> + Sync,
    diffusion_slot: impl Fn(usize, usize) -> HsMatrix + Sync,
) -> FirstPairing {
    let steps = frame.grid.steps();
    let n_particles = frame.n_particles();
    let dt = frame.grid.dt();
    // Terminal pairing.
    let vals = exec::map_indexed(n_particles, |i| {
        linalg::dot(&x_path[steps][i].coords, &adj.costate(steps)[i].coords)
    });
    let mut lhs = exec::ordered_sum(&vals) / n_particles as f64;
    let vals = exec::map_indexed(n_particles, |i| {
        linalg::dot(&x_path[0][i].coords, &adj.costate(0)[i].coords)
    });
    let mut rhs = exec::ordered_sum(&vals) / n_particles as f64;
    for k in 0..steps {
        // lhs −= ⟨X, F⟩ dt with F = −driver, so lhs += ⟨X, driver⟩ dt.
        let driver_vals = exec::map_indexed(n_particles, |i| {
            let qs_w = frame.collapse_weighted(&adj.martingale(k)[i]);
            let g = frame.costate_driver(
                k,
                i,
                &adj.costate(k)[i].coords,
                &qs_w,
                mf_drift[k],
                mf_diffusion[k],
            );
            linalg::dot(&x_path[k][i].coords, &g)
        });
        lhs += dt * exec::ordered_sum(&driver_vals) / n_particles as f64;
        let source_vals = exec::map_indexed(n_particles, |i| {
            let alpha = drift_slot(k, i);
            let mut s = linalg::dot(&alpha, &adj.costate(k)[i].coords);
            let beta = diffusion_slot(k, i);
            let q = &adj.martingale(k)[i];
            for j in 0..frame.n_noise() {
                let wj = frame.weights[j];
                for r in 0..frame.n_state() {
                    s += wj * beta.get(r, j) * q.get(r, j);
                }
            }
            s
        });
        rhs += dt * exec::ordered_sum(&source_vals) / n_particles as f64;
    }
    FirstPairing { lhs, rhs }
}

/// Verify the first duality identity against random affine test systems and
/// (when a spiked control is supplied) the spike-variation instance.
///
/// Each test system shares the grid and the noise of the base path:
/// `X_{k+1} = S(Δt)[X_k + α_k Δt + β_k ΔW_k]` with piecewise-constant drawn
/// sources, paired against the costate through
/// `Ê⟨X_M, p_M⟩ + Σ⟨X_k, driver_k⟩Δt  =  Ê⟨X_0, p_0⟩ + Σ[⟨α_k, p_k⟩ + ⟨β_k, q_k⟩_w]Δt`.
pub fn verify_transposition_first(
    space: &GalerkinSpace,
    model: &CoefficientModel,
    base: &StatePath,
    ubar: &ControlPath,
    noise: &NoiseRecord,
    adj: &FirstAdjointPath,
    test_source_count: usize,
    spiked: Option<&ControlPath>,
    stream: &mut RngStream,
) -> Result<TranspositionReport> {
    let frame = AdjointFrame::build("verify_transposition_first", space, model, base, ubar, noise)?;
    let steps = frame.grid.steps();
    if adj.grid().steps() != steps || adj.n_particles() != frame.n_particles() {
        return Err(Error::domain(
            "verify_transposition_first",
            "adjoint path geometry does not match the base path",
        ));
    }
    let (mf_drift, mf_diffusion) = mean_field_scalars(&frame, 0, &adj.p, &adj.q);
    let n = frame.n_state();
    let nn = frame.n_noise();
    let n_particles = frame.n_particles();
    let dt = frame.grid.dt();
    let mut cases = Vec::new();
    for case_idx in 0..test_source_count {
        let center: Vec<f64> = (0..n).map(|_| 0.6 * stream.standard_normal()).collect();
        let xi: Vec<StateVector> = (0..n_particles)
            .map(|_| {
                let coords = center
                    .iter()
                    .map(|c| c + 0.3 * stream.standard_normal())
                    .collect();
                StateVector::from_coords(coords)
            })
            .collect();
        let alphas: Vec<Vec<f64>> = (0..steps)
            .map(|_| (0..n).map(|_| 0.5 * stream.standard_normal()).collect())
            .collect();
        let betas: Vec<HsMatrix> = (0..steps)
            .map(|_| {
                let mut b = space.zero_hs();
                for r in 0..n {
                    for j in 0..nn {
                        b.set(r, j, 0.35 * stream.standard_normal());
                    }
                }
                b
            })
            .collect();
        let mut x_path: Vec<Vec<StateVector>> = Vec::with_capacity(steps + 1);
        x_path.push(xi);
        for k in 0..steps {
            let prev = &x_path[k];
            let next = exec::map_indexed(n_particles, |i| {
                let mut acc = prev[i].clone();
                linalg::axpy(dt, &alphas[k], &mut acc.coords);
                betas[k].accumulate_increment(frame.noise.increment(k, i), &mut acc.coords);
                for (c, v) in acc.coords.iter_mut().enumerate() {
                    *v *= frame.sg[c];
                }
                acc
            });
            x_path.push(next);
        }
        let pairing = pair_first_system(
            &frame,
            adj,
            &mf_drift,
            &mf_diffusion,
            &x_path,
            |k, _i| alphas[k].clone(),
            |k, _i| betas[k].clone(),
        );
        cases.push(make_case(
            format!("affine-source-{case_idx}"),
            pairing.lhs,
            pairing.rhs,
        ));
    }
    if let Some(spiked_control) = spiked {
        let var = solve_first_variation(space, model, &frame.grid, base, ubar, spiked_control, noise)?;
        let mut y_path: Vec<Vec<StateVector>> = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            y_path.push(var.first(k).to_vec());
        }
        let m_y: Vec<f64> = (0..=steps)
            .map(|k| linalg::dot(&model.psi().coords, &var.first_mean(k).coords))
            .collect();
        let pairing = pair_first_system(
            &frame,
            adj,
            &mf_drift,
            &mf_diffusion,
            &y_path,
            |k, i| {
                let t = frame.grid.t(k);
                let m = frame.m_path[k];
                let x = &frame.base.ensemble(k).particles()[i];
                let u0 = frame.ubar.value(k, i);
                let mut a = model.drift_jac_x(t, x, m, u0).apply(&y_path[k][i].coords);
                let am = model.drift_dm(t, x, m, u0);
                linalg::axpy(m_y[k], &am.coords, &mut a);
                let u1 = spiked_control.value(k, i);
                if u1 != u0 {
                    let da = model
                        .drift_at(t, x, m, u1)
                        .minus(&model.drift_at(t, x, m, u0));
                    linalg::axpy(1.0, &da.coords, &mut a);
                }
                a
            },
            |k, i| {
                let t = frame.grid.t(k);
                let m = frame.m_path[k];
                let x = &frame.base.ensemble(k).particles()[i];
                let u0 = frame.ubar.value(k, i);
                let mut core = model
                    .diffusion_core_jac_x(t, x, m, u0)
                    .apply(&y_path[k][i].coords);
                let cm = model.diffusion_core_dm(t, x, m, u0);
                linalg::axpy(m_y[k], &cm.coords, &mut core);
                let mut b = space.zero_hs();
                for j in 0..nn {
                    for r in 0..n {
                        b.set(r, j, core[r] * frame.profile[j]);
                    }
                }
                let u1 = spiked_control.value(k, i);
                if u1 != u0 {
                    let b1 = model.diffusion_at(t, x, m, u1);
                    let b0 = model.diffusion_at(t, x, m, u0);
                    for j in 0..nn {
                        for r in 0..n {
                            b.set(r, j, b.get(r, j) + b1.get(r, j) - b0.get(r, j));
                        }
                    }
                }
                b
            },
        );
        cases.push(make_case("spike-variation", pairing.lhs, pairing.rhs));
    }
    Ok(TranspositionReport::from_cases(cases))
}

// ---------------------------------------------------------------------------
// Second-order backward solve
// ---------------------------------------------------------------------------

/// Entrywise semigroup sandwich `S·M·S` for diagonal factors.
fn sandwich(sg: &[f64], m: &DMat) -> DMat {
    let n = m.rows;
    let mut out = m.clone();
    for r in 0..n {
        for c in 0..n {
            out.set(r, c, sg[r] * m.get(r, c) * sg[c]);
        }
    }
    out
}

/// Solve the second-order backward matrix system along `base`.
///
/// `DeterministicLyapunov` requires the affine benchmark family (all
/// linearized coefficients deterministic); the martingale component then
/// vanishes and one matrix per node is propagated.  `Regression` runs a
/// per-particle sweep with regression conditional expectations and estimates
/// the martingale component from noise correlations; it needs the first-order
/// path for the Hamiltonian Hessian.  Matrices are symmetrized after every
/// step and the worst pre-symmetrization asymmetry is recorded.
pub fn solve_second_adjoint(
    space: &GalerkinSpace,
    model: &CoefficientModel,
    base: &StatePath,
    ubar: &ControlPath,
    noise: &NoiseRecord,
    first: &FirstAdjointPath,
    method: SecondAdjointMethod,
) -> Result<SecondAdjointPath> {
    let frame = AdjointFrame::build("solve_second_adjoint", space, model, base, ubar, noise)?;
    if !model.y_mu_identically_zero() {
        return Err(Error::domain(
            "solve_second_adjoint",
            "mixed state–measure coefficient kernels are outside this solver's scope",
        ));
    }
    if first.grid().steps() != frame.grid.steps() || first.n_particles() != frame.n_particles() {
        return Err(Error::domain(
            "solve_second_adjoint",
            "first-order path geometry does not match the base path",
        ));
    }
    match method {
        SecondAdjointMethod::DeterministicLyapunov => deterministic_curvature(&frame),
        SecondAdjointMethod::Regression => regression_curvature(&frame, first),
    }
}

fn deterministic_curvature(frame: &AdjointFrame<'_>) -> Result<SecondAdjointPath> {
    let qm = frame.model.quadratic_parts().ok_or_else(|| {
        Error::domain(
            "solve_second_adjoint",
            "the deterministic method requires the affine benchmark family",
        )
    })?;
    let steps = frame.grid.steps();
    let n = frame.n_state();
    let dt = frame.grid.dt();
    let j_mat = &qm.drift_matrix;
    let j_t = j_mat.transpose();
    // Diffusion linearization with its rank-one mean-field part.
    let mut k_core = qm.diffusion_matrix.clone();
    let rank_one = DMat::outer(&qm.diffusion_mean_dir, &qm.psi);
    k_core.add_scaled(qm.diffusion_mean_gain, &rank_one);
    let k_t = k_core.transpose();
    let sw2 = frame.sw2;
    let mut hxx = qm.running_state_quad.clone();
    for v in hxx.data.iter_mut() {
        *v = -*v;
    }
    let mut p_terminal = qm.terminal_state_quad.clone();
    for v in p_terminal.data.iter_mut() {
        *v = -*v;
    }
    let mut path = vec![DMat::zeros(n, n); steps + 1];
    path[steps] = p_terminal;
    let mut max_asym: f64 = 0.0;
    for k in (0..steps).rev() {
        let pn = &path[k + 1];
        let mut driver = j_t.matmul(pn);
        driver.add_scaled(1.0, &pn.matmul(j_mat));
        driver.add_scaled(sw2, &k_t.matmul(&pn.matmul(&k_core)));
        driver.add_scaled(1.0, &hxx);
        let mut inner = pn.clone();
        inner.add_scaled(dt, &driver);
        let mut pk = sandwich(&frame.sg, &inner);
        let scale = 1.0 + pk.frobenius_norm();
        max_asym = max_asym.max(pk.asymmetry() / scale);
        pk.symmetrize();
        path[k] = pk;
    }
    Ok(SecondAdjointPath {
        grid: frame.grid,
        kind: SecondAdjointKind::Deterministic(path),
        max_asymmetry: max_asym,
        symmetry_warning: max_asym > SYMMETRY_WARN_TOL,
    })
}

fn regression_curvature(
    frame: &AdjointFrame<'_>,
    first: &FirstAdjointPath,
) -> Result<SecondAdjointPath> {
    let steps = frame.grid.steps();
    let n = frame.n_state();
    let nn = frame.n_noise();
    let n_particles = frame.n_particles();
    let dt = frame.grid.dt();
    let sym_pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|r| (r..n).map(move |c| (r, c)))
        .collect();
    let n_sym = sym_pairs.len();
    let n_out = n_sym * (1 + nn);
    let mut p: Vec<Vec<DMat>> = vec![Vec::new(); steps + 1];
    let mut q: Vec<Vec<Vec<DMat>>> = vec![Vec::new(); steps];
    p[steps] = frame.terminal_curvature();
    let mut max_asym: f64 = 0.0;
    for k in (0..steps).rev() {
        let states = frame.base.ensemble(k).particles();
        let fit = build_step_fit(states)?;
        let cbar = frame.diffusion_mean_kernel_average(k);
        let p_next = &p[k + 1];
        let targets = {
            let rows = exec::map_indexed(n_particles, |i| {
                let mut row = vec![0.0; n_out];
                let sps = sandwich(&frame.sg, &p_next[i]);
                for (s_idx, &(r, c)) in sym_pairs.iter().enumerate() {
                    row[s_idx] = sps.get(r, c);
                }
                let dw = frame.noise.increment(k, i);
                for j in 0..nn {
                    let scale = dw[j] / (frame.weights[j] * dt);
                    for s_idx in 0..n_sym {
                        row[n_sym * (1 + j) + s_idx] = row[s_idx] * scale;
                    }
                }
                row
            });
            let mut flat = vec![0.0; n_particles * n_out];
            for (i, row) in rows.iter().enumerate() {
                flat[i * n_out..(i + 1) * n_out].copy_from_slice(row);
            }
            flat
        };
        let fitted = fit.project(&targets, n_out);
        let from_sym = |vals: &[f64]| -> DMat {
            let mut m = DMat::zeros(n, n);
            for (s_idx, &(r, c)) in sym_pairs.iter().enumerate() {
                m.set(r, c, vals[s_idx]);
                m.set(c, r, vals[s_idx]);
            }
            m
        };
        let assembled = exec::map_indexed(n_particles, |i| {
            let row = &fitted[i * n_out..(i + 1) * n_out];
            let phat = from_sym(&row[..n_sym]);
            let qmats: Vec<DMat> = (0..nn)
                .map(|j| from_sym(&row[n_sym * (1 + j)..n_sym * (2 + j)]))
                .collect();
            let t = frame.grid.t(k);
            let m = frame.m_path[k];
            let x = &states[i];
            let u = frame.ubar.value(k, i);
            let j_mat = frame.model.drift_jac_x(t, x, m, u);
            let j_t = j_mat.transpose();
            let k_core = frame.diffusion_core_operator(k, i, &cbar);
            let k_t = k_core.transpose();
            let mut qsum = DMat::zeros(n, n);
            for (j, qm_j) in qmats.iter().enumerate() {
                qsum.add_scaled(frame.wprofile[j], qm_j);
            }
            let qs_w = StateVector::from_coords(frame.collapse_weighted(&first.martingale(k)[i]));
            let hxx = frame.hamiltonian_hessian(k, i, &first.costate(k)[i], &qs_w);
            let mut driver = j_t.matmul(&phat);
            driver.add_scaled(1.0, &phat.matmul(&j_mat));
            driver.add_scaled(frame.sw2, &k_t.matmul(&phat.matmul(&k_core)));
            driver.add_scaled(1.0, &k_t.matmul(&qsum));
            driver.add_scaled(1.0, &qsum.matmul(&k_core));
            driver.add_scaled(1.0, &hxx);
            let mut pk = phat.clone();
            pk.add_scaled(dt, &driver);
            let scale = 1.0 + pk.frobenius_norm();
            let asym = pk.asymmetry() / scale;
            pk.symmetrize();
            (pk, qmats, asym)
        });
        let mut p_row = Vec::with_capacity(n_particles);
        let mut q_row = Vec::with_capacity(n_particles);
        for (pk, qmats, asym) in assembled {
            if !linalg::all_finite(&pk.data) {
                return Err(Error::numerical(
                    "solve_second_adjoint",
                    format!("non-finite curvature matrix at step {k}"),
                ));
            }
            max_asym = max_asym.max(asym);
            p_row.push(pk);
            q_row.push(qmats);
        }
        p[k] = p_row;
        q[k] = q_row;
    }
    Ok(SecondAdjointPath {
        grid: frame.grid,
        kind: SecondAdjointKind::PerParticle { p, q },
        max_asymmetry: max_asym,
        symmetry_warning: max_asym > SYMMETRY_WARN_TOL,
    })
}

// ---------------------------------------------------------------------------
// Second duality identity
// ---------------------------------------------------------------------------

/// Per-case data for the bilinear identity: initial cloud plus per-(step,
/// particle) drift and diffusion source slots.
struct SecondTestSystem {
    xi: Vec<StateVector>,
    /// `u` slot per (step, particle).
    u_slot: Vec<Vec<Vec<f64>>>,
    /// `v` slot per (step, particle).
    v_slot: Vec<Vec<HsMatrix>>,
}

fn simulate_second_test(
    frame: &AdjointFrame<'_>,
    sys: &SecondTestSystem,
    cbars: &[Vec<f64>],
) -> Vec<Vec<StateVector>> {
    let steps = frame.grid.steps();
    let n_particles = frame.n_particles();
    let dt = frame.grid.dt();
    let mut phi: Vec<Vec<StateVector>> = Vec::with_capacity(steps + 1);
    phi.push(sys.xi.clone());
    for k in 0..steps {
        let prev = &phi[k];
        let t = frame.grid.t(k);
        let m = frame.m_path[k];
        let states = frame.base.ensemble(k).particles();
        let next = exec::map_indexed(n_particles, |i| {
            let u = frame.ubar.value(k, i);
            let x = &states[i];
            let mut acc = prev[i].coords.clone();
            let drift = frame.model.drift_jac_x(t, x, m, u).apply(&prev[i].coords);
            linalg::axpy(dt, &drift, &mut acc);
            linalg::axpy(dt, &sys.u_slot[k][i], &mut acc);
            let k_core = frame.diffusion_core_operator(k, i, &cbars[k]);
            let dw = frame.noise.increment(k, i);
            let sdw: f64 = (0..frame.n_noise()).map(|j| frame.profile[j] * dw[j]).sum();
            let kphi = k_core.apply(&prev[i].coords);
            linalg::axpy(sdw, &kphi, &mut acc);
            sys.v_slot[k][i].accumulate_increment(dw, &mut acc);
            for c in 0..acc.len() {
                acc[c] *= frame.sg[c];
            }
            StateVector::from_coords(acc)
        });
        phi.push(next);
    }
    phi
}

#[allow(clippy::too_many_arguments)]
fn pair_second_system(
    frame: &AdjointFrame<'_>,
    first: &FirstAdjointPath,
    second: &SecondAdjointPath,
    cbars: &[Vec<f64>],
    sys1: &SecondTestSystem,
    sys2: &SecondTestSystem,
    phi1: &[Vec<StateVector>],
    phi2: &[Vec<StateVector>],
) -> FirstPairing {
    let steps = frame.grid.steps();
    let n_particles = frame.n_particles();
    let dt = frame.grid.dt();
    let vals = exec::map_indexed(n_particles, |i| {
        second
            .matrix_at(steps, i)
            .quadratic_form(&phi2[steps][i].coords, &phi1[steps][i].coords)
    });
    let mut lhs = exec::ordered_sum(&vals) / n_particles as f64;
    let vals = exec::map_indexed(n_particles, |i| {
        second
            .matrix_at(0, i)
            .quadratic_form(&sys2.xi[i].coords, &sys1.xi[i].coords)
    });
    let mut rhs = exec::ordered_sum(&vals) / n_particles as f64;
    for k in 0..steps {
        // lhs −= Ê⟨F φ₁, φ₂⟩ dt with F = −ℍ_xx, so lhs += Ê⟨ℍ_xx φ₁, φ₂⟩ dt.
        let f_vals = exec::map_indexed(n_particles, |i| {
            let qs_w = StateVector::from_coords(frame.collapse_weighted(&first.martingale(k)[i]));
            let hxx = frame.hamiltonian_hessian(k, i, &first.costate(k)[i], &qs_w);
            hxx.quadratic_form(&phi2[k][i].coords, &phi1[k][i].coords)
        });
        lhs += dt * exec::ordered_sum(&f_vals) / n_particles as f64;
        let source_vals = exec::map_indexed(n_particles, |i| {
            let pk = second.matrix_at(k, i);
            let k_core = frame.diffusion_core_operator(k, i, &cbars[k]);
            let mut s = pk.quadratic_form(&phi2[k][i].coords, &sys1.u_slot[k][i]);
            s += pk.quadratic_form(&sys2.u_slot[k][i], &phi1[k][i].coords);
            // ⟨P K φ₁, v₂⟩_w  (K column j is s_j·K_core).
            let pk_phi1 = pk.apply(&k_core.apply(&phi1[k][i].coords));
            let v2w = frame.collapse_weighted(&sys2.v_slot[k][i]);
            s += linalg::dot(&pk_phi1, &v2w);
            // ⟨P v₁, K φ₂ + v₂⟩_w.
            let kphi2 = k_core.apply(&phi2[k][i].coords);
            for j in 0..frame.n_noise() {
                let wj = frame.weights[j];
                let v1col: Vec<f64> = (0..frame.n_state())
                    .map(|r| sys1.v_slot[k][i].get(r, j))
                    .collect();
                let pv1 = pk.apply(&v1col);
                for r in 0..frame.n_state() {
                    let rhs_col = frame.profile[j] * kphi2[r] + sys2.v_slot[k][i].get(r, j);
                    s += wj * pv1[r] * rhs_col;
                }
                // Martingale terms: ⟨Q_j v₁ e_j, φ₂⟩ + ⟨Q_j φ₁, v₂ e_j⟩.
                if let Some(qj) = second.martingale_at(k, i, j) {
                    let qv1 = qj.apply(&v1col);
                    s += wj * linalg::dot(&qv1, &phi2[k][i].coords);
                    let qphi1 = qj.apply(&phi1[k][i].coords);
                    for r in 0..frame.n_state() {
                        s += wj * qphi1[r] * sys2.v_slot[k][i].get(r, j);
                    }
                }
            }
            s
        });
        rhs += dt * exec::ordered_sum(&source_vals) / n_particles as f64;
    }
    FirstPairing { lhs, rhs }
}

fn draw_second_test(
    frame: &AdjointFrame<'_>,
    stream: &mut RngStream,
    deterministic_initial_only: bool,
) -> SecondTestSystem {
    let steps = frame.grid.steps();
    let n = frame.n_state();
    let nn = frame.n_noise();
    let n_particles = frame.n_particles();
    let center: Vec<f64> = (0..n).map(|_| 0.5 * stream.standard_normal()).collect();
    let xi: Vec<StateVector> = (0..n_particles)
        .map(|_| {
            let coords = if deterministic_initial_only {
                center.clone()
            } else {
                center
                    .iter()
                    .map(|c| c + 0.25 * stream.standard_normal())
                    .collect()
            };
            StateVector::from_coords(coords)
        })
        .collect();
    let (u_slot, v_slot) = if deterministic_initial_only {
        (
            vec![vec![vec![0.0; n]; n_particles]; steps],
            vec![vec![frame.space.zero_hs(); n_particles]; steps],
        )
    } else {
        let mut u_slot = Vec::with_capacity(steps);
        let mut v_slot = Vec::with_capacity(steps);
        for _ in 0..steps {
            let u_k: Vec<f64> = (0..n).map(|_| 0.4 * stream.standard_normal()).collect();
            let mut v_k = frame.space.zero_hs();
            for r in 0..n {
                for j in 0..nn {
                    v_k.set(r, j, 0.3 * stream.standard_normal());
                }
            }
            u_slot.push(vec![u_k; n_particles]);
            v_slot.push(vec![v_k; n_particles]);
        }
        (u_slot, v_slot)
    };
    SecondTestSystem { xi, u_slot, v_slot }
}

/// Verify the bilinear duality identity of the second-order flow.
///
/// Cases: a frozen-initial pairing (`u = v = 0`, deterministic initial state —
/// the identity collapses to terminal versus initial quadratic forms when the
/// forcing vanishes), one symmetric pairing (`φ₁ = φ₂`), `test_pairs` random
/// pairings, and — when a spiked control is supplied — the spike-variation
/// instance with `φ₁ = φ₂ = y^ε`.
#[allow(clippy::too_many_arguments)]
pub fn verify_transposition_second(
    space: &GalerkinSpace,
    model: &CoefficientModel,
    base: &StatePath,
    ubar: &ControlPath,
    noise: &NoiseRecord,
    first: &FirstAdjointPath,
    second: &SecondAdjointPath,
    test_pairs: usize,
    spiked: Option<&ControlPath>,
    stream: &mut RngStream,
) -> Result<TranspositionReport> {
    let frame =
        AdjointFrame::build("verify_transposition_second", space, model, base, ubar, noise)?;
    let steps = frame.grid.steps();
    if second.grid().steps() != steps || first.grid().steps() != steps {
        return Err(Error::domain(
            "verify_transposition_second",
            "flow geometry does not match the base path",
        ));
    }
    let cbars: Vec<Vec<f64>> = (0..steps)
        .map(|k| frame.diffusion_mean_kernel_average(k))
        .collect();
    let mut cases = Vec::new();
    // Frozen-initial case: no sources, deterministic initial state.
    {
        let sys = draw_second_test(&frame, stream, true);
        let phi = simulate_second_test(&frame, &sys, &cbars);
        let pairing = pair_second_system(&frame, first, second, &cbars, &sys, &sys, &phi, &phi);
        cases.push(make_case("frozen-initial", pairing.lhs, pairing.rhs));
    }
    // Symmetric case: φ₁ = φ₂ with full sources.
    {
        let sys = draw_second_test(&frame, stream, false);
        let phi = simulate_second_test(&frame, &sys, &cbars);
        let pairing = pair_second_system(&frame, first, second, &cbars, &sys, &sys, &phi, &phi);
        cases.push(make_case("symmetric-pair", pairing.lhs, pairing.rhs));
    }
    for case_idx in 0..test_pairs {
        let sys1 = draw_second_test(&frame, stream, false);
        let sys2 = draw_second_test(&frame, stream, false);
        let phi1 = simulate_second_test(&frame, &sys1, &cbars);
        let phi2 = simulate_second_test(&frame, &sys2, &cbars);
        let pairing =
            pair_second_system(&frame, first, second, &cbars, &sys1, &sys2, &phi1, &phi2);
        cases.push(make_case(
            format!("random-pair-{case_idx}"),
            pairing.lhs,
            pairing.rhs,
        ));
    }
    if let Some(spiked_control) = spiked {
        let var = solve_first_variation(space, model, &frame.grid, base, ubar, spiked_control, noise)?;
        let n = frame.n_state();
        let nn = frame.n_noise();
        let n_particles = frame.n_particles();
        let m_y: Vec<f64> = (0..=steps)
            .map(|k| linalg::dot(&model.psi().coords, &var.first_mean(k).coords))
            .collect();
        let mut u_slot = Vec::with_capacity(steps);
        let mut v_slot = Vec::with_capacity(steps);
        for k in 0..steps {
            let t = frame.grid.t(k);
            let m = frame.m_path[k];
            let states = frame.base.ensemble(k).particles();
            let psi = &model.psi().coords;
            let rows = exec::map_indexed(n_particles, |i| {
                let x = &states[i];
                let u0 = frame.ubar.value(k, i);
                let mut u_vec = vec![0.0; n];
                let am = model.drift_dm(t, x, m, u0);
                linalg::axpy(m_y[k], &am.coords, &mut u_vec);
                let u1 = spiked_control.value(k, i);
                if u1 != u0 {
                    let da = model
                        .drift_at(t, x, m, u1)
                        .minus(&model.drift_at(t, x, m, u0));
                    linalg::axpy(1.0, &da.coords, &mut u_vec);
                }
                // v soaks up whatever the rank-one operator K missed:
                // (∂_m c·m_y − c̄bar·⟨ψ, y⟩)·sᵀ plus the spike difference.
                let cm = model.diffusion_core_dm(t, x, m, u0);
                let psi_y = linalg::dot(psi, &var.first(k)[i].coords);
                let mut core = vec![0.0; n];
                linalg::axpy(m_y[k], &cm.coords, &mut core);
                linalg::axpy(-psi_y, &cbars[k], &mut core);
                let mut v_mat = frame.space.zero_hs();
                for j in 0..nn {
                    for r in 0..n {
                        v_mat.set(r, j, core[r] * frame.profile[j]);
                    }
                }
                if u1 != u0 {
                    let b1 = model.diffusion_at(t, x, m, u1);
                    let b0 = model.diffusion_at(t, x, m, u0);
                    for j in 0..nn {
                        for r in 0..n {
                            v_mat.set(r, j, v_mat.get(r, j) + b1.get(r, j) - b0.get(r, j));
                        }
                    }
                }
                (u_vec, v_mat)
            });
            let mut u_k = Vec::with_capacity(n_particles);
            let mut v_k = Vec::with_capacity(n_particles);
            for (u_vec, v_mat) in rows {
                u_k.push(u_vec);
                v_k.push(v_mat);
            }
            u_slot.push(u_k);
            v_slot.push(v_k);
        }
        let sys = SecondTestSystem {
            xi: var.first(0).to_vec(),
            u_slot,
            v_slot,
        };
        let mut phi: Vec<Vec<StateVector>> = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            phi.push(var.first(k).to_vec());
        }
        let pairing = pair_second_system(&frame, first, second, &cbars, &sys, &sys, &phi, &phi);
        cases.push(make_case("spike-variation", pairing.lhs, pairing.rhs));
    }
    Ok(TranspositionReport::from_cases(cases))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{ControlSet, FamilySpec, LinearQuadraticParams};
    use crate::config::{preset_lq_2d, preset_saturated_2d};
    use crate::forward::{
        deterministic_initial, make_spike_control, sample_gaussian_initial, simulate, ControlPath,
        NoiseRecord, TimeGrid,
    };
    use crate::rng::{SeedSplitter, StreamDomain};
    use proptest::prelude::*;

    fn box_set() -> ControlSet {
        ControlSet::Box { lo: -2.0, hi: 2.0 }
    }

    fn zero_lq(n: usize, nn: usize) -> LinearQuadraticParams {
        LinearQuadraticParams {
            psi: {
                let mut v = vec![0.0; n];
                v[0] = 1.0;
                v
            },
            drift_matrix: vec![vec![0.0; n]; n],
            drift_mean_gain: 0.0,
            drift_mean_dir: vec![0.0; n],
            drift_control_gain: 0.0,
            drift_control_dir: vec![0.0; n],
            diffusion_const: vec![vec![0.0; nn]; n],
            diffusion_matrix: vec![vec![0.0; n]; n],
            diffusion_mean_gain: 0.0,
            diffusion_mean_dir: vec![0.0; n],
            diffusion_control_gain: 0.0,
            diffusion_control_dir: vec![0.0; n],
            noise_profile: vec![1.0; nn],
            running_state_quad: vec![vec![0.0; n]; n],
            running_mean_quad: 0.0,
            running_control_quad: 0.0,
            terminal_state_quad: vec![vec![0.0; n]; n],
            terminal_mean_quad: 0.0,
            terminal_linear: vec![],
        }
    }

    struct Setup {
        space: GalerkinSpace,
        model: CoefficientModel,
        grid: TimeGrid,
        base: StatePath,
        ubar: ControlPath,
        noise: NoiseRecord,
    }

    fn setup_model(
        eigenvalues: Vec<f64>,
        params: LinearQuadraticParams,
        n_particles: usize,
        steps: usize,
        seed: u64,
        base_u: f64,
    ) -> Setup {
        let nn = params.noise_profile.len();
        let space = GalerkinSpace::new(eigenvalues, vec![1.0; nn]).unwrap();
        let model = CoefficientModel::new(&space, FamilySpec::LinearQuadratic(params), box_set())
            .unwrap();
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let splitter = SeedSplitter::new(seed);
        let mut init_stream = splitter.stream(StreamDomain::InitialState, 0, 0);
        let initial = sample_gaussian_initial(
            &space,
            n_particles,
            &vec![0.4; space.n_state()],
            0.3,
            &mut init_stream,
        )
        .unwrap();
        let noise = NoiseRecord::sample(
            &space,
            &grid,
            n_particles,
            &mut splitter.stream(StreamDomain::PathNoise, 0, 0),
        )
        .unwrap();
        let ubar = ControlPath::constant(&grid, n_particles, base_u).unwrap();
        let base = simulate(&space, &model, &grid, &ubar, &initial, &noise).unwrap();
        Setup {
            space,
            model,
            grid,
            base,
            ubar,
            noise,
        }
    }

    fn preset_setup(cfg: crate::config::ExperimentConfig, n: usize, steps: usize, seed: u64) -> Setup {
        let space = cfg.build_space().unwrap();
        let model = cfg.build_model(&space, std::path::Path::new(".")).unwrap();
        let grid = TimeGrid::new(cfg.grid.horizon, steps).unwrap();
        let splitter = SeedSplitter::new(seed);
        let mut init_stream = splitter.stream(StreamDomain::InitialState, 0, 0);
        let initial = match &cfg.initial {
            crate::config::InitialCondition::Gaussian { mean, std } => {
                sample_gaussian_initial(&space, n, mean, *std, &mut init_stream).unwrap()
            }
            crate::config::InitialCondition::Deterministic { point } => {
                deterministic_initial(&space, n, point).unwrap()
            }
        };
        let noise = NoiseRecord::sample(
            &space,
            &grid,
            n,
            &mut splitter.stream(StreamDomain::PathNoise, 0, 0),
        )
        .unwrap();
        let ubar = ControlPath::constant(&grid, n, cfg.control.base).unwrap();
        let base = simulate(&space, &model, &grid, &ubar, &initial, &noise).unwrap();
        Setup {
            space,
            model,
            grid,
            base,
            ubar,
            noise,
        }
    }

    #[test]
    fn zero_cost_gives_identically_zero_costates() {
        let mut params = zero_lq(2, 2);
        params.drift_matrix = vec![vec![-0.4, 0.2], vec![0.1, -0.3]];
        params.diffusion_const = vec![vec![0.2, 0.0], vec![0.0, 0.15]];
        params.diffusion_matrix = vec![vec![0.25, 0.0], vec![0.1, 0.2]];
        let s = setup_model(vec![-0.5, -1.0], params, 128, 12, 7, 0.2);
        let adj = solve_first_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            FirstAdjointMethod::PicardRegression,
        )
        .unwrap();
        for k in 0..=12 {
            for p in adj.costate(k) {
                for c in &p.coords {
                    assert_eq!(*c, 0.0);
                }
            }
        }
        for k in 0..12 {
            for q in adj.martingale(k) {
                for e in q.entries() {
                    assert_eq!(*e, 0.0);
                }
            }
        }
        assert!(adj.diagnostics().converged);
        assert!(adj.diagnostics().iterations <= 2);
    }

    #[test]
    fn pure_semigroup_flows_the_terminal_slope() {
        // No dynamics at all; h = ⟨c, x⟩ makes the costate the semigroup
        // adjoint of a constant slope: p_k = −e^{λ(T−t_k)} ∘ c.
        let mut params = zero_lq(2, 1);
        params.terminal_linear = vec![0.7, -0.4];
        let s = setup_model(vec![-0.5, -1.5], params, 600, 16, 11, 0.0);
        let eigen = [-0.5, -1.5];
        let check = |adj: &FirstAdjointPath, tol: f64| {
            for k in 0..=16 {
                let lag = 1.0 - s.grid.t(k);
                let expect = [
                    -(eigen[0] * lag).exp() * 0.7,
                    -(eigen[1] * lag).exp() * (-0.4),
                ];
                for p in adj.costate(k) {
                    for c in 0..2 {
                        assert!(
                            (p.coords[c] - expect[c]).abs() <= tol * (1.0 + expect[c].abs()),
                            "step {k} coord {c}: {} vs {}",
                            p.coords[c],
                            expect[c]
                        );
                    }
                }
            }
        };
        let picard = solve_first_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            FirstAdjointMethod::PicardRegression,
        )
        .unwrap();
        // The regression path carries a deterministic ridge bias of order
        // ridge/λ_min(Gram) per step (~1e-6 over this grid); the closed form
        // is quadrature-exact here.
        check(&picard, 5e-6);
        let closed = solve_first_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            FirstAdjointMethod::LqClosedForm,
        )
        .unwrap();
        check(&closed, 1e-9);
        assert!(picard.costate_rel_rmse(&closed) < 1e-5);
    }

    #[test]
    fn terminal_condition_is_exact_per_particle() {
        let cfg = preset_saturated_2d();
        let s = preset_setup(cfg, 300, 10, 3);
        let adj = solve_first_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            FirstAdjointMethod::PicardRegression,
        )
        .unwrap();
        let m = s
            .model
            .mean_statistic(s.base.ensemble(10))
            .unwrap();
        let cloud = s.base.ensemble(10).particles();
        let dm_vals: Vec<f64> = cloud
            .iter()
            .map(|x| s.model.terminal_dm(x, m))
            .collect();
        let mfh = exec::ordered_sum(&dm_vals) / cloud.len() as f64;
        for (i, x) in cloud.iter().enumerate() {
            let mut expect = s.model.terminal_grad_x(x, m).coords;
            linalg::axpy(mfh, &s.model.psi().coords, &mut expect);
            linalg::scale(-1.0, &mut expect);
            for c in 0..2 {
                assert_eq!(adj.terminal()[i].coords[c], expect[c]);
            }
        }
    }

    #[test]
    fn lq_costates_match_the_affine_closed_form() {
        let cfg = preset_lq_2d();
        let s = preset_setup(cfg, 10_000, 32, 21);
        let picard = solve_first_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            FirstAdjointMethod::PicardRegression,
        )
        .unwrap();
        assert!(picard.diagnostics().converged);
        let closed = solve_first_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            FirstAdjointMethod::LqClosedForm,
        )
        .unwrap();
        let p_rmse = picard.costate_rel_rmse(&closed);
        assert!(p_rmse < 0.05, "costate relative RMSE {p_rmse}");
        // The martingale component is regression-noise limited; a loose bound
        // still catches sign or weighting mistakes (which produce O(1)).
        let q_rmse = picard.martingale_rel_rmse(&closed, s.space.hs_weights());
        assert!(q_rmse < 0.5, "martingale relative RMSE {q_rmse}");
    }

    #[test]
    fn picard_contraction_weakens_with_the_horizon() {
        let cfg = preset_saturated_2d();
        let s = preset_setup(cfg, 1500, 48, 5);
        let probe = picard_contraction_probe(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            &[0.875, 0.75, 0.5, 0.0],
        )
        .unwrap();
        assert_eq!(probe.splits.len(), 4);
        assert!(probe.splits.iter().all(|sp| !sp.diverged));
        assert!(
            probe.smallest_split_factor() < 0.5,
            "smallest split factor {}",
            probe.smallest_split_factor()
        );
        assert!(
            probe.factors_nondecreasing_in_span(1.1),
            "factors {:?}",
            probe
                .splits
                .iter()
                .map(|sp| (sp.span, sp.factor))
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_driver_sensitivities_contract_in_one_pass() {
        // State- and measure-independent coefficients: the driver has no
        // dependence on the unknown, so the second sweep reproduces the first
        // bitwise and every measured factor is exactly zero.
        let mut params = zero_lq(1, 1);
        params.diffusion_const = vec![vec![0.3]];
        params.terminal_state_quad = vec![vec![1.0]];
        let s = setup_model(vec![-0.5], params, 400, 16, 13, 0.0);
        let probe = picard_contraction_probe(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            &[0.5, 0.0],
        )
        .unwrap();
        for sp in &probe.splits {
            assert_eq!(sp.factor, 0.0);
            assert!(!sp.diverged);
        }
    }

    #[test]
    fn transposition_identity_holds_for_random_sources() {
        let cfg = preset_lq_2d();
        let s = preset_setup(cfg, 4000, 32, 17);
        let adj = solve_first_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            FirstAdjointMethod::PicardRegression,
        )
        .unwrap();
        let spiked = make_spike_control(&s.grid, &s.ubar, 0.8, 0.25, 0.25).unwrap();
        let splitter = SeedSplitter::new(99);
        let mut stream = splitter.stream(StreamDomain::TestData, 0, 0);
        let report = verify_transposition_first(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            &adj,
            3,
            Some(&spiked),
            &mut stream,
        )
        .unwrap();
        assert_eq!(report.cases.len(), 4);
        assert!(report.case("spike-variation").is_some());
        assert!(
            report.max_relative < 0.08,
            "residuals {:?}",
            report
                .cases
                .iter()
                .map(|c| (c.label.clone(), c.relative))
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn duality_residual_shrinks_under_grid_refinement() {
        // Deterministic scalar test: closed-form costate, analytic source.
        // The only residual is the left-endpoint quadrature error, which is
        // first order in the step size.
        let mut params = zero_lq(1, 1);
        params.drift_matrix = vec![vec![-0.3]];
        params.running_state_quad = vec![vec![0.8]];
        params.terminal_state_quad = vec![vec![1.2]];
        let mut residuals = Vec::new();
        let mut dts = Vec::new();
        for steps in [8usize, 16, 32, 64] {
            let space = GalerkinSpace::new(vec![-0.5], vec![1.0]).unwrap();
            let model = CoefficientModel::new(
                &space,
                FamilySpec::LinearQuadratic(params.clone()),
                box_set(),
            )
            .unwrap();
            let grid = TimeGrid::new(1.0, steps).unwrap();
            let initial = deterministic_initial(&space, 4, &[0.9]).unwrap();
            let splitter = SeedSplitter::new(1);
            let noise = NoiseRecord::sample(
                &space,
                &grid,
                4,
                &mut splitter.stream(StreamDomain::PathNoise, 0, 0),
            )
            .unwrap();
            let ubar = ControlPath::constant(&grid, 4, 0.0).unwrap();
            let base = simulate(&space, &model, &grid, &ubar, &initial, &noise).unwrap();
            let adj = solve_first_adjoint(
                &space,
                &model,
                &base,
                &ubar,
                &noise,
                FirstAdjointMethod::LqClosedForm,
            )
            .unwrap();
            let frame =
                AdjointFrame::build("test", &space, &model, &base, &ubar, &noise).unwrap();
            let (mfa, mfb) = mean_field_scalars(&frame, 0, &adj.p, &adj.q);
            // Analytic drift source sampled at the step times; diffusion-free
            // so the path and the pairing stay deterministic.
            let alpha = |t: f64| vec![0.3 + 0.7 * (2.1 * t).sin()];
            let mut x_path = vec![vec![StateVector::from_coords(vec![0.5]); 4]];
            for k in 0..steps {
                let prev = &x_path[k];
                let a = alpha(grid.t(k));
                let next: Vec<StateVector> = prev
                    .iter()
                    .map(|x| {
                        let mut acc = x.coords.clone();
                        linalg::axpy(grid.dt(), &a, &mut acc);
                        acc[0] *= frame.sg[0];
                        StateVector::from_coords(acc)
                    })
                    .collect();
                x_path.push(next);
            }
            let pairing = pair_first_system(
                &frame,
                &adj,
                &mfa,
                &mfb,
                &x_path,
                |k, _i| alpha(grid.t(k)),
                |_k, _i| space.zero_hs(),
            );
            residuals.push((pairing.lhs - pairing.rhs).abs());
            dts.push(grid.dt());
        }
        let fit = crate::stats::log_log_slope(&dts, &residuals).unwrap();
        assert!(
            fit.slope >= 0.9,
            "order {} from residuals {residuals:?}",
            fit.slope
        );
    }

    #[test]
    fn zero_source_and_terminal_give_exact_zero() {
        let mut params = zero_lq(1, 1);
        params.drift_matrix = vec![vec![-0.2]];
        params.diffusion_const = vec![vec![0.25]];
        let s = setup_model(vec![-0.5], params, 200, 10, 23, 0.1);
        let adj = solve_first_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            FirstAdjointMethod::PicardRegression,
        )
        .unwrap();
        let splitter = SeedSplitter::new(5);
        let mut stream = splitter.stream(StreamDomain::TestData, 0, 0);
        let report = verify_transposition_first(
            &s.space, &s.model, &s.base, &s.ubar, &s.noise, &adj, 2, None, &mut stream,
        )
        .unwrap();
        for case in &report.cases {
            assert_eq!(case.lhs, 0.0);
            assert_eq!(case.rhs, 0.0);
            assert_eq!(case.relative, 0.0);
        }
    }

    #[test]
    fn constant_negative_curvature_without_dynamics() {
        // Flat modes (λ = 0), no coefficients, quadratic terminal cost: the
        // backward matrix flow is constant at −h_xx, bitwise.
        let mut params = zero_lq(1, 1);
        params.terminal_state_quad = vec![vec![1.4]];
        let s = setup_model(vec![0.0], params, 64, 12, 31, 0.0);
        let first = solve_first_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            FirstAdjointMethod::PicardRegression,
        )
        .unwrap();
        let second = solve_second_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            &first,
            SecondAdjointMethod::DeterministicLyapunov,
        )
        .unwrap();
        assert!(second.is_deterministic());
        for k in 0..=12 {
            assert_eq!(second.matrix_at(k, 0).get(0, 0), -1.4);
        }
        assert!(!second.symmetry_warning);
    }

    #[test]
    fn scalar_curvature_matches_the_backward_ode() {
        let mut params = zero_lq(1, 1);
        params.drift_matrix = vec![vec![-0.35]];
        params.diffusion_matrix = vec![vec![0.4]];
        params.running_state_quad = vec![vec![0.9]];
        params.terminal_state_quad = vec![vec![1.1]];
        let lam = -0.5;
        let reference = |steps_fine: usize| -> Vec<f64> {
            // Fine RK4 on Ṗ = −[2(λ+a)P + s²c²P − M], P(T) = −G.
            let h = -1.0 / steps_fine as f64;
            let rate = |p: f64| -(2.0 * (lam + (-0.35)) * p + 0.4 * 0.4 * p - 0.9);
            let mut p = -1.1;
            let mut vals = vec![0.0; steps_fine + 1];
            vals[steps_fine] = p;
            for k in (0..steps_fine).rev() {
                let k1 = rate(p);
                let k2 = rate(p + 0.5 * h * k1);
                let k3 = rate(p + 0.5 * h * k2);
                let k4 = rate(p + h * k3);
                p += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                vals[k] = p;
            }
            vals
        };
        let reference_vals = reference(4096);
        let mut errs = Vec::new();
        for steps in [24usize, 48] {
            let s = setup_model(vec![lam], params.clone(), 64, steps, 3, 0.0);
            let first = solve_first_adjoint(
                &s.space,
                &s.model,
                &s.base,
                &s.ubar,
                &s.noise,
                FirstAdjointMethod::LqClosedForm,
            )
            .unwrap();
            let second = solve_second_adjoint(
                &s.space,
                &s.model,
                &s.base,
                &s.ubar,
                &s.noise,
                &first,
                SecondAdjointMethod::DeterministicLyapunov,
            )
            .unwrap();
            let mut worst: f64 = 0.0;
            for k in 0..=steps {
                let t_idx = k * 4096 / steps;
                worst = worst.max((second.matrix_at(k, 0).get(0, 0) - reference_vals[t_idx]).abs());
            }
            errs.push(worst);
        }
        assert!(errs[0] < 0.08, "coarse error {}", errs[0]);
        assert!(
            errs[1] < 0.66 * errs[0],
            "halving the step did not shrink the error: {errs:?}"
        );
    }

    #[test]
    fn negated_curvature_is_positive_semidefinite_for_convex_costs() {
        let cfg = preset_lq_2d();
        let s = preset_setup(cfg, 400, 24, 9);
        let first = solve_first_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            FirstAdjointMethod::LqClosedForm,
        )
        .unwrap();
        let second = solve_second_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            &first,
            SecondAdjointMethod::DeterministicLyapunov,
        )
        .unwrap();
        assert!(
            second.min_negated_eigenvalue() >= -1e-10,
            "min eigenvalue {}",
            second.min_negated_eigenvalue()
        );
    }

    #[test]
    fn regression_curvature_agrees_with_the_deterministic_flow() {
        let cfg = preset_lq_2d();
        let s = preset_setup(cfg, 2500, 16, 27);
        let first = solve_first_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            FirstAdjointMethod::LqClosedForm,
        )
        .unwrap();
        let det = solve_second_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            &first,
            SecondAdjointMethod::DeterministicLyapunov,
        )
        .unwrap();
        let reg = solve_second_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            &first,
            SecondAdjointMethod::Regression,
        )
        .unwrap();
        assert!(reg.max_asymmetry < 1e-8, "asymmetry {}", reg.max_asymmetry);
        for k in 0..=16 {
            let a = reg.mean_matrix(k);
            let b = det.mean_matrix(k);
            let mut diff = a.clone();
            diff.add_scaled(-1.0, &b);
            let rel = diff.frobenius_norm() / (1.0 + b.frobenius_norm());
            assert!(rel < 0.05, "step {k} relative gap {rel}");
        }
        // Terminal matrices are the curvature formula bitwise.
        for i in 0..s.base.n_particles() {
            let m = s.model.mean_statistic(s.base.ensemble(16)).unwrap();
            let expect = s
                .model
                .terminal_hess_x(&s.base.ensemble(16).particles()[i], m);
            for (a, b) in reg.matrix_at(16, i).data.iter().zip(&expect.data) {
                assert_eq!(*a, -*b);
            }
        }
    }

    #[test]
    fn bilinear_identity_collapses_without_forcing() {
        // No running cost curvature and no terminal curvature: P ≡ 0 and
        // every pairing in the identity is exactly zero.
        let mut params = zero_lq(2, 2);
        params.drift_matrix = vec![vec![-0.3, 0.1], vec![0.0, -0.2]];
        params.diffusion_const = vec![vec![0.2, 0.0], vec![0.0, 0.2]];
        params.diffusion_matrix = vec![vec![0.2, 0.0], vec![0.05, 0.15]];
        let s = setup_model(vec![-0.5, -1.0], params, 150, 8, 41, 0.1);
        let first = solve_first_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            FirstAdjointMethod::PicardRegression,
        )
        .unwrap();
        let second = solve_second_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            &first,
            SecondAdjointMethod::DeterministicLyapunov,
        )
        .unwrap();
        let splitter = SeedSplitter::new(7);
        let mut stream = splitter.stream(StreamDomain::TestData, 0, 0);
        let report = verify_transposition_second(
            &s.space, &s.model, &s.base, &s.ubar, &s.noise, &first, &second, 2, None, &mut stream,
        )
        .unwrap();
        for case in &report.cases {
            assert_eq!(case.lhs, 0.0);
            assert_eq!(case.rhs, 0.0);
        }
    }

    #[test]
    fn deterministic_pairing_returns_the_initial_quadratic_form() {
        // Zero coefficients, running curvature off: the frozen-initial case
        // telescopes exactly through the semigroup.
        let mut params = zero_lq(2, 1);
        params.terminal_state_quad = vec![vec![1.0, 0.2], vec![0.2, 0.8]];
        let s = setup_model(vec![-0.4, -0.9], params, 64, 64, 19, 0.0);
        let first = solve_first_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            FirstAdjointMethod::PicardRegression,
        )
        .unwrap();
        let second = solve_second_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            &first,
            SecondAdjointMethod::DeterministicLyapunov,
        )
        .unwrap();
        let splitter = SeedSplitter::new(3);
        let mut stream = splitter.stream(StreamDomain::TestData, 0, 0);
        let report = verify_transposition_second(
            &s.space, &s.model, &s.base, &s.ubar, &s.noise, &first, &second, 0, None, &mut stream,
        )
        .unwrap();
        let frozen = report.case("frozen-initial").unwrap();
        assert!(
            frozen.residual < 1e-9,
            "frozen-initial residual {}",
            frozen.residual
        );
    }

    #[test]
    fn bilinear_identity_holds_on_the_affine_benchmark() {
        let cfg = preset_lq_2d();
        let s = preset_setup(cfg, 4000, 32, 29);
        let first = solve_first_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            FirstAdjointMethod::LqClosedForm,
        )
        .unwrap();
        let second = solve_second_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            &first,
            SecondAdjointMethod::DeterministicLyapunov,
        )
        .unwrap();
        let spiked = make_spike_control(&s.grid, &s.ubar, 0.9, 0.25, 0.25).unwrap();
        let splitter = SeedSplitter::new(55);
        let mut stream = splitter.stream(StreamDomain::TestData, 0, 0);
        let report = verify_transposition_second(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            &first,
            &second,
            2,
            Some(&spiked),
            &mut stream,
        )
        .unwrap();
        assert!(report.case("symmetric-pair").is_some());
        assert!(report.case("spike-variation").is_some());
        // Residuals here are dominated by the left-endpoint quadrature of
        // the source pairings, O(Δt) with a case-dependent constant; at
        // Δt = 1/32 the worst random pairing sits near 9%.
        assert!(
            report.max_relative < 0.12,
            "residuals {:?}",
            report
                .cases
                .iter()
                .map(|c| (c.label.clone(), c.relative))
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn saturated_family_duality_with_regression_curvature() {
        let cfg = preset_saturated_2d();
        let s = preset_setup(cfg, 2000, 24, 47);
        let first = solve_first_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            FirstAdjointMethod::PicardRegression,
        )
        .unwrap();
        let second = solve_second_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            &first,
            SecondAdjointMethod::Regression,
        )
        .unwrap();
        assert!(!second.is_deterministic());
        let spiked = make_spike_control(&s.grid, &s.ubar, 0.9, 0.25, 0.25).unwrap();
        let splitter = SeedSplitter::new(61);
        let mut stream = splitter.stream(StreamDomain::TestData, 0, 0);
        let report = verify_transposition_second(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            &first,
            &second,
            1,
            Some(&spiked),
            &mut stream,
        )
        .unwrap();
        assert!(
            report.max_relative < 0.15,
            "residuals {:?}",
            report
                .cases
                .iter()
                .map(|c| (c.label.clone(), c.relative))
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn reports_serialize_and_paths_export() {
        let mut params = zero_lq(1, 1);
        params.terminal_state_quad = vec![vec![1.0]];
        let s = setup_model(vec![-0.5], params, 32, 4, 2, 0.0);
        let adj = solve_first_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            FirstAdjointMethod::PicardRegression,
        )
        .unwrap();
        let csv = adj.costate_to_csv_string();
        assert!(csv.starts_with("step,time,particle,p_0\n"));
        assert_eq!(csv.lines().count(), 1 + 5 * 32);
        let qcsv = adj.martingale_to_csv_string();
        assert!(qcsv.starts_with("step,time,particle,q_00\n"));
        assert_eq!(qcsv.lines().count(), 1 + 4 * 32);
        let splitter = SeedSplitter::new(1);
        let mut stream = splitter.stream(StreamDomain::TestData, 0, 0);
        let report = verify_transposition_first(
            &s.space, &s.model, &s.base, &s.ubar, &s.noise, &adj, 1, None, &mut stream,
        )
        .unwrap();
        let json = report.summary_json().unwrap();
        assert!(json.contains("max_relative"));
        let first = solve_first_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            FirstAdjointMethod::LqClosedForm,
        )
        .unwrap();
        let second = solve_second_adjoint(
            &s.space,
            &s.model,
            &s.base,
            &s.ubar,
            &s.noise,
            &first,
            SecondAdjointMethod::DeterministicLyapunov,
        )
        .unwrap();
        let pcsv = second.to_csv_string();
        assert!(pcsv.starts_with("step,time,P_00\n"));
        assert_eq!(pcsv.lines().count(), 1 + 5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn prop_zero_cost_costates_vanish(
            a in -0.8f64..0.2,
            c in -0.4f64..0.4,
            b0 in 0.05f64..0.4,
        ) {
            let mut params = zero_lq(1, 1);
            params.drift_matrix = vec![vec![a]];
            params.diffusion_matrix = vec![vec![c]];
            params.diffusion_const = vec![vec![b0]];
            let s = setup_model(vec![-0.5], params, 48, 6, 17, 0.1);
            let adj = solve_first_adjoint(
                &s.space, &s.model, &s.base, &s.ubar, &s.noise,
                FirstAdjointMethod::PicardRegression,
            ).unwrap();
            for k in 0..=6 {
                for p in adj.costate(k) {
                    prop_assert_eq!(p.coords[0], 0.0);
                }
            }
        }

        #[test]
        fn prop_terminal_matches_formula(
            g in 0.1f64..2.0,
            hbar in -0.5f64..0.5,
        ) {
            let mut params = zero_lq(1, 1);
            params.terminal_state_quad = vec![vec![g]];
            params.terminal_mean_quad = hbar;
            params.diffusion_const = vec![vec![0.2]];
            let s = setup_model(vec![-0.5], params, 48, 6, 19, 0.0);
            let adj = solve_first_adjoint(
                &s.space, &s.model, &s.base, &s.ubar, &s.noise,
                FirstAdjointMethod::PicardRegression,
            ).unwrap();
            let m = s.model.mean_statistic(s.base.ensemble(6)).unwrap();
            let cloud = s.base.ensemble(6).particles();
            let dm: Vec<f64> = cloud.iter().map(|x| s.model.terminal_dm(x, m)).collect();
            let mfh = exec::ordered_sum(&dm) / cloud.len() as f64;
            for (i, x) in cloud.iter().enumerate() {
                let expect = -(g * x.coords[0] + mfh);
                prop_assert_eq!(adj.terminal()[i].coords[0], expect);
            }
        }
    }
}
