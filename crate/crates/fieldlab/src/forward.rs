//! Forward integration of the interacting-particle system.
//!
//! The continuous dynamics
//!
//! ```text
//! dX = A X dt + a(t, X, ℒ(X), u) dt + b(t, X, ℒ(X), u) dW
//! ```
//!
//! are discretized by the exponential (mild-form) Euler scheme on N coupled
//! particles:
//!
//! ```text
//! x⁽ⁱ⁾_{k+1} = S(Δt) [ x⁽ⁱ⁾_k + a(t_k, x⁽ⁱ⁾_k, μᴺ_k, u_k) Δt
//!                              + b(t_k, x⁽ⁱ⁾_k, μᴺ_k, u_k) ΔW⁽ⁱ⁾_k ],
//! ```
//!
//! where `μᴺ_k` is the empirical law of the ensemble at step k and `S(Δt)`
//! the exact semigroup factor, so the stiff linear part costs no stability
//! constraint. The population couples only through the interaction
//! statistic, recomputed once per step: the particle loop is
//! bulk-synchronous, and with noise pre-assigned per particle the result is
//! bit-identical for every worker count.
//!
//! Controls are piecewise constant on the grid and per-particle capable
//! (open-loop paths shared by all particles are the default; a feedback-rule
//! entry point is provided). Spike perturbations — the control variation the
//! expansion analysis is built on — replace the control on a contiguous
//! window `E_ε = [offset, offset + ε)` whose width is rounded up to a whole
//! number of steps and recorded, so `|E_ε|` is exactly the advertised
//! multiple of Δt in grid measure.
//!
//! Piecewise-constant controls on a fixed grid form a strict subset of the
//! adapted control processes the continuous theory quantifies over; the
//! sweeps here certify behavior within this subset and the grid refinement
//! studies are the evidence offered that the subset is rich enough.
//!
//! The recorded noise supports exact coarsening (summing increments over
//! step groups), which is what the common-random-number
//! refinement/strong-error studies rely on.

use serde::{Deserialize, Serialize};

use crate::coeffs::CoefficientModel;
use crate::ensemble::{CopyTag, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg;
use crate::rng::RngStream;
use crate::space::{GalerkinSpace, StateVector};

// ── Time grid ────────────────────────────────────────────────────────────

/// Uniform time grid on `[0, T]` with `M` steps of width `Δt = T / M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    dt: f64,
}

impl TimeGrid {
    /// Build a grid; the horizon must be positive and finite, `steps ≥ 1`.
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::domain("TimeGrid", format!("horizon {horizon} must be positive and finite")));
        }
        if steps == 0 {
            return Err(Error::domain("TimeGrid", "need at least one step"));
        }
        Ok(TimeGrid {
            horizon,
            steps,
            dt: horizon / steps as f64,
        })
    }

    /// Final time T.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of steps M.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Step width Δt.
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// The k-th grid time `t_k = k·Δt`, for `k ∈ 0..=M`.
    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// All grid times `t_0, …, t_M`.
    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.t(k)).collect()
    }

    /// A grid on the same horizon with `factor`× more steps.
    pub fn refined(&self, factor: usize) -> Result<TimeGrid> {
        if factor == 0 {
            return Err(Error::domain("TimeGrid::refined", "factor must be ≥ 1"));
        }
        TimeGrid::new(self.horizon, self.steps * factor)
    }
}

// ── Controls ─────────────────────────────────────────────────────────────

/// Record of a spike window after rounding to the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeWindow {
    /// First step index inside the window.
    pub first_step: usize,
    /// Number of consecutive steps replaced.
    pub n_steps: usize,
    /// The control value applied on the window.
    pub control: f64,
    /// Requested window width ε before rounding.
    pub eps_requested: f64,
    /// Effective width `n_steps · Δt` (the grid measure of the window).
    pub eps_effective: f64,
    /// Effective window start `first_step · Δt`.
    pub offset_effective: f64,
}

/// A piecewise-constant control on the grid: one value per (step, particle).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    values: Vec<Vec<f64>>,
    spike: Option<SpikeWindow>,
}

impl ControlPath {
    /// The constant open-loop control `u` for every step and particle.
    pub fn constant(grid: &TimeGrid, n_particles: usize, u: f64) -> Result<Self> {
        if n_particles == 0 {
            return Err(Error::domain("ControlPath", "need at least one particle"));
        }
        if !u.is_finite() {
            return Err(Error::domain("ControlPath", "non-finite control value"));
        }
        Ok(ControlPath {
            values: vec![vec![u; n_particles]; grid.steps()],
            spike: None,
        })
    }

    /// An open-loop control from one shared value per step.
    pub fn from_step_values(n_particles: usize, step_values: &[f64]) -> Result<Self> {
        if n_particles == 0 || step_values.is_empty() {
            return Err(Error::domain("ControlPath", "need particles and at least one step"));
        }
        if !linalg::all_finite(step_values) {
            return Err(Error::domain("ControlPath", "non-finite control value"));
        }
        Ok(ControlPath {
            values: step_values.iter().map(|&u| vec![u; n_particles]).collect(),
            spike: None,
        })
    }

    /// Number of steps covered.
    pub fn n_steps(&self) -> usize {
        self.values.len()
    }

    /// Number of particles covered.
    pub fn n_particles(&self) -> usize {
        self.values[0].len()
    }

    /// Control of particle `i` on step `k`.
    pub fn value(&self, k: usize, i: usize) -> f64 {
        self.values[k][i]
    }

    /// All particle controls on step `k`.
    pub fn step_values(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    /// Set every particle's control on step `k`.
    pub fn set_step_value(&mut self, k: usize, u: f64) {
        for v in self.values[k].iter_mut() {
            *v = u;
        }
    }

    /// The spike window, when this path was produced by
    /// [`make_spike_control`].
    pub fn spike(&self) -> Option<&SpikeWindow> {
        self.spike.as_ref()
    }
}

/// Replace `base` on the contiguous window starting at `offset` of width
/// `eps` by the constant perturbation `pert`.
///
/// `eps ∈ (0, T]` is rounded **up** to a whole number of steps and the
/// offset **down** to a step boundary; both effective values are recorded in
/// the returned path's [`SpikeWindow`]. The window must fit inside the
/// horizon after rounding.
pub fn make_spike_control(grid: &TimeGrid, base: &ControlPath, pert: f64, eps: f64, offset: f64) -> Result<ControlPath> {
    if base.n_steps() != grid.steps() {
        return Err(Error::DimensionMismatch {
            context: "make_spike_control",
            expected: grid.steps(),
            actual: base.n_steps(),
        });
    }
    if !(eps > 0.0 && eps <= grid.horizon() + 1e-12) {
        return Err(Error::domain(
            "make_spike_control",
            format!("spike width {eps} outside (0, {}]", grid.horizon()),
        ));
    }
    if !(offset >= 0.0 && offset.is_finite()) {
        return Err(Error::domain("make_spike_control", format!("bad offset {offset}")));
    }
    if !pert.is_finite() {
        return Err(Error::domain("make_spike_control", "non-finite spike control"));
    }
    let dt = grid.dt();
    // Round the width up to whole steps (with a sliver of tolerance so an
    // exact multiple is not pushed a step further by representation error),
    // the offset down to a step boundary.
    let n_steps = ((eps / dt) - 1e-9).ceil().max(1.0) as usize;
    let first_step = (offset / dt + 1e-9).floor() as usize;
    if first_step + n_steps > grid.steps() {
        return Err(Error::domain(
            "make_spike_control",
            format!(
                "spike window [{}, {}) does not fit in {} steps",
                first_step,
                first_step + n_steps,
                grid.steps()
            ),
        ));
    }
    let mut out = base.clone();
    for k in first_step..first_step + n_steps {
        out.set_step_value(k, pert);
    }
    out.spike = Some(SpikeWindow {
        first_step,
        n_steps,
        control: pert,
        eps_requested: eps,
        eps_effective: n_steps as f64 * dt,
        offset_effective: first_step as f64 * dt,
    });
    Ok(out)
}

// ── Noise ────────────────────────────────────────────────────────────────

/// Pre-drawn Brownian increments: `increments[k][i]` is particle i's noise
/// vector `ΔW⁽ⁱ⁾_k` (one entry per retained noise direction, variance
/// `wⱼ·Δt`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRecord {
    dt: f64,
    increments: Vec<Vec<Vec<f64>>>,
}

impl NoiseRecord {
    /// Draw a full record for `grid` from `stream`. Particle order and step
    /// order are fixed, so the record — and everything simulated from it —
    /// is independent of worker count.
    pub fn sample(space: &GalerkinSpace, grid: &TimeGrid, n_particles: usize, stream: &mut RngStream) -> Result<Self> {
        if n_particles == 0 {
            return Err(Error::domain("NoiseRecord", "need at least one particle"));
        }
        let mut increments = Vec::with_capacity(grid.steps());
        for _ in 0..grid.steps() {
            let mut per_particle = Vec::with_capacity(n_particles);
            for _ in 0..n_particles {
                per_particle.push(space.sample_noise_increment(grid.dt(), stream)?);
            }
            increments.push(per_particle);
        }
        Ok(NoiseRecord {
            dt: grid.dt(),
            increments,
        })
    }

    /// Number of steps recorded.
    pub fn n_steps(&self) -> usize {
        self.increments.len()
    }

    /// Number of particles recorded.
    pub fn n_particles(&self) -> usize {
        self.increments[0].len()
    }

    /// Increment of particle `i` on step `k`.
    pub fn increment(&self, k: usize, i: usize) -> &[f64] {
        &self.increments[k][i]
    }

    /// Sum groups of `factor` consecutive increments into a record for the
    /// grid with `factor`× fewer steps. Exact Brownian consistency: the sum
    /// of independent increments over a window is the window's increment.
    pub fn coarsen(&self, factor: usize) -> Result<NoiseRecord> {
        if factor == 0 || self.n_steps() % factor != 0 {
            return Err(Error::domain(
                "NoiseRecord::coarsen",
                format!("factor {factor} must divide the {} recorded steps", self.n_steps()),
            ));
        }
        let coarse_steps = self.n_steps() / factor;
        let n_particles = self.n_particles();
        let n_noise = self.increments[0][0].len();
        let mut increments = Vec::with_capacity(coarse_steps);
        for kc in 0..coarse_steps {
            let mut per_particle = vec![vec![0.0; n_noise]; n_particles];
            for sub in 0..factor {
                let fine = &self.increments[kc * factor + sub];
                for (acc, inc) in per_particle.iter_mut().zip(fine) {
                    for (a, v) in acc.iter_mut().zip(inc) {
                        *a += v;
                    }
                }
            }
            increments.push(per_particle);
        }
        Ok(NoiseRecord {
            dt: self.dt * factor as f64,
            increments,
        })
    }
}

// ── State paths ──────────────────────────────────────────────────────────

/// The simulated trajectory: one ensemble per grid time `t_0, …, t_M`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePath {
    grid: TimeGrid,
    ensembles: Vec<ParticleEnsemble>,
}

impl StatePath {
    /// The grid the path lives on.
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Ensemble at grid index `k ∈ 0..=M`.
    pub fn ensemble(&self, k: usize) -> &ParticleEnsemble {
        &self.ensembles[k]
    }

    /// Ensemble at the final time.
    pub fn terminal(&self) -> &ParticleEnsemble {
        &self.ensembles[self.grid.steps()]
    }

    /// Number of particles.
    pub fn n_particles(&self) -> usize {
        self.ensembles[0].len()
    }

    /// The interaction statistic `m_k = ⟨ψ, ·⟩`-mean at every grid time.
    pub fn mean_statistics(&self, psi: &StateVector) -> Result<Vec<f64>> {
        self.ensembles.iter().map(|e| e.empirical_mean_statistic(psi)).collect()
    }

    /// Squared-norm population average at every grid time.
    pub fn second_moments(&self) -> Vec<f64> {
        self.ensembles.iter().map(|e| e.second_moment()).collect()
    }

    /// Long-format CSV (`step,time,particle,coord_0,…`).
    pub fn to_csv_string(&self) -> String {
        let dim = self.ensembles[0].particles()[0].dim();
        let mut out = String::from("step,time,particle");
        for d in 0..dim {
            out.push_str(&format!(",coord_{d}"));
        }
        out.push('\n');
        for (k, ens) in self.ensembles.iter().enumerate() {
            let t = self.grid.t(k);
            for (i, p) in ens.particles().iter().enumerate() {
                out.push_str(&format!("{k},{t}"));
                out.push_str(&format!(",{i}"));
                for c in &p.coords {
                    out.push_str(&format!(",{c}"));
                }
                out.push('\n');
            }
        }
        out
    }
}

// ── Initial conditions ───────────────────────────────────────────────────

/// N i.i.d. Gaussian particles `ξ⁽ⁱ⁾ ~ mean + std · 𝒩(0, I)`.
pub fn sample_gaussian_initial(
    space: &GalerkinSpace,
    n_particles: usize,
    mean: &[f64],
    std: f64,
    stream: &mut RngStream,
) -> Result<ParticleEnsemble> {
    if mean.len() != space.n_state() {
        return Err(Error::DimensionMismatch {
            context: "sample_gaussian_initial",
            expected: space.n_state(),
            actual: mean.len(),
        });
    }
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::domain("sample_gaussian_initial", format!("bad standard deviation {std}")));
    }
    let particles: Vec<StateVector> = (0..n_particles)
        .map(|_| {
            StateVector::from_coords(mean.iter().map(|&mu| mu + std * stream.standard_normal()).collect())
        })
        .collect();
    ParticleEnsemble::new(space, particles, CopyTag::Base)
}

/// N copies of one deterministic starting point.
pub fn deterministic_initial(space: &GalerkinSpace, n_particles: usize, point: &[f64]) -> Result<ParticleEnsemble> {
    if point.len() != space.n_state() {
        return Err(Error::DimensionMismatch {
            context: "deterministic_initial",
            expected: space.n_state(),
            actual: point.len(),
        });
    }
    let particles = vec![StateVector::from_coords(point.to_vec()); n_particles];
    ParticleEnsemble::new(space, particles, CopyTag::Base)
}

// ── Simulation ───────────────────────────────────────────────────────────

fn check_sizes(grid: &TimeGrid, control: &ControlPath, initial: &ParticleEnsemble, noise: &NoiseRecord) -> Result<()> {
    if control.n_steps() != grid.steps() {
        return Err(Error::DimensionMismatch {
            context: "simulate.control_steps",
            expected: grid.steps(),
            actual: control.n_steps(),
        });
    }
    if noise.n_steps() != grid.steps() {
        return Err(Error::DimensionMismatch {
            context: "simulate.noise_steps",
            expected: grid.steps(),
            actual: noise.n_steps(),
        });
    }
    let n = initial.len();
    if control.n_particles() != n {
        return Err(Error::DimensionMismatch {
            context: "simulate.control_particles",
            expected: n,
            actual: control.n_particles(),
        });
    }
    if noise.n_particles() != n {
        return Err(Error::DimensionMismatch {
            context: "simulate.noise_particles",
            expected: n,
            actual: noise.n_particles(),
        });
    }
    Ok(())
}

/// Run the exponential-Euler particle scheme with the given open-loop
/// control and pre-drawn noise. Deterministic in (initial, control, noise):
/// no randomness is drawn inside.
pub fn simulate(
    space: &GalerkinSpace,
    model: &CoefficientModel,
    grid: &TimeGrid,
    control: &ControlPath,
    initial: &ParticleEnsemble,
    noise: &NoiseRecord,
) -> Result<StatePath> {
    simulate_impl(space, model, grid, initial, noise, |k, i, _x| control.value(k, i), Some(control))
}

/// Run the scheme with a feedback rule `u = rule(k, i, x⁽ⁱ⁾_k)` instead of a
/// stored control path. The rule must return admissible controls.
pub fn simulate_feedback(
    space: &GalerkinSpace,
    model: &CoefficientModel,
    grid: &TimeGrid,
    rule: impl Fn(usize, usize, &StateVector) -> f64 + Sync,
    initial: &ParticleEnsemble,
    noise: &NoiseRecord,
) -> Result<StatePath> {
    simulate_impl(space, model, grid, initial, noise, rule, None)
}

fn simulate_impl(
    space: &GalerkinSpace,
    model: &CoefficientModel,
    grid: &TimeGrid,
    initial: &ParticleEnsemble,
    noise: &NoiseRecord,
    control_of: impl Fn(usize, usize, &StateVector) -> f64 + Sync,
    control: Option<&ControlPath>,
) -> Result<StatePath> {
    if let Some(c) = control {
        check_sizes(grid, c, initial, noise)?;
    } else {
        if noise.n_steps() != grid.steps() {
            return Err(Error::DimensionMismatch {
                context: "simulate.noise_steps",
                expected: grid.steps(),
                actual: noise.n_steps(),
            });
        }
        if noise.n_particles() != initial.len() {
            return Err(Error::DimensionMismatch {
                context: "simulate.noise_particles",
                expected: initial.len(),
                actual: noise.n_particles(),
            });
        }
    }
    if model.n_state() != space.n_state() || model.n_noise() != space.n_noise() {
        return Err(Error::domain("simulate", "model and space dimensions disagree"));
    }
    let dt = grid.dt();
    let factors = space.semigroup_factors(dt)?;
    let n = initial.len();
    let mut ensembles = Vec::with_capacity(grid.steps() + 1);
    ensembles.push(initial.clone());
    for k in 0..grid.steps() {
        let t = grid.t(k);
        let current = &ensembles[k];
        // Bulk-synchronous coupling: the interaction statistic is computed
        // once, before the particle fan-out.
        let m = model.mean_statistic(current)?;
        let particles = current.particles();
        let next: Vec<StateVector> = exec::map_indexed(n, |i| {
            let x = &particles[i];
            let u = control_of(k, i, x);
            let mut acc = x.clone();
            let drift = model.drift_at(t, x, m, u);
            acc.add_scaled(dt, &drift);
            let diff = model.diffusion_at(t, x, m, u);
            diff.accumulate_increment(noise.increment(k, i), &mut acc.coords);
            for (c, f) in acc.coords.iter_mut().zip(&factors) {
                *c *= f;
            }
            acc
        });
        for (i, p) in next.iter().enumerate() {
            if !linalg::all_finite(&p.coords) {
                return Err(Error::numerical(
                    "simulate",
                    format!("non-finite state at step {} (t = {}), particle {}", k + 1, grid.t(k + 1), i),
                ));
            }
        }
        ensembles.push(ParticleEnsemble::from_particles(next, CopyTag::Base));
    }
    Ok(StatePath {
        grid: *grid,
        ensembles,
    })
}

/// Discrete cost of a simulated path under its control:
///
/// ```text
/// J = (1/N) Σᵢ [ Σ_k f(t_k, x⁽ⁱ⁾_k, μᴺ_k, u_k) Δt + h(x⁽ⁱ⁾_M, μᴺ_M) ]
/// ```
///
/// (left-endpoint quadrature in time, population average in place of the
/// expectation).
pub fn cost(model: &CoefficientModel, grid: &TimeGrid, path: &StatePath, control: &ControlPath) -> Result<f64> {
    if path.grid().steps() != grid.steps() || control.n_steps() != grid.steps() {
        return Err(Error::domain("cost", "grid, path, and control lengths disagree"));
    }
    let n = path.n_particles();
    if control.n_particles() != n {
        return Err(Error::DimensionMismatch {
            context: "cost.control_particles",
            expected: n,
            actual: control.n_particles(),
        });
    }
    let psi_means: Vec<f64> = path
        .ensembles
        .iter()
        .map(|e| model.mean_statistic(e))
        .collect::<Result<_>>()?;
    let dt = grid.dt();
    let per_particle: Vec<f64> = exec::map_indexed(n, |i| {
        let mut acc = 0.0;
        for k in 0..grid.steps() {
            let x = &path.ensembles[k].particles()[i];
            acc += model.running_cost_at(grid.t(k), x, psi_means[k], control.value(k, i)) * dt;
        }
        acc + model.terminal_cost_at(&path.ensembles[grid.steps()].particles()[i], psi_means[grid.steps()])
    });
    let total = exec::ordered_sum(&per_particle);
    if !total.is_finite() {
        return Err(Error::numerical("cost", "non-finite cost"));
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::test_models::{quadratic_model, quadratic_params, random_ensemble, space2};
    use crate::coeffs::{CoefficientModel, ControlSet, FamilySpec, LinearQuadraticParams, ScheduleRow};
    use crate::rng::{SeedSplitter, StreamDomain};
    use approx::assert_relative_eq;

    fn zero_lq_params(n: usize, nn: usize) -> LinearQuadraticParams {
        LinearQuadraticParams {
            psi: vec![0.0; n],
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
            noise_profile: vec![0.0; nn],
            running_state_quad: vec![vec![0.0; n]; n],
            running_mean_quad: 0.0,
            running_control_quad: 0.0,
            terminal_state_quad: vec![vec![0.0; n]; n],
            terminal_mean_quad: 0.0,
            terminal_linear: vec![],
        }
    }

    fn box_u() -> ControlSet {
        ControlSet::Box { lo: -2.0, hi: 2.0 }
    }

    #[test]
    fn time_grid_basics_and_rejections() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert_eq!(g.dt(), 0.25);
        assert_eq!(g.t(3), 0.75);
        assert_eq!(g.times(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert_eq!(g.refined(2).unwrap().steps(), 8);
    }

    #[test]
    fn spike_window_rounding_and_measure() {
        let g = TimeGrid::new(1.0, 8).unwrap(); // dt = 0.125
        let base = ControlPath::constant(&g, 3, 0.5).unwrap();
        // Width 0.3 rounds up to 3 steps (0.375); offset 0.26 rounds down to
        // step 2 (0.25).
        let spiked = make_spike_control(&g, &base, 1.5, 0.3, 0.26).unwrap();
        let w = spiked.spike().unwrap();
        assert_eq!(w.first_step, 2);
        assert_eq!(w.n_steps, 3);
        assert_relative_eq!(w.eps_effective, 0.375);
        assert_relative_eq!(w.offset_effective, 0.25);
        for k in 0..8 {
            let expect = if (2..5).contains(&k) { 1.5 } else { 0.5 };
            for i in 0..3 {
                assert_eq!(spiked.value(k, i), expect);
            }
        }
        // An exact multiple is not pushed up a step.
        let exact = make_spike_control(&g, &base, 1.5, 0.25, 0.0).unwrap();
        assert_eq!(exact.spike().unwrap().n_steps, 2);
        // Window must fit.
        assert!(make_spike_control(&g, &base, 1.5, 0.5, 0.75).is_err());
        // Degenerate widths rejected.
        assert!(make_spike_control(&g, &base, 1.5, 0.0, 0.0).is_err());
        assert!(make_spike_control(&g, &base, 1.5, 1.5, 0.0).is_err());
    }

    #[test]
    fn noise_coarsening_sums_increments() {
        let sp = space2();
        let g = TimeGrid::new(1.0, 8).unwrap();
        let splitter = SeedSplitter::new(7);
        let mut stream = splitter.stream(StreamDomain::PathNoise, 0, 0);
        let fine = NoiseRecord::sample(&sp, &g, 5, &mut stream).unwrap();
        let coarse = fine.coarsen(4).unwrap();
        assert_eq!(coarse.n_steps(), 2);
        for i in 0..5 {
            for j in 0..sp.n_noise() {
                let s: f64 = (0..4).map(|sub| fine.increment(sub, i)[j]).sum();
                assert_relative_eq!(coarse.increment(0, i)[j], s, max_relative = 1e-15);
            }
        }
        assert!(fine.coarsen(3).is_err());
        assert!(fine.coarsen(0).is_err());
    }

    #[test]
    fn zero_dynamics_follow_the_semigroup() {
        let sp = space2();
        let model = CoefficientModel::new(&sp, FamilySpec::LinearQuadratic(zero_lq_params(2, 2)), box_u()).unwrap();
        let g = TimeGrid::new(1.0, 16).unwrap();
        let init = random_ensemble(&sp, 6, 77);
        let control = ControlPath::constant(&g, 6, 0.0).unwrap();
        let splitter = SeedSplitter::new(8);
        let mut stream = splitter.stream(StreamDomain::PathNoise, 1, 0);
        let noise = NoiseRecord::sample(&sp, &g, 6, &mut stream).unwrap();
        let path = simulate(&sp, &model, &g, &control, &init, &noise).unwrap();
        for k in 0..=16 {
            let t = g.t(k);
            for (p, p0) in path.ensemble(k).particles().iter().zip(init.particles()) {
                let expect = sp.semigroup_apply(t, p0).unwrap();
                for (a, b) in p.coords.iter().zip(&expect.coords) {
                    assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn unit_diffusion_variance_grows_like_time() {
        // n = 1, λ = 0, b ≡ 1, a ≡ 0: x_M = ξ + W_T, so Var(x_M) = T for a
        // deterministic start.
        let sp = GalerkinSpace::new(vec![0.0], vec![1.0]).unwrap();
        let mut p = zero_lq_params(1, 1);
        p.diffusion_const = vec![vec![1.0]];
        let model = CoefficientModel::new(&sp, FamilySpec::LinearQuadratic(p), box_u()).unwrap();
        let g = TimeGrid::new(1.0, 32).unwrap();
        let n = 100_000;
        let init = deterministic_initial(&sp, n, &[0.0]).unwrap();
        let control = ControlPath::constant(&g, n, 0.0).unwrap();
        let splitter = SeedSplitter::new(41);
        let mut stream = splitter.stream(StreamDomain::PathNoise, 2, 0);
        let noise = NoiseRecord::sample(&sp, &g, n, &mut stream).unwrap();
        let path = simulate(&sp, &model, &g, &control, &init, &noise).unwrap();
        let xs: Vec<f64> = path.terminal().particles().iter().map(|p| p.coords[0]).collect();
        let var = crate::stats::variance(&xs);
        assert!(
            (var - 1.0).abs() < 0.02,
            "Var(x_M) = {var}, expected 1.0 ± 2% at {n} particles"
        );
    }

    /// Deterministic mean-field reference for the quadratic family: RK4 on
    /// `ẏ = Λy + A₁y + ā₁⟨ψ, y⟩ d + B₁u e` (the N → ∞, Δt → 0 limit of the
    /// ensemble mean).
    fn rk4_mean_reference(
        sp: &GalerkinSpace,
        p: &LinearQuadraticParams,
        u: f64,
        y0: &[f64],
        horizon: f64,
        steps: usize,
    ) -> Vec<f64> {
        let n = y0.len();
        let a1 = &p.drift_matrix;
        let rhs = |y: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; n];
            let m: f64 = p.psi.iter().zip(y).map(|(a, b)| a * b).sum();
            for i in 0..n {
                out[i] += sp.eigenvalues()[i] * y[i];
                for j in 0..n {
                    out[i] += a1[i][j] * y[j];
                }
                out[i] += p.drift_mean_gain * m * p.drift_mean_dir[i];
                out[i] += p.drift_control_gain * u * p.drift_control_dir[i];
            }
            out
        };
        let h = horizon / steps as f64;
        let mut y = y0.to_vec();
        for _ in 0..steps {
            let k1 = rhs(&y);
            let y2: Vec<f64> = y.iter().zip(&k1).map(|(a, b)| a + 0.5 * h * b).collect();
            let k2 = rhs(&y2);
            let y3: Vec<f64> = y.iter().zip(&k2).map(|(a, b)| a + 0.5 * h * b).collect();
            let k3 = rhs(&y3);
            let y4: Vec<f64> = y.iter().zip(&k3).map(|(a, b)| a + h * b).collect();
            let k4 = rhs(&y4);
            for i in 0..n {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        y
    }

    #[test]
    fn quadratic_family_mean_tracks_the_ode_reference() {
        let sp = space2();
        let model = quadratic_model();
        let p = quadratic_params();
        let g = TimeGrid::new(1.0, 64).unwrap();
        let n = 20_000;
        let u = 0.5;
        let splitter = SeedSplitter::new(4242);
        let mut istream = splitter.stream(StreamDomain::InitialState, 0, 0);
        let init = sample_gaussian_initial(&sp, n, &[0.4, -0.2], 0.3, &mut istream).unwrap();
        let control = ControlPath::constant(&g, n, u).unwrap();
        let mut nstream = splitter.stream(StreamDomain::PathNoise, 0, 0);
        let noise = NoiseRecord::sample(&sp, &g, n, &mut nstream).unwrap();
        let path = simulate(&sp, &model, &g, &control, &init, &noise).unwrap();
        let mean = path.terminal().mean();
        let init_mean = init.mean();
        let reference = rk4_mean_reference(&sp, &p, u, &init_mean.coords, 1.0, 512);
        let err = mean
            .coords
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        // O(Δt) + O(N^{-1/2}) budget: Δt = 1/64, N = 2·10⁴.
        assert!(err < 0.05, "terminal mean off the ODE reference by {err}");
    }

    #[test]
    fn cost_degeneracies_are_exact() {
        let sp = space2();
        let g = TimeGrid::new(1.0, 64).unwrap();
        let n = 12;
        let init = random_ensemble(&sp, n, 3);
        let control = ControlPath::constant(&g, n, 0.0).unwrap();
        let splitter = SeedSplitter::new(11);
        let mut stream = splitter.stream(StreamDomain::PathNoise, 3, 0);
        let noise = NoiseRecord::sample(&sp, &g, n, &mut stream).unwrap();

        // f = 0, h = 0 → J = 0 exactly.
        let zero = CoefficientModel::new(&sp, FamilySpec::LinearQuadratic(zero_lq_params(2, 2)), box_u()).unwrap();
        let path = simulate(&sp, &zero, &g, &control, &init, &noise).unwrap();
        assert_eq!(cost(&zero, &g, &path, &control).unwrap(), 0.0);

        // f ≡ 1, h = 0 → J = T up to roundoff (exact here: dt is a power of
        // two).
        let rows = vec![ScheduleRow {
            t: 0.0,
            drift: vec![0.0; 2],
            diffusion: vec![0.0; 4],
            running: 1.0,
        }];
        let unit_f = CoefficientModel::from_schedule_rows(&sp, rows, 0.0, box_u()).unwrap();
        let path = simulate(&sp, &unit_f, &g, &control, &init, &noise).unwrap();
        assert_eq!(cost(&unit_f, &g, &path, &control).unwrap(), 1.0);
    }

    #[test]
    fn crn_paths_agree_exactly_before_the_spike() {
        let sp = space2();
        let model = quadratic_model();
        let g = TimeGrid::new(1.0, 16).unwrap();
        let n = 24;
        let init = random_ensemble(&sp, n, 5);
        let base = ControlPath::constant(&g, n, 0.5).unwrap();
        let spiked = make_spike_control(&g, &base, 1.0, 0.25, 0.5).unwrap();
        let k0 = spiked.spike().unwrap().first_step;
        let splitter = SeedSplitter::new(19);
        let mut stream = splitter.stream(StreamDomain::PathNoise, 4, 0);
        let noise = NoiseRecord::sample(&sp, &g, n, &mut stream).unwrap();
        let a = simulate(&sp, &model, &g, &base, &init, &noise).unwrap();
        let b = simulate(&sp, &model, &g, &spiked, &init, &noise).unwrap();
        // Bitwise identical up to and including the first spiked step index.
        for k in 0..=k0 {
            for (p, q) in a.ensemble(k).particles().iter().zip(b.ensemble(k).particles()) {
                for (x, y) in p.coords.iter().zip(&q.coords) {
                    assert_eq!(x.to_bits(), y.to_bits(), "step {k}");
                }
            }
        }
        // And genuinely different afterwards.
        let after = k0 + 1;
        let differs = a
            .ensemble(after)
            .particles()
            .iter()
            .zip(b.ensemble(after).particles())
            .any(|(p, q)| p.coords != q.coords);
        assert!(differs, "spike had no effect at step {after}");
    }

    #[test]
    fn moments_stable_under_grid_refinement() {
        let sp = space2();
        let model = quadratic_model();
        let n = 512;
        let init = random_ensemble(&sp, n, 6);
        let fine_grid = TimeGrid::new(1.0, 64).unwrap();
        let coarse_grid = TimeGrid::new(1.0, 32).unwrap();
        let splitter = SeedSplitter::new(23);
        let mut stream = splitter.stream(StreamDomain::PathNoise, 5, 0);
        let fine_noise = NoiseRecord::sample(&sp, &fine_grid, n, &mut stream).unwrap();
        let coarse_noise = fine_noise.coarsen(2).unwrap();
        let cf = ControlPath::constant(&fine_grid, n, 0.5).unwrap();
        let cc = ControlPath::constant(&coarse_grid, n, 0.5).unwrap();
        let pf = simulate(&sp, &model, &fine_grid, &cf, &init, &fine_noise).unwrap();
        let pc = simulate(&sp, &model, &coarse_grid, &cc, &init, &coarse_noise).unwrap();
        let mf = pf.terminal().second_moment();
        let mc = pc.terminal().second_moment();
        let ratio = mf / mc;
        assert!((0.5..=2.0).contains(&ratio), "moment ratio {ratio} under Δt halving");
    }

    #[test]
    fn strong_error_decays_with_order_at_least_half_ish() {
        let sp = space2();
        let model = quadratic_model();
        let n = 256;
        let init = random_ensemble(&sp, n, 9);
        let finest = TimeGrid::new(1.0, 256).unwrap(); // dt/16 relative to 16 steps
        let splitter = SeedSplitter::new(29);
        let mut stream = splitter.stream(StreamDomain::PathNoise, 6, 0);
        let noise_finest = NoiseRecord::sample(&sp, &finest, n, &mut stream).unwrap();
        let c_finest = ControlPath::constant(&finest, n, 0.5).unwrap();
        let reference = simulate(&sp, &model, &finest, &c_finest, &init, &noise_finest).unwrap();
        let mut dts = Vec::new();
        let mut errs = Vec::new();
        for factor in [16usize, 8, 4, 2] {
            let grid = TimeGrid::new(1.0, 256 / factor).unwrap();
            let noise = noise_finest.coarsen(factor).unwrap();
            let control = ControlPath::constant(&grid, n, 0.5).unwrap();
            let path = simulate(&sp, &model, &grid, &control, &init, &noise).unwrap();
            let err_sq = path
                .terminal()
                .particles()
                .iter()
                .zip(reference.terminal().particles())
                .map(|(p, q)| p.minus(q).norm_sq())
                .sum::<f64>()
                / n as f64;
            dts.push(grid.dt());
            errs.push(err_sq.sqrt());
        }
        let fit = crate::stats::log_log_slope(&dts, &errs).unwrap();
        assert!(
            fit.slope >= 0.4,
            "strong-error slope {} against the Δt/16 reference",
            fit.slope
        );
    }

    #[test]
    fn simulation_reports_blowup_with_step_index() {
        // An unstable linear drift started near the top of the floating
        // range overflows after a few steps; the fault names the step.
        let sp = GalerkinSpace::new(vec![0.0], vec![1.0]).unwrap();
        let mut p = zero_lq_params(1, 1);
        p.drift_matrix = vec![vec![800.0]];
        let model = CoefficientModel::new(&sp, FamilySpec::LinearQuadratic(p), box_u()).unwrap();
        let g = TimeGrid::new(1.0, 64).unwrap();
        let init = deterministic_initial(&sp, 4, &[1e300]).unwrap();
        let control = ControlPath::constant(&g, 4, 0.0).unwrap();
        let splitter = SeedSplitter::new(3);
        let mut stream = splitter.stream(StreamDomain::PathNoise, 7, 0);
        let noise = NoiseRecord::sample(&sp, &g, 4, &mut stream).unwrap();
        let err = simulate(&sp, &model, &g, &control, &init, &noise).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("step"), "fault message should name the step: {msg}");
    }

    #[test]
    fn feedback_rule_matches_equivalent_open_loop() {
        let sp = space2();
        let model = quadratic_model();
        let g = TimeGrid::new(1.0, 8).unwrap();
        let n = 16;
        let init = random_ensemble(&sp, n, 12);
        let splitter = SeedSplitter::new(31);
        let mut stream = splitter.stream(StreamDomain::PathNoise, 8, 0);
        let noise = NoiseRecord::sample(&sp, &g, n, &mut stream).unwrap();
        let open = ControlPath::constant(&g, n, 0.5).unwrap();
        let a = simulate(&sp, &model, &g, &open, &init, &noise).unwrap();
        let b = simulate_feedback(&sp, &model, &g, |_, _, _| 0.5, &init, &noise).unwrap();
        assert_eq!(a, b);
    }
}
