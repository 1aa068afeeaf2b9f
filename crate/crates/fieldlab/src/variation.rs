//! Spike-variation processes and the statistical rate studies built on them.
//!
//! For a spike perturbation `u^ε` of the baseline control ū — the control
//! replaced by another admissible value on a window `E_ε` of measure ε — the
//! expansion of the perturbed state `X^ε` around the base path X̄ is carried
//! by two linear(ized) processes started at zero:
//!
//! ```text
//! dy = A y dt + [a_x y + Ẽ[a_μ ỹ] + δa·χ_E ] dt + [b_x y + Ẽ[b_μ ỹ] + δb·χ_E ] dW,
//! dz = A z dt + [a_x z + Ẽ[a_μ z̃] + ½ D²a[(y),(y)] + (δa_x y + δẼ[a_μ ỹ])·χ_E ] dt + (b-analogue) dW,
//! ```
//!
//! where every coefficient derivative is evaluated along the base path,
//! `δφ(t) = φ(t, X̄, μ̄, u^ε) − φ(t, X̄, μ̄, ū)` is the pure control
//! increment, and `D²` is the full second derivative of the coefficient in
//! (state, measure) jointly.
//!
//! Everything here is discretized at the **particle level**: y and z are the
//! exact first and second Gâteaux derivatives of the N-particle exponential
//! Euler system with respect to the control increment, so the measure terms
//! `Ẽ[φ_μ ỹ]` become ensemble averages of the measure derivative paired
//! against the ensemble's own tangent cloud, and the remainders
//!
//! ```text
//! ξ = X^ε − X̄,   η = ξ − y,   ζ = ξ − y − z
//! ```
//!
//! have clean orders in ε under common random numbers:
//! `E supₖ ‖ξ‖² = O(ε)`, `E supₖ ‖y‖² = O(ε)`, `E supₖ ‖z‖² = O(ε²)`,
//! `E supₖ ‖η‖² = O(ε²)`, and `E supₖ ‖ζ‖² = o(ε²)`.
//!
//! The `o(·)` claims are not falsifiable at finite resolution; they are
//! operationalized as a monotone-decreasing ratio across a ≥ 4-point
//! geometric ε sweep together with a fitted slope strictly above the `O(·)`
//! baseline, with bootstrap confidence intervals over seeds. The supremum
//! over time is taken over grid points only, pathwise per particle, and the
//! expectation is the population average.

use serde::Serialize;

use crate::coeffs::{CoefficientModel, MeasureDerivKind, Which};
use crate::config::{ExperimentConfig, InitialCondition};
use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::exec;
use crate::forward::{
    make_spike_control, simulate, ControlPath, NoiseRecord, StatePath, TimeGrid,
};
use crate::linalg::{self, DMat};
use crate::rng::{SeedSplitter, StreamDomain};
use crate::space::{GalerkinSpace, StateVector};
use crate::stats::{bootstrap_log_log_slope, log_log_slope, BootstrapInterval};

// ── Variation paths ──────────────────────────────────────────────────────

/// First- (and optionally second-) order variation clouds along a base path:
/// one tangent vector per grid time per particle, zero at time zero.
#[derive(Debug, Clone)]
pub struct VariationPath {
    grid: TimeGrid,
    y: Vec<Vec<StateVector>>,
    z: Option<Vec<Vec<StateVector>>>,
}

impl VariationPath {
    /// The grid the variations live on.
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Number of particles.
    pub fn n_particles(&self) -> usize {
        self.y[0].len()
    }

    /// First-order cloud at grid index k.
    pub fn first(&self, k: usize) -> &[StateVector] {
        &self.y[k]
    }

    /// Second-order cloud at grid index k, when solved.
    pub fn second(&self, k: usize) -> Option<&[StateVector]> {
        self.z.as_ref().map(|z| z[k].as_slice())
    }

    /// Whether the second-order cloud is present.
    pub fn has_second(&self) -> bool {
        self.z.is_some()
    }

    /// `E supₖ ‖y‖²`: pathwise sup over grid times, then population mean.
    pub fn e_sup_sq_first(&self) -> f64 {
        e_sup_sq(&self.y)
    }

    /// `E supₖ ‖z‖²` when the second-order cloud is present.
    pub fn e_sup_sq_second(&self) -> Option<f64> {
        self.z.as_ref().map(|z| e_sup_sq(z))
    }

    /// Population mean of the first-order cloud at grid index k.
    pub fn first_mean(&self, k: usize) -> StateVector {
        mean_of(&self.y[k])
    }
}

fn mean_of(cloud: &[StateVector]) -> StateVector {
    let n = cloud.len();
    let dim = cloud[0].dim();
    let mut acc = vec![0.0; dim];
    for v in cloud {
        for (a, c) in acc.iter_mut().zip(&v.coords) {
            *a += c;
        }
    }
    for a in acc.iter_mut() {
        *a /= n as f64;
    }
    StateVector::from_coords(acc)
}

fn e_sup_sq(field: &[Vec<StateVector>]) -> f64 {
    let n = field[0].len();
    let per_particle: Vec<f64> = exec::map_indexed(n, |i| {
        field
            .iter()
            .map(|cloud| cloud[i].norm_sq())
            .fold(0.0_f64, f64::max)
    });
    exec::ordered_sum(&per_particle) / n as f64
}

/// ψ-mean of a tangent cloud: `(1/N) Σⱼ ⟨ψ, vⱼ⟩`.
fn psi_mean(psi: &StateVector, cloud: &[StateVector]) -> f64 {
    let terms: Vec<f64> = cloud.iter().map(|v| psi.inner(v)).collect();
    exec::ordered_sum(&terms) / cloud.len() as f64
}

// ── Solvers ──────────────────────────────────────────────────────────────

fn check_geometry(
    grid: &TimeGrid,
    base: &StatePath,
    base_control: &ControlPath,
    spiked_control: &ControlPath,
    noise: &NoiseRecord,
) -> Result<usize> {
    let m = grid.steps();
    if base.grid().steps() != m || base.grid().horizon() != grid.horizon() {
        return Err(Error::domain("variation", "base path grid disagrees with the given grid"));
    }
    if base_control.n_steps() != m || spiked_control.n_steps() != m || noise.n_steps() != m {
        return Err(Error::domain("variation", "control or noise record length disagrees with the grid"));
    }
    let n = base.n_particles();
    if base_control.n_particles() != n || spiked_control.n_particles() != n || noise.n_particles() != n {
        return Err(Error::domain("variation", "control or noise record width disagrees with the population"));
    }
    Ok(n)
}

/// Solve the first-order variational system along `base`, reusing the base
/// noise increments.
///
/// The control increment is read off pointwise as the difference between
/// `spiked_control` and `base_control`; steps where they agree contribute no
/// source, so a spike window of measure zero yields y ≡ 0 exactly.
pub fn solve_first_variation(
    space: &GalerkinSpace,
    model: &CoefficientModel,
    grid: &TimeGrid,
    base: &StatePath,
    base_control: &ControlPath,
    spiked_control: &ControlPath,
    noise: &NoiseRecord,
) -> Result<VariationPath> {
    let n = check_geometry(grid, base, base_control, spiked_control, noise)?;
    let dt = grid.dt();
    let factors = space.semigroup_factors(dt)?;
    let psi = model.psi().clone();
    let profile = model.diffusion_profile();
    let dim = model.n_state();
    let mut y: Vec<Vec<StateVector>> = Vec::with_capacity(grid.steps() + 1);
    y.push(vec![StateVector::from_coords(vec![0.0; dim]); n]);
    for k in 0..grid.steps() {
        let t = grid.t(k);
        let ensemble = base.ensemble(k);
        let m = model.mean_statistic(ensemble)?;
        let m_y = psi_mean(&psi, &y[k]);
        let particles = ensemble.particles();
        let current = &y[k];
        let next: Vec<StateVector> = exec::map_indexed(n, |i| {
            let x = &particles[i];
            let yi = &current[i];
            let u0 = base_control.value(k, i);
            let u1 = spiked_control.value(k, i);
            let dw = noise.increment(k, i);
            let sdw: f64 = profile.iter().zip(dw).map(|(s, w)| s * w).sum();

            // Drift tangent: a_x y + a_m·m_y (+ δa on the window).
            let mut drift = model.drift_jac_x(t, x, m, u0).apply(&yi.coords);
            let a_m = model.drift_dm(t, x, m, u0);
            linalg::axpy(m_y, &a_m.coords, &mut drift);
            if u1 != u0 {
                let da = model.drift_at(t, x, m, u1).minus(&model.drift_at(t, x, m, u0));
                linalg::axpy(1.0, &da.coords, &mut drift);
            }

            // Diffusion tangent against the increment. The diffusion
            // derivative in (state, measure, control) is rank-one along the
            // noise profile s, so its pairing with ΔW collapses to the
            // scalar s·ΔW.
            let mut noise_term = model.diffusion_core_jac_x(t, x, m, u0).apply(&yi.coords);
            let c_m = model.diffusion_core_dm(t, x, m, u0);
            linalg::axpy(m_y, &c_m.coords, &mut noise_term);
            linalg::scale(sdw, &mut noise_term);
            if u1 != u0 {
                let db = model.diffusion_at(t, x, m, u1).minus(&model.diffusion_at(t, x, m, u0));
                let impulse = db.apply_increment(dw);
                linalg::axpy(1.0, &impulse.coords, &mut noise_term);
            }

            let mut nxt = yi.clone();
            linalg::axpy(dt, &drift, &mut nxt.coords);
            linalg::axpy(1.0, &noise_term, &mut nxt.coords);
            for (c, f) in nxt.coords.iter_mut().zip(&factors) {
                *c *= f;
            }
            nxt
        });
        for (i, v) in next.iter().enumerate() {
            if !linalg::all_finite(&v.coords) {
                return Err(Error::numerical(
                    "solve_first_variation",
                    format!("non-finite tangent at step {}, particle {i}", k + 1),
                ));
            }
        }
        y.push(next);
    }
    Ok(VariationPath {
        grid: *grid,
        y,
        z: None,
    })
}

/// Solve the second-order variational system on top of a solved first-order
/// cloud; the result carries both orders.
///
/// Quadratic sources take the full second derivative of each coefficient in
/// (state, measure) jointly — `½[φ_xx(y,y) + 2 φ_xm y·m_y + φ_mm m_y²]` for
/// the scalar-statistic families, in which the y-argument derivative of the
/// measure gradient vanishes identically (asserted). On the spike window the
/// first-order cloud couples to the control increment through
/// `δφ_x y + δφ_m·m_y`.
pub fn solve_second_variation(
    space: &GalerkinSpace,
    model: &CoefficientModel,
    grid: &TimeGrid,
    base: &StatePath,
    first: &VariationPath,
    base_control: &ControlPath,
    spiked_control: &ControlPath,
    noise: &NoiseRecord,
) -> Result<VariationPath> {
    let n = check_geometry(grid, base, base_control, spiked_control, noise)?;
    if first.grid().steps() != grid.steps() || first.n_particles() != n {
        return Err(Error::domain("solve_second_variation", "first-order cloud does not match the base system"));
    }
    // The quadratic sources below implement the scalar-statistic closure, in
    // which the measure gradient is constant in its y-slot. A family that
    // violated this would need the extra Ẽ[φ_yμ(ỹ, ỹ)] source; fail loud
    // rather than silently dropping it.
    if !model.y_mu_identically_zero() {
        return Err(Error::domain(
            "solve_second_variation",
            "coefficient family has a nonvanishing y-slot measure derivative; no solver shipped for it",
        ));
    }
    let dt = grid.dt();
    let factors = space.semigroup_factors(dt)?;
    let psi = model.psi().clone();
    let profile = model.diffusion_profile();
    let dim = model.n_state();
    let mut z: Vec<Vec<StateVector>> = Vec::with_capacity(grid.steps() + 1);
    z.push(vec![StateVector::from_coords(vec![0.0; dim]); n]);
    for k in 0..grid.steps() {
        let t = grid.t(k);
        let ensemble = base.ensemble(k);
        let m = model.mean_statistic(ensemble)?;
        let yk = first.first(k);
        let m_y = psi_mean(&psi, yk);
        let m_z = psi_mean(&psi, &z[k]);
        let particles = ensemble.particles();
        let current = &z[k];
        let next: Vec<StateVector> = exec::map_indexed(n, |i| {
            let x = &particles[i];
            let yi = &yk[i];
            let zi = &current[i];
            let u0 = base_control.value(k, i);
            let u1 = spiked_control.value(k, i);
            let dw = noise.increment(k, i);
            let sdw: f64 = profile.iter().zip(dw).map(|(s, w)| s * w).sum();

            // Linear part in z: a_x z + a_m·m_z.
            let mut drift = model.drift_jac_x(t, x, m, u0).apply(&zi.coords);
            linalg::axpy(m_z, &model.drift_dm(t, x, m, u0).coords, &mut drift);
            // Quadratic source: ½ a_xx(y,y) + a_xm y·m_y + ½ a_mm m_y².
            let hess = model.drift_hess_apply(t, x, m, u0, yi, yi);
            linalg::axpy(0.5, &hess.coords, &mut drift);
            let mixed = model.drift_dm_dx(t, x, m, u0).apply(&yi.coords);
            linalg::axpy(m_y, &mixed, &mut drift);
            linalg::axpy(0.5 * m_y * m_y, &model.drift_d2m(t, x, m, u0).coords, &mut drift);
            if u1 != u0 {
                // Window cross terms: δa_x y + δa_m·m_y.
                let djac = model.drift_jac_x(t, x, m, u1).apply(&yi.coords);
                let jac = model.drift_jac_x(t, x, m, u0).apply(&yi.coords);
                for (acc, (a1, a0)) in drift.iter_mut().zip(djac.iter().zip(&jac)) {
                    *acc += a1 - a0;
                }
                let dm1 = model.drift_dm(t, x, m, u1);
                let dm0 = model.drift_dm(t, x, m, u0);
                linalg::axpy(m_y, &dm1.minus(&dm0).coords, &mut drift);
            }

            // Diffusion analogue, collapsed through s·ΔW.
            let mut core = model.diffusion_core_jac_x(t, x, m, u0).apply(&zi.coords);
            linalg::axpy(m_z, &model.diffusion_core_dm(t, x, m, u0).coords, &mut core);
            let chess = model.diffusion_core_hess_apply(t, x, m, u0, yi, yi);
            linalg::axpy(0.5, &chess.coords, &mut core);
            let cmixed = model.diffusion_core_dm_dx(t, x, m, u0).apply(&yi.coords);
            linalg::axpy(m_y, &cmixed, &mut core);
            linalg::axpy(0.5 * m_y * m_y, &model.diffusion_core_d2m(t, x, m, u0).coords, &mut core);
            if u1 != u0 {
                let cj = model.diffusion_core_jac_x(t, x, m, u1).apply(&yi.coords);
                let cj0 = model.diffusion_core_jac_x(t, x, m, u0).apply(&yi.coords);
                for (acc, (a1, a0)) in core.iter_mut().zip(cj.iter().zip(&cj0)) {
                    *acc += a1 - a0;
                }
                let cm1 = model.diffusion_core_dm(t, x, m, u1);
                let cm0 = model.diffusion_core_dm(t, x, m, u0);
                linalg::axpy(m_y, &cm1.minus(&cm0).coords, &mut core);
            }
            linalg::scale(sdw, &mut core);

            let mut nxt = zi.clone();
            linalg::axpy(dt, &drift, &mut nxt.coords);
            linalg::axpy(1.0, &core, &mut nxt.coords);
            for (c, f) in nxt.coords.iter_mut().zip(&factors) {
                *c *= f;
            }
            nxt
        });
        for (i, v) in next.iter().enumerate() {
            if !linalg::all_finite(&v.coords) {
                return Err(Error::numerical(
                    "solve_second_variation",
                    format!("non-finite tangent at step {}, particle {i}", k + 1),
                ));
            }
        }
        z.push(next);
    }
    Ok(VariationPath {
        grid: *grid,
        y: first.y.clone(),
        z: Some(z),
    })
}

/// Generic permuted-ensemble estimator of `Ẽ[φ_μ(t, x, μ)(X̃)(ỹ)]`: the
/// measure derivative of one coefficient at anchor `x`, evaluated at the
/// permuted cloud points and paired against the permuted tangents, averaged
/// over the ensemble.
///
/// For the scalar-statistic families this equals `φ_m(t, x, m) · m_y`
/// **exactly**, independent of the permutation — the solvers use that closed
/// form, and the estimator exists to verify the collapse.
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) fn tilde_measure_term(
    model: &CoefficientModel,
    which: Which,
    t: f64,
    x: &StateVector,
    mu: &ParticleEnsemble,
    u: f64,
    tangents: &[StateVector],
    permutation: &[usize],
) -> Result<Vec<f64>> {
    let n = mu.len();
    if tangents.len() != n || permutation.len() != n {
        return Err(Error::domain("tilde_measure_term", "cloud sizes disagree"));
    }
    let mut acc: Option<Vec<f64>> = None;
    for &j in permutation {
        let point = &mu.particles()[j];
        let contracted = model.deriv_mu_dir(which, MeasureDerivKind::Mu, t, x, mu, u, point, &tangents[j], None)?;
        let coords = match contracted {
            crate::coeffs::CoeffValue::Vector(v) => v.coords,
            crate::coeffs::CoeffValue::Scalar(s) => vec![s],
            crate::coeffs::CoeffValue::Matrix(m) => m.entries().to_vec(),
        };
        match &mut acc {
            None => acc = Some(coords),
            Some(a) => linalg::axpy(1.0, &coords, a),
        }
    }
    let mut out = acc.expect("nonempty ensemble");
    for v in out.iter_mut() {
        *v /= n as f64;
    }
    Ok(out)
}

// ── Rate study ───────────────────────────────────────────────────────────

/// One statistic's ε-curve in a [`RateReport`].
#[derive(Debug, Clone, Serialize)]
pub struct RateCurve {
    /// Statistic name (`xi_sq`, `y_sq`, `z_sq`, `eta_sq`, `zeta_sq`).
    pub name: String,
    /// Seed-averaged value per ε, in sweep order.
    pub mean: Vec<f64>,
    /// Raw values, `per_seed[s][e]`.
    pub per_seed: Vec<Vec<f64>>,
    /// Log-log slope of the seed-averaged curve against ε.
    pub slope: f64,
    /// Bootstrap confidence interval for the slope (resampling seeds).
    pub ci: BootstrapInterval,
}

/// Result of a common-random-number ε sweep of the expansion remainders.
#[derive(Debug, Clone, Serialize)]
pub struct RateReport {
    /// Spike widths as configured.
    pub eps_requested: Vec<f64>,
    /// Spike widths after rounding to whole steps (the abscissa of every
    /// fit).
    pub eps_effective: Vec<f64>,
    /// Population size used.
    pub n_particles: usize,
    /// Master seeds averaged over.
    pub seeds: Vec<u64>,
    /// The five statistics' curves.
    pub curves: Vec<RateCurve>,
}

impl RateReport {
    /// Look up a curve by statistic name.
    pub fn curve(&self, name: &str) -> Option<&RateCurve> {
        self.curves.iter().find(|c| c.name == name)
    }

    /// Long-format CSV: `eps,statistic,seed,value` plus seed-mean rows.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("eps,statistic,seed,value\n");
        for curve in &self.curves {
            for (s, seed) in self.seeds.iter().enumerate() {
                for (e, eps) in self.eps_effective.iter().enumerate() {
                    out.push_str(&format!("{eps},{},{seed},{}\n", curve.name, curve.per_seed[s][e]));
                }
            }
            for (e, eps) in self.eps_effective.iter().enumerate() {
                out.push_str(&format!("{eps},{},mean,{}\n", curve.name, curve.mean[e]));
            }
        }
        out
    }

    /// Summary with slopes and intervals, for the JSON artifact.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "eps_requested": self.eps_requested,
            "eps_effective": self.eps_effective,
            "n_particles": self.n_particles,
            "seeds": self.seeds,
            "slopes": self.curves.iter().map(|c| {
                serde_json::json!({
                    "statistic": c.name,
                    "slope": c.slope,
                    "ci_lo": c.ci.lo,
                    "ci_hi": c.ci.hi,
                    "level": c.ci.level,
                })
            }).collect::<Vec<_>>(),
        })
    }
}

/// Number of bootstrap resamples used for slope intervals.
pub const RATE_BOOTSTRAP_RESAMPLES: usize = 2000;

fn build_initial(
    cfg: &ExperimentConfig,
    space: &GalerkinSpace,
    splitter: &SeedSplitter,
) -> Result<ParticleEnsemble> {
    match &cfg.initial {
        InitialCondition::Gaussian { mean, std } => {
            let mut stream = splitter.stream(StreamDomain::InitialState, 0, 0);
            crate::forward::sample_gaussian_initial(space, cfg.particles.count, mean, *std, &mut stream)
        }
        InitialCondition::Deterministic { point } => {
            crate::forward::deterministic_initial(space, cfg.particles.count, point)
        }
    }
}

/// Everything one (seed, ε) cell of the sweep produces.
struct SweepCell {
    xi_sq: f64,
    y_sq: f64,
    z_sq: f64,
    eta_sq: f64,
    zeta_sq: f64,
    smoothing: Vec<f64>,
}

fn sweep_one_seed(
    cfg: &ExperimentConfig,
    space: &GalerkinSpace,
    model: &CoefficientModel,
    grid: &TimeGrid,
    seed: u64,
    processes: &[(String, TestProcess)],
) -> Result<Vec<SweepCell>> {
    let splitter = SeedSplitter::new(seed);
    let n = cfg.particles.count;
    let initial = build_initial(cfg, space, &splitter)?;
    let mut noise_stream = splitter.stream(StreamDomain::PathNoise, 0, 0);
    let noise = NoiseRecord::sample(space, grid, n, &mut noise_stream)?;
    let base_control = ControlPath::constant(grid, n, cfg.control.base)?;
    let base = simulate(space, model, grid, &base_control, &initial, &noise)?;
    let m_bar = base.mean_statistics(model.psi())?;
    let mut cells = Vec::with_capacity(cfg.sweep.eps.len());
    for &eps in &cfg.sweep.eps {
        let spiked_control = make_spike_control(grid, &base_control, cfg.spike.control, eps, cfg.spike.offset)?;
        let spiked = simulate(space, model, grid, &spiked_control, &initial, &noise)?;
        let first = solve_first_variation(space, model, grid, &base, &base_control, &spiked_control, &noise)?;
        let both = solve_second_variation(space, model, grid, &base, &first, &base_control, &spiked_control, &noise)?;
        let steps = grid.steps();
        let per_particle: Vec<[f64; 5]> = exec::map_indexed(n, |i| {
            let mut xi_m: f64 = 0.0;
            let mut y_m: f64 = 0.0;
            let mut z_m: f64 = 0.0;
            let mut eta_m: f64 = 0.0;
            let mut zeta_m: f64 = 0.0;
            for k in 0..=steps {
                let xb = &base.ensemble(k).particles()[i];
                let xe = &spiked.ensemble(k).particles()[i];
                let yv = &both.first(k)[i];
                let zv = &both.second(k).expect("second order solved")[i];
                let xi = xe.minus(xb);
                let eta = xi.minus(yv);
                let zeta = eta.minus(zv);
                xi_m = xi_m.max(xi.norm_sq());
                y_m = y_m.max(yv.norm_sq());
                z_m = z_m.max(zv.norm_sq());
                eta_m = eta_m.max(eta.norm_sq());
                zeta_m = zeta_m.max(zeta.norm_sq());
            }
            [xi_m, y_m, z_m, eta_m, zeta_m]
        });
        let mut sums = [0.0_f64; 5];
        for row in &per_particle {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        let smoothing = processes
            .iter()
            .map(|(_, phi)| smoothing_statistic(grid, phi, &m_bar, &both))
            .collect();
        cells.push(SweepCell {
            xi_sq: sums[0] / n as f64,
            y_sq: sums[1] / n as f64,
            z_sq: sums[2] / n as f64,
            eta_sq: sums[3] / n as f64,
            zeta_sq: sums[4] / n as f64,
            smoothing,
        });
    }
    Ok(cells)
}

fn assemble_curve(
    name: &str,
    eps: &[f64],
    per_seed: Vec<Vec<f64>>,
    level: f64,
    boot_stream: &mut crate::rng::RngStream,
) -> Result<RateCurve> {
    let n_eps = eps.len();
    let mut mean = vec![0.0; n_eps];
    for row in &per_seed {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= per_seed.len() as f64;
    }
    let fit = log_log_slope(eps, &mean)?;
    let ci = bootstrap_log_log_slope(eps, &per_seed, level, RATE_BOOTSTRAP_RESAMPLES, boot_stream)?;
    Ok(RateCurve {
        name: name.to_string(),
        mean,
        per_seed,
        slope: fit.slope,
        ci,
    })
}

/// Run the full common-random-number rate study described by `cfg`:
/// simulate X̄ and X^ε per seed, solve both variations per ε with shared
/// noise, and fit log-log slopes of the five `E supₖ ‖·‖²` statistics with
/// bootstrap intervals over seeds.
///
/// Requires at least 4 ε values spanning at least two octaves.
pub fn remainder_rates(
    cfg: &ExperimentConfig,
    space: &GalerkinSpace,
    model: &CoefficientModel,
) -> Result<RateReport> {
    let (report, _) = rate_and_smoothing_sweep(cfg, space, model, &[])?;
    Ok(report)
}

/// Rate study plus smoothing statistics for the given test processes in one
/// pass (they share every simulation).
pub fn rate_and_smoothing_sweep(
    cfg: &ExperimentConfig,
    space: &GalerkinSpace,
    model: &CoefficientModel,
    processes: &[(String, TestProcess)],
) -> Result<(RateReport, SmoothingReport)> {
    cfg.validate()?;
    let eps_requested = cfg.sweep.eps.clone();
    let eps = cfg.effective_eps()?;
    if eps.len() < 4 {
        return Err(Error::domain(
            "remainder_rates",
            format!("need at least 4 spike widths, got {}", eps.len()),
        ));
    }
    let lo = eps.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eps.iter().cloned().fold(0.0_f64, f64::max);
    if hi / lo < 4.0 - 1e-9 {
        return Err(Error::domain(
            "remainder_rates",
            format!("spike widths must span at least two octaves, got ratio {:.3}", hi / lo),
        ));
    }
    let grid = cfg.time_grid()?;
    let per_seed: Vec<Vec<SweepCell>> = cfg
        .sweep
        .seeds
        .iter()
        .map(|&seed| sweep_one_seed(cfg, space, model, &grid, seed, processes))
        .collect::<Result<_>>()?;

    let extract = |f: fn(&SweepCell) -> f64| -> Vec<Vec<f64>> {
        per_seed.iter().map(|cells| cells.iter().map(f).collect()).collect()
    };
    let boot_splitter = SeedSplitter::new(cfg.sweep.seeds[0] ^ 0x9E37_79B9_7F4A_7C15);
    let mut boot_stream = boot_splitter.stream(StreamDomain::Bootstrap, 0, 0);
    let level = cfg.tolerances.bootstrap_level;
    let curves = vec![
        assemble_curve("xi_sq", &eps, extract(|c| c.xi_sq), level, &mut boot_stream)?,
        assemble_curve("y_sq", &eps, extract(|c| c.y_sq), level, &mut boot_stream)?,
        assemble_curve("z_sq", &eps, extract(|c| c.z_sq), level, &mut boot_stream)?,
        assemble_curve("eta_sq", &eps, extract(|c| c.eta_sq), level, &mut boot_stream)?,
        assemble_curve("zeta_sq", &eps, extract(|c| c.zeta_sq), level, &mut boot_stream)?,
    ];
    let report = RateReport {
        eps_requested,
        eps_effective: eps.clone(),
        n_particles: cfg.particles.count,
        seeds: cfg.sweep.seeds.clone(),
        curves,
    };

    let mut entries = Vec::new();
    for (p, (name, _)) in processes.iter().enumerate() {
        let per_seed_ints: Vec<Vec<f64>> = per_seed
            .iter()
            .map(|cells| cells.iter().map(|c| c.smoothing[p]).collect())
            .collect();
        let mut integrals = vec![0.0; eps.len()];
        for row in &per_seed_ints {
            for (m, v) in integrals.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in integrals.iter_mut() {
            *m /= per_seed_ints.len() as f64;
        }
        let ratios: Vec<f64> = integrals.iter().zip(&eps).map(|(v, e)| v / e).collect();
        entries.push(SmoothingEntry {
            process: name.clone(),
            integrals,
            ratios,
            per_seed: per_seed_ints,
        });
    }
    let smoothing = SmoothingReport {
        eps_effective: eps,
        entries,
    };
    Ok((report, smoothing))
}

// ── Smoothing diagnostic ─────────────────────────────────────────────────

/// Bounded matrix-valued test processes φ the smoothing estimate pairs with
/// the first-order cloud.
#[derive(Debug, Clone)]
pub enum TestProcess {
    /// The identity matrix at every time.
    Identity,
    /// A fixed matrix at every time.
    Constant(DMat),
    /// `cos(2π·frequency·t) · base`: deterministic, time-varying.
    TimeModulated {
        /// The matrix scaled by the modulation.
        base: DMat,
        /// Oscillation frequency over the horizon.
        frequency: f64,
    },
    /// `tanh(m̄(t)) · base`: depends on the simulated path through the
    /// interaction statistic, bounded by construction.
    MeanScaled(DMat),
}

impl TestProcess {
    /// Apply φ(t) to a vector, given the base path's interaction statistic
    /// at that time.
    pub fn apply(&self, t: f64, m_bar: f64, v: &StateVector) -> Vec<f64> {
        match self {
            TestProcess::Identity => v.coords.clone(),
            TestProcess::Constant(mat) => mat.apply(&v.coords),
            TestProcess::TimeModulated { base, frequency } => {
                let mut out = base.apply(&v.coords);
                linalg::scale((2.0 * std::f64::consts::PI * frequency * t).cos(), &mut out);
                out
            }
            TestProcess::MeanScaled(mat) => {
                let mut out = mat.apply(&v.coords);
                linalg::scale(m_bar.tanh(), &mut out);
                out
            }
        }
    }
}

/// The three shipped test processes for an n-dimensional state.
pub fn shipped_test_processes(n: usize) -> Vec<(String, TestProcess)> {
    let mut skew = DMat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = if (i + j) % 2 == 0 { 0.8 } else { -0.4 };
            skew.set(i, j, v / (1.0 + i as f64 + j as f64));
        }
    }
    let mut ramp = DMat::zeros(n, n);
    for i in 0..n {
        ramp.set(i, i, 1.0 / (1.0 + i as f64));
        if i + 1 < n {
            ramp.set(i, i + 1, 0.5);
        }
    }
    vec![
        ("identity".to_string(), TestProcess::Identity),
        (
            "time_modulated".to_string(),
            TestProcess::TimeModulated {
                base: skew,
                frequency: 2.0,
            },
        ),
        ("mean_scaled".to_string(), TestProcess::MeanScaled(ramp)),
    ]
}

/// The discrete smoothing functional `Σₖ |Ê[φₖ yₖ]|²·Δt` (left endpoint;
/// the k = M term is excluded like the integral's right endpoint).
pub fn smoothing_statistic(grid: &TimeGrid, phi: &TestProcess, m_bar: &[f64], first: &VariationPath) -> f64 {
    let dt = grid.dt();
    let mut acc = 0.0;
    for k in 0..grid.steps() {
        let ybar = first.first_mean(k);
        let v = phi.apply(grid.t(k), m_bar[k], &ybar);
        acc += linalg::norm_sq(&v) * dt;
    }
    acc
}

/// One test process's sweep results.
#[derive(Debug, Clone, Serialize)]
pub struct SmoothingEntry {
    /// Test process name.
    pub process: String,
    /// Seed-averaged `Σₖ |Ê[φ y]|² Δt` per ε.
    pub integrals: Vec<f64>,
    /// `integrals / ε` — the quantity that must decrease along the sweep.
    pub ratios: Vec<f64>,
    /// Raw integrals, `per_seed[s][e]`.
    pub per_seed: Vec<Vec<f64>>,
}

/// Smoothing sweep across ε for each test process.
#[derive(Debug, Clone, Serialize)]
pub struct SmoothingReport {
    /// Spike widths after rounding, in sweep order.
    pub eps_effective: Vec<f64>,
    /// One entry per test process.
    pub entries: Vec<SmoothingEntry>,
}

impl SmoothingReport {
    /// Whether a given entry's ratio decreases strictly from each sweep
    /// point to the next, reading ε in decreasing order.
    pub fn strictly_improving(&self, entry: &SmoothingEntry) -> bool {
        // Pair ratios with ε, sort by decreasing ε, demand strict decrease.
        let mut pairs: Vec<(f64, f64)> = self.eps_effective.iter().cloned().zip(entry.ratios.iter().cloned()).collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        pairs.windows(2).all(|w| w[1].1 < w[0].1)
    }

    /// CSV: `eps,process,integral,ratio`.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("eps,process,integral,ratio\n");
        for e in &self.entries {
            for ((eps, i), r) in self.eps_effective.iter().zip(&e.integrals).zip(&e.ratios) {
                out.push_str(&format!("{eps},{},{i},{r}\n", e.process));
            }
        }
        out
    }
}
