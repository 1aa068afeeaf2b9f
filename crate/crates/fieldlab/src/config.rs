//! Experiment configuration: one structured TOML file describes a complete
//! run.
//!
//! The file pins everything an experiment depends on — the retained spectrum
//! and noise weights, the time grid, the population size, the coefficient
//! family with all its parameters, the admissible control set, the baseline
//! and spike controls, the ε sweep and seed list, the assertion tolerances,
//! and the output directory. Nothing is defaulted silently: the shipped
//! reference configurations in `configs/` spell out every field, and the
//! preset builders here are the single source of truth those files are
//! checked against.
//!
//! Validation reports problems by **field path** (`grid.M`, `space.eigenvalues`,
//! `control.base`, …) so a bad file is diagnosable without reading source.
//! Randomness never enters through the configuration: the seed list plus the
//! counter-based splitting scheme in [`crate::rng`] determine every draw.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coeffs::{CoefficientModel, ControlSet, FamilySpec};
use crate::error::{Error, Result};
use crate::forward::TimeGrid;
use crate::space::GalerkinSpace;

// ── Sections ─────────────────────────────────────────────────────────────

/// `[space]`: the spectral truncation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceConfig {
    /// Number of retained eigenmodes (must equal `eigenvalues.len()`).
    pub n_state: usize,
    /// Number of retained noise directions (must equal `hs_weights.len()`).
    pub n_noise: usize,
    /// Eigenvalues of the linear operator, non-increasing and ≤ 0.
    pub eigenvalues: Vec<f64>,
    /// Variance weights of the retained noise directions.
    pub hs_weights: Vec<f64>,
}

/// `[grid]`: the uniform time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Horizon T.
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Number of steps M.
    #[serde(rename = "M")]
    pub steps: usize,
}

/// `[particles]`: the interacting population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticlesConfig {
    /// Population size N.
    #[serde(rename = "N")]
    pub count: usize,
}

/// `[initial]`: the law of the starting state ξ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialCondition {
    /// i.i.d. Gaussian particles `mean + std · 𝒩(0, I)`.
    Gaussian { mean: Vec<f64>, std: f64 },
    /// Every particle starts at the same point.
    Deterministic { point: Vec<f64> },
}

/// `[control]`: baseline control and the admissible set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    /// The constant open-loop baseline ū.
    pub base: f64,
    /// The admissible set U.
    pub set: ControlSet,
}

/// `[spike]`: where and with what value the spike perturbation acts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeConfig {
    /// Window start (rounded down to a step boundary at run time).
    pub offset: f64,
    /// The control applied on the window.
    pub control: f64,
}

/// `[sweep]`: the ε values and seeds the rate studies range over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Spike widths, each rounded up to a whole number of steps at run time.
    pub eps: Vec<f64>,
    /// Master seeds; every artifact derives from these alone.
    pub seeds: Vec<u64>,
}

/// `[tolerances]`: every numeric threshold the command-line assertions use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToleranceConfig {
    /// Best-step relative error allowed in the measure-derivative lift check.
    pub lift_rel_error: f64,
    /// Accepted window for observed finite-difference orders.
    pub fd_order_lo: f64,
    /// Upper end of the finite-difference order window.
    pub fd_order_hi: f64,
    /// Accepted slope window for first-order quantities (‖ξ‖², ‖y‖² vs ε).
    pub first_slope_lo: f64,
    /// Upper end of the first-order slope window.
    pub first_slope_hi: f64,
    /// Accepted slope window for second-order quantities (‖z‖², ‖η‖² vs ε).
    pub second_slope_lo: f64,
    /// Upper end of the second-order slope window.
    pub second_slope_hi: f64,
    /// The remainder slope must exceed this (strictly better than second
    /// order).
    pub remainder_slope_min: f64,
    /// Confidence level of the bootstrap interval on the remainder slope.
    pub bootstrap_level: f64,
    /// Relative residual allowed in the transposition duality checks.
    pub duality_rel_residual: f64,
    /// Relative RMSE allowed between regression and closed-form adjoints.
    pub adjoint_rel_rmse: f64,
    /// Multiple of the bootstrap standard error granted to maximum-principle
    /// gaps before they count as violations.
    pub smp_se_multiplier: f64,
    /// Relative gap allowed between the improved control's cost and the
    /// exhaustive-search optimum.
    pub improvement_rel_gap: f64,
}

/// `[output]`: where artifacts land.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    /// Output directory; created if absent.
    pub dir: String,
}

// ── The configuration ────────────────────────────────────────────────────

/// A complete experiment description (one TOML file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Spectral truncation.
    pub space: SpaceConfig,
    /// Time grid.
    pub grid: GridConfig,
    /// Population size.
    pub particles: ParticlesConfig,
    /// Initial law.
    pub initial: InitialCondition,
    /// Coefficient family and parameters.
    pub model: FamilySpec,
    /// Baseline control and admissible set.
    pub control: ControlConfig,
    /// Spike perturbation placement.
    pub spike: SpikeConfig,
    /// ε and seed sweep.
    pub sweep: SweepConfig,
    /// Assertion thresholds.
    pub tolerances: ToleranceConfig,
    /// Artifact destination.
    pub output: OutputConfig,
}

fn bad(path: &str, message: impl std::fmt::Display) -> Error {
    Error::Config(format!("{path}: {message}"))
}

fn require(ok: bool, path: &str, message: impl std::fmt::Display) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(bad(path, message))
    }
}

impl ExperimentConfig {
    /// Parse a TOML string.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Read and parse a TOML file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Serialize back to TOML (used to ship reference configurations and to
    /// embed the configuration in run manifests).
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize: {e}")))
    }

    /// Check every cross-field invariant, reporting the first violation by
    /// field path.
    pub fn validate(&self) -> Result<()> {
        let n = self.space.n_state;
        let nn = self.space.n_noise;
        require(n >= 1, "space.n_state", "need at least one retained mode")?;
        require(nn >= 1, "space.n_noise", "need at least one noise direction")?;
        require(
            self.space.eigenvalues.len() == n,
            "space.eigenvalues",
            format!("expected {} entries, got {}", n, self.space.eigenvalues.len()),
        )?;
        require(
            self.space.hs_weights.len() == nn,
            "space.hs_weights",
            format!("expected {} entries, got {}", nn, self.space.hs_weights.len()),
        )?;
        for (i, &l) in self.space.eigenvalues.iter().enumerate() {
            require(l.is_finite() && l <= 0.0, "space.eigenvalues", format!("entry {i} = {l} must be finite and ≤ 0"))?;
            if i > 0 {
                require(
                    l <= self.space.eigenvalues[i - 1],
                    "space.eigenvalues",
                    format!("entries must be non-increasing (entry {i})"),
                )?;
            }
        }
        for (j, &w) in self.space.hs_weights.iter().enumerate() {
            require(w.is_finite() && w > 0.0, "space.hs_weights", format!("entry {j} = {w} must be positive"))?;
        }

        require(
            self.grid.horizon.is_finite() && self.grid.horizon > 0.0,
            "grid.T",
            format!("horizon {} must be positive and finite", self.grid.horizon),
        )?;
        require(self.grid.steps >= 1, "grid.M", "need at least one time step")?;
        require(self.particles.count >= 2, "particles.N", "need at least two particles")?;

        match &self.initial {
            InitialCondition::Gaussian { mean, std } => {
                require(
                    mean.len() == n,
                    "initial.mean",
                    format!("expected {} entries, got {}", n, mean.len()),
                )?;
                require(mean.iter().all(|v| v.is_finite()), "initial.mean", "entries must be finite")?;
                require(std.is_finite() && *std >= 0.0, "initial.std", format!("{std} must be ≥ 0"))?;
            }
            InitialCondition::Deterministic { point } => {
                require(
                    point.len() == n,
                    "initial.point",
                    format!("expected {} entries, got {}", n, point.len()),
                )?;
                require(point.iter().all(|v| v.is_finite()), "initial.point", "entries must be finite")?;
            }
        }

        self.control.set.validate().map_err(|e| bad("control.set", e))?;
        require(
            self.control.set.contains(self.control.base),
            "control.base",
            format!("{} is not admissible", self.control.base),
        )?;
        require(
            self.control.set.contains(self.spike.control),
            "spike.control",
            format!("{} is not admissible", self.spike.control),
        )?;
        require(
            self.spike.offset >= 0.0 && self.spike.offset < self.grid.horizon,
            "spike.offset",
            format!("{} outside [0, T)", self.spike.offset),
        )?;

        require(!self.sweep.eps.is_empty(), "sweep.eps", "need at least one spike width")?;
        let dt = self.grid.horizon / self.grid.steps as f64;
        for (i, &e) in self.sweep.eps.iter().enumerate() {
            require(
                e.is_finite() && e > 0.0 && e <= self.grid.horizon,
                "sweep.eps",
                format!("entry {i} = {e} outside (0, T]"),
            )?;
            let n_steps = ((e / dt) - 1e-9).ceil().max(1.0) as usize;
            let first = (self.spike.offset / dt + 1e-9).floor() as usize;
            require(
                first + n_steps <= self.grid.steps,
                "sweep.eps",
                format!("entry {i} = {e}: window of {n_steps} steps at offset {} does not fit the grid", self.spike.offset),
            )?;
        }
        require(!self.sweep.seeds.is_empty(), "sweep.seeds", "need at least one seed")?;

        let t = &self.tolerances;
        for (path, v) in [
            ("tolerances.lift_rel_error", t.lift_rel_error),
            ("tolerances.duality_rel_residual", t.duality_rel_residual),
            ("tolerances.adjoint_rel_rmse", t.adjoint_rel_rmse),
            ("tolerances.smp_se_multiplier", t.smp_se_multiplier),
            ("tolerances.improvement_rel_gap", t.improvement_rel_gap),
        ] {
            require(v.is_finite() && v > 0.0, path, format!("{v} must be positive"))?;
        }
        require(
            t.fd_order_lo < t.fd_order_hi,
            "tolerances.fd_order_lo",
            "order window must be nonempty",
        )?;
        require(
            t.first_slope_lo < t.first_slope_hi,
            "tolerances.first_slope_lo",
            "slope window must be nonempty",
        )?;
        require(
            t.second_slope_lo < t.second_slope_hi,
            "tolerances.second_slope_lo",
            "slope window must be nonempty",
        )?;
        require(
            t.bootstrap_level > 0.0 && t.bootstrap_level < 1.0,
            "tolerances.bootstrap_level",
            format!("{} outside (0, 1)", t.bootstrap_level),
        )?;
        require(t.remainder_slope_min.is_finite(), "tolerances.remainder_slope_min", "must be finite")?;

        require(!self.output.dir.is_empty(), "output.dir", "must not be empty")?;

        // Family parameter shapes; deep coefficient validation happens in
        // the model constructor.
        match &self.model {
            FamilySpec::ScalarInteraction(p) => {
                require(
                    p.psi.len() == n,
                    "model.psi",
                    format!("expected {} entries, got {}", n, p.psi.len()),
                )?;
                require(
                    p.noise_profile.len() == nn,
                    "model.noise_profile",
                    format!("expected {} entries, got {}", nn, p.noise_profile.len()),
                )?;
            }
            FamilySpec::LinearQuadratic(p) => {
                require(
                    p.psi.len() == n,
                    "model.psi",
                    format!("expected {} entries, got {}", n, p.psi.len()),
                )?;
                require(
                    p.noise_profile.len() == nn,
                    "model.noise_profile",
                    format!("expected {} entries, got {}", nn, p.noise_profile.len()),
                )?;
            }
            FamilySpec::CustomTable(p) => {
                require(!p.schedule.is_empty(), "model.schedule", "must name a CSV file")?;
            }
        }
        Ok(())
    }

    /// The spectral space described by `[space]`.
    pub fn build_space(&self) -> Result<GalerkinSpace> {
        GalerkinSpace::new(self.space.eigenvalues.clone(), self.space.hs_weights.clone())
    }

    /// The coefficient model described by `[model]` (resolving a schedule
    /// CSV relative to `base_dir` when the family is table-driven).
    pub fn build_model(&self, space: &GalerkinSpace, base_dir: &Path) -> Result<CoefficientModel> {
        let spec = match &self.model {
            FamilySpec::CustomTable(p) if !Path::new(&p.schedule).is_absolute() => {
                let mut resolved = p.clone();
                resolved.schedule = base_dir.join(&p.schedule).to_string_lossy().into_owned();
                FamilySpec::CustomTable(resolved)
            }
            other => other.clone(),
        };
        CoefficientModel::new(space, spec, self.control.set.clone())
    }

    /// The time grid described by `[grid]`.
    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.horizon, self.grid.steps)
    }

    /// Effective spike widths after rounding each ε up to a whole number of
    /// steps, in sweep order.
    pub fn effective_eps(&self) -> Result<Vec<f64>> {
        let grid = self.time_grid()?;
        let dt = grid.dt();
        Ok(self
            .sweep
            .eps
            .iter()
            .map(|&e| (((e / dt) - 1e-9).ceil().max(1.0)) * dt)
            .collect())
    }
}

// ── Presets ──────────────────────────────────────────────────────────────

fn default_tolerances() -> ToleranceConfig {
    ToleranceConfig {
        lift_rel_error: 1e-4,
        fd_order_lo: 1.8,
        fd_order_hi: 2.2,
        first_slope_lo: 0.8,
        first_slope_hi: 1.2,
        second_slope_lo: 1.7,
        second_slope_hi: 2.3,
        remainder_slope_min: 2.0,
        bootstrap_level: 0.9,
        duality_rel_residual: 0.05,
        adjoint_rel_rmse: 0.05,
        smp_se_multiplier: 3.0,
        improvement_rel_gap: 0.02,
    }
}

fn default_sweep() -> SweepConfig {
    SweepConfig {
        eps: vec![0.125, 0.0625, 0.03125, 0.015625, 0.0078125],
        seeds: (1..=16).collect(),
    }
}

/// One-mode linear–quadratic benchmark: scalar state, scalar noise, box
/// controls.
pub fn preset_lq_1d() -> ExperimentConfig {
    use crate::coeffs::LinearQuadraticParams;
    ExperimentConfig {
        space: SpaceConfig {
            n_state: 1,
            n_noise: 1,
            eigenvalues: vec![-0.5],
            hs_weights: vec![1.0],
        },
        grid: GridConfig {
            horizon: 1.0,
            steps: 128,
        },
        particles: ParticlesConfig { count: 4096 },
        initial: InitialCondition::Gaussian {
            mean: vec![0.4],
            std: 0.3,
        },
        model: FamilySpec::LinearQuadratic(LinearQuadraticParams {
            psi: vec![1.0],
            drift_matrix: vec![vec![-0.5]],
            drift_mean_gain: 0.4,
            drift_mean_dir: vec![1.0],
            drift_control_gain: 1.0,
            drift_control_dir: vec![1.0],
            diffusion_const: vec![vec![0.2]],
            diffusion_matrix: vec![vec![0.3]],
            diffusion_mean_gain: 0.2,
            diffusion_mean_dir: vec![1.0],
            diffusion_control_gain: 0.4,
            diffusion_control_dir: vec![1.0],
            noise_profile: vec![1.0],
            running_state_quad: vec![vec![1.0]],
            running_mean_quad: 0.5,
            running_control_quad: 0.5,
            terminal_state_quad: vec![vec![1.0]],
            terminal_mean_quad: 0.3,
            terminal_linear: vec![],
        }),
        control: ControlConfig {
            base: 0.2,
            set: ControlSet::Box { lo: -1.0, hi: 1.0 },
        },
        spike: SpikeConfig {
            offset: 0.25,
            control: 0.8,
        },
        sweep: default_sweep(),
        tolerances: default_tolerances(),
        output: OutputConfig { dir: "out".into() },
    }
}

/// Two-mode linear–quadratic benchmark with two noise directions.
pub fn preset_lq_2d() -> ExperimentConfig {
    use crate::coeffs::LinearQuadraticParams;
    ExperimentConfig {
        space: SpaceConfig {
            n_state: 2,
            n_noise: 2,
            eigenvalues: vec![-0.5, -1.5],
            hs_weights: vec![1.0, 1.0],
        },
        grid: GridConfig {
            horizon: 1.0,
            steps: 128,
        },
        particles: ParticlesConfig { count: 4096 },
        initial: InitialCondition::Gaussian {
            mean: vec![0.4, -0.2],
            std: 0.3,
        },
        model: FamilySpec::LinearQuadratic(LinearQuadraticParams {
            psi: vec![1.0, 0.0],
            drift_matrix: vec![vec![-0.2, 0.1], vec![0.0, -0.3]],
            drift_mean_gain: 0.4,
            drift_mean_dir: vec![1.0, 0.5],
            drift_control_gain: 0.7,
            drift_control_dir: vec![1.0, 0.0],
            diffusion_const: vec![vec![0.25, 0.05], vec![0.0, 0.2]],
            diffusion_matrix: vec![vec![0.15, 0.0], vec![0.1, 0.1]],
            diffusion_mean_gain: 0.3,
            diffusion_mean_dir: vec![0.5, 1.0],
            diffusion_control_gain: 0.45,
            diffusion_control_dir: vec![0.0, 1.0],
            noise_profile: vec![1.0, 0.8],
            running_state_quad: vec![vec![1.0, 0.2], vec![0.2, 0.8]],
            running_mean_quad: 0.6,
            running_control_quad: 0.5,
            terminal_state_quad: vec![vec![0.9, -0.1], vec![-0.1, 1.1]],
            terminal_mean_quad: 0.4,
            terminal_linear: vec![],
        }),
        control: ControlConfig {
            base: 0.2,
            set: ControlSet::Box { lo: -1.0, hi: 1.0 },
        },
        spike: SpikeConfig {
            offset: 0.25,
            control: 0.8,
        },
        sweep: default_sweep(),
        tolerances: default_tolerances(),
        output: OutputConfig { dir: "out".into() },
    }
}

/// Two-mode saturated (tanh-coupled) benchmark: fully nonlinear drift,
/// diffusion, and costs with bounded derivatives of every order.
pub fn preset_saturated_2d() -> ExperimentConfig {
    use crate::coeffs::ScalarInteractionParams;
    ExperimentConfig {
        space: SpaceConfig {
            n_state: 2,
            n_noise: 2,
            eigenvalues: vec![-0.5, -1.5],
            hs_weights: vec![1.0, 1.0],
        },
        grid: GridConfig {
            horizon: 1.0,
            steps: 128,
        },
        particles: ParticlesConfig { count: 4096 },
        initial: InitialCondition::Gaussian {
            mean: vec![0.4, -0.2],
            std: 0.3,
        },
        model: FamilySpec::ScalarInteraction(ScalarInteractionParams {
            psi: vec![1.0, 0.5],
            drift_matrix: vec![vec![-0.3, 0.2], vec![0.1, -0.4]],
            drift_mean_gain: 0.8,
            drift_mean_rate: 1.3,
            drift_mean_state_gain: 0.6,
            drift_mean_state_dir: vec![0.7, -0.2],
            drift_mean_dir: vec![1.0, 0.3],
            drift_control_state_gain: 0.5,
            drift_control_state_dir: vec![0.4, 0.6],
            drift_control_dir: vec![0.2, 1.0],
            diffusion_const: vec![vec![0.3, 0.0], vec![0.1, 0.2]],
            diffusion_matrix: vec![vec![0.2, -0.1], vec![0.0, 0.3]],
            diffusion_mean_gain: 0.5,
            diffusion_mean_rate: 0.9,
            diffusion_mean_state_gain: 0.4,
            diffusion_mean_state_dir: vec![-0.3, 0.5],
            diffusion_mean_dir: vec![0.6, -0.4],
            diffusion_control_state_gain: 0.7,
            diffusion_control_state_dir: vec![0.2, -0.5],
            diffusion_control_dir: vec![0.5, 0.5],
            noise_profile: vec![1.0, 0.6],
            running_state_weight: 0.7,
            running_state_dir: vec![0.5, 0.3],
            running_mean_weight: 0.4,
            running_mean_rate: 1.1,
            running_control_weight: 0.25,
            running_cross_weight: 0.3,
            terminal_state_weight: 0.6,
            terminal_state_dir: vec![0.2, 0.8],
            terminal_mean_weight: 0.5,
            terminal_mean_rate: 0.8,
            terminal_cross_weight: 0.2,
        }),
        control: ControlConfig {
            base: 0.2,
            set: ControlSet::Box { lo: -1.0, hi: 1.0 },
        },
        spike: SpikeConfig {
            offset: 0.25,
            control: 0.9,
        },
        sweep: default_sweep(),
        tolerances: default_tolerances(),
        output: OutputConfig { dir: "out".into() },
    }
}

/// Tiny scalar linear–quadratic instance on a 9-point control grid with six
/// time steps — small enough that exhaustive search over every
/// piecewise-constant grid-valued control is feasible, which is what the
/// control-improvement loop is audited against.
pub fn preset_lq_tiny_grid() -> ExperimentConfig {
    let mut cfg = preset_lq_1d();
    cfg.grid.steps = 6;
    cfg.control = ControlConfig {
        base: 0.25,
        set: ControlSet::FiniteGrid {
            points: vec![-1.0, -0.75, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0],
        },
    };
    cfg.spike = SpikeConfig {
        offset: 1.0 / 3.0,
        control: 0.75,
    };
    cfg.sweep = SweepConfig {
        eps: vec![1.0 / 6.0],
        seeds: (1..=8).collect(),
    };
    cfg
}

/// Every shipped preset by name, in the order they are documented.
pub const PRESET_NAMES: [&str; 4] = ["lq_1d", "lq_2d", "saturated_2d", "lq_tiny_grid"];

/// Look up a preset by name.
pub fn preset(name: &str) -> Option<ExperimentConfig> {
    match name {
        "lq_1d" => Some(preset_lq_1d()),
        "lq_2d" => Some(preset_lq_2d()),
        "saturated_2d" => Some(preset_saturated_2d()),
        "lq_tiny_grid" => Some(preset_lq_tiny_grid()),
        _ => None,
    }
}
