//! Particle representation of laws on the state space.
//!
//! A law μ ∈ 𝒫₂(H) is carried as an ensemble of N equally-weighted samples
//! (the empirical measure). Expectations over *independent copies* of the
//! population — the Ẽ[·] and Ê[·] averages that appear in mean-field
//! equations, taken on separate probability spaces — are realized by
//! uniformly permuting the particle indices: the permuted cloud has the same
//! empirical law (identical multiset) but a pairing with the base cloud that
//! carries no information, which is exactly the N-particle estimator of an
//! independent coupling.
//!
//! The module also provides Wasserstein-2 diagnostics between ensembles:
//!
//! - `n_state = 1`: exact optimal transport via sorted pairing (the monotone
//!   coupling is optimal for convex costs on the line);
//! - `n_state > 1`, `N ≤ 256`: the exact assignment-problem value, computed
//!   with the Jonker–Volgenant / Hungarian shortest-augmenting-path scheme in
//!   O(N³);
//! - larger N: a sliced estimate (average of one-dimensional distances over a
//!   fixed set of random projection directions), clearly labeled as such.
//!
//! Distances are diagnostics only; the dynamics never depend on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{RngStream, SeedSplitter, StreamDomain};
use crate::space::{GalerkinSpace, StateVector};

/// Which probability-space copy an ensemble represents.
///
/// The base space carries the state; `Tilde` and `Hat` are the two
/// independent copies that mean-field expectations are taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CopyTag {
    /// The original probability space.
    Base,
    /// First independent copy (Ẽ-averages).
    Tilde,
    /// Second independent copy (Ê-averages).
    Hat,
}

/// An empirical law: N equally-weighted particles plus its copy tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    particles: Vec<StateVector>,
    copy_tag: CopyTag,
}

impl ParticleEnsemble {
    /// Build an ensemble, validating conformance with `space` and finiteness
    /// of the empirical second moment (entrywise finiteness).
    pub fn new(space: &GalerkinSpace, particles: Vec<StateVector>, copy_tag: CopyTag) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::domain("ParticleEnsemble::new", "need N >= 1 particles"));
        }
        for p in &particles {
            if p.dim() != space.n_state() {
                return Err(Error::DimensionMismatch {
                    context: "ParticleEnsemble::new",
                    expected: space.n_state(),
                    actual: p.dim(),
                });
            }
            if !crate::linalg::all_finite(&p.coords) {
                return Err(Error::domain("ParticleEnsemble::new", "non-finite particle"));
            }
        }
        Ok(ParticleEnsemble { particles, copy_tag })
    }

    /// Construct without a space at hand (internal fast path; used by solvers
    /// that already guarantee conformance).
    pub(crate) fn from_particles(particles: Vec<StateVector>, copy_tag: CopyTag) -> Self {
        ParticleEnsemble { particles, copy_tag }
    }

    /// Number of particles N.
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    /// True when the ensemble holds a single particle.
    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// The particles (equal weights 1/N).
    pub fn particles(&self) -> &[StateVector] {
        &self.particles
    }

    /// Which probability-space copy this ensemble represents.
    pub fn copy_tag(&self) -> CopyTag {
        self.copy_tag
    }

    /// The scalar interaction statistic `m(μ) = (1/N) Σᵢ ⟨ψ, xᵢ⟩` — the mean
    /// of the linear functional ⟨ψ, ·⟩ under the empirical law.
    pub fn empirical_mean_statistic(&self, psi: &StateVector) -> Result<f64> {
        let n_state = self.particles[0].dim();
        if psi.dim() != n_state {
            return Err(Error::DimensionMismatch {
                context: "empirical_mean_statistic",
                expected: n_state,
                actual: psi.dim(),
            });
        }
        let sum: f64 = self.particles.iter().map(|x| x.inner(psi)).sum();
        Ok(sum / self.particles.len() as f64)
    }

    /// Coordinatewise empirical mean.
    pub fn mean(&self) -> StateVector {
        let n = self.particles[0].dim();
        let mut mean = vec![0.0; n];
        for p in &self.particles {
            crate::linalg::axpy(1.0, &p.coords, &mut mean);
        }
        crate::linalg::scale(1.0 / self.particles.len() as f64, &mut mean);
        StateVector::from_coords(mean)
    }

    /// Empirical second moment `(1/N) Σᵢ ‖xᵢ‖²`.
    pub fn second_moment(&self) -> f64 {
        self.particles.iter().map(|p| p.norm_sq()).sum::<f64>() / self.particles.len() as f64
    }

    /// An independent copy of the population: the same multiset of particles
    /// under a uniform random index permutation, tagged `tag`.
    ///
    /// Marginal (permutation-invariant) statistics are preserved exactly;
    /// the pairing with the base indices is uninformative, which is the
    /// N-particle realization of sampling on an independent probability
    /// space.
    pub fn spawn_independent_copy(&self, tag: CopyTag, stream: &mut RngStream) -> Result<ParticleEnsemble> {
        if tag == self.copy_tag {
            return Err(Error::domain(
                "spawn_independent_copy",
                format!("copy tag collision: ensemble already tagged {tag:?}"),
            ));
        }
        let mut indices: Vec<usize> = (0..self.particles.len()).collect();
        stream.shuffle(&mut indices);
        let particles = indices.into_iter().map(|i| self.particles[i].clone()).collect();
        Ok(ParticleEnsemble { particles, copy_tag: tag })
    }

    /// CSV snapshot (header `x0,x1,…`, one row per particle) for debugging.
    pub fn to_csv_string(&self) -> String {
        let n = self.particles[0].dim();
        let mut out = String::new();
        let header: Vec<String> = (0..n).map(|k| format!("x{k}")).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for p in &self.particles {
            let row: Vec<String> = p.coords.iter().map(|v| format!("{v:.17e}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// How a Wasserstein-2 value was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum W2Method {
    /// Sorted pairing on the line (exact).
    Exact1d,
    /// Exact optimal assignment (Hungarian / Jonker–Volgenant).
    ExactAssignment,
    /// Sliced estimate over the recorded number of projection directions.
    Sliced { directions: usize },
}

/// A Wasserstein-2 distance together with the method that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct W2Report {
    /// The distance value (not squared).
    pub value: f64,
    /// Exact or sliced, as applicable.
    pub method: W2Method,
}

/// Particle count up to which the exact O(N³) assignment is used in
/// dimension > 1.
pub const W2_EXACT_ASSIGNMENT_MAX_N: usize = 256;

/// Number of projection directions in the sliced estimate.
pub const W2_SLICED_DIRECTIONS: usize = 128;

/// Wasserstein-2 distance between two equally-sized ensembles.
///
/// For equal-weight empirical measures with the same N, the optimal coupling
/// is an assignment (a permutation), so `W₂² = min_π (1/N) Σᵢ ‖xᵢ − y_{π(i)}‖²`.
pub fn wasserstein2(mu: &ParticleEnsemble, nu: &ParticleEnsemble) -> Result<W2Report> {
    if mu.len() != nu.len() {
        return Err(Error::domain(
            "wasserstein2",
            format!(
                "unequal particle counts {} vs {} (resampling is the caller's job)",
                mu.len(),
                nu.len()
            ),
        ));
    }
    let dim = mu.particles()[0].dim();
    if dim != nu.particles()[0].dim() {
        return Err(Error::DimensionMismatch {
            context: "wasserstein2",
            expected: dim,
            actual: nu.particles()[0].dim(),
        });
    }
    let n = mu.len();
    if dim == 1 {
        let mut a: Vec<f64> = mu.particles().iter().map(|p| p.coords[0]).collect();
        let mut b: Vec<f64> = nu.particles().iter().map(|p| p.coords[0]).collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let sq: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
        return Ok(W2Report {
            value: sq.sqrt(),
            method: W2Method::Exact1d,
        });
    }
    if n <= W2_EXACT_ASSIGNMENT_MAX_N {
        let mut cost = vec![0.0; n * n];
        for (i, x) in mu.particles().iter().enumerate() {
            for (j, y) in nu.particles().iter().enumerate() {
                cost[i * n + j] = x.minus(y).norm_sq();
            }
        }
        let sq = assignment_min_cost(&cost, n) / n as f64;
        return Ok(W2Report {
            value: sq.sqrt(),
            method: W2Method::ExactAssignment,
        });
    }
    // Sliced estimate: average the squared 1-d distances of the projections
    // over a fixed, deterministic set of random unit directions.
    let splitter = SeedSplitter::new(0x57A5_5E12_57A5_5E12);
    let mut acc = 0.0;
    for d in 0..W2_SLICED_DIRECTIONS {
        let mut stream = splitter.stream(StreamDomain::TestData, d as u64, dim as u64);
        let mut dir = vec![0.0; dim];
        loop {
            for v in dir.iter_mut() {
                *v = stream.standard_normal();
            }
            let norm = crate::linalg::norm(&dir);
            if norm > 1e-12 {
                crate::linalg::scale(1.0 / norm, &mut dir);
                break;
            }
        }
        let mut a: Vec<f64> = mu.particles().iter().map(|p| crate::linalg::dot(&p.coords, &dir)).collect();
        let mut b: Vec<f64> = nu.particles().iter().map(|p| crate::linalg::dot(&p.coords, &dir)).collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        acc += a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
    }
    Ok(W2Report {
        value: (acc / W2_SLICED_DIRECTIONS as f64).sqrt(),
        method: W2Method::Sliced {
            directions: W2_SLICED_DIRECTIONS,
        },
    })
}

/// Minimum-cost perfect assignment on a dense `n×n` cost matrix (row-major):
/// the Hungarian algorithm in its successive-shortest-augmenting-path form
/// with dual potentials, O(n³).
///
/// Returns the minimal total cost `Σᵢ C[i, π(i)]`.
pub(crate) fn assignment_min_cost(cost: &[f64], n: usize) -> f64 {
    debug_assert_eq!(cost.len(), n * n);
    // 1-based arrays with a virtual column 0, following the classical
    // formulation (potentials u on rows, v on columns, p[j] = row matched to
    // column j, way[j] = predecessor column on the augmenting path).
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // Unwind the augmenting path.
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| cost[(p[j] - 1) * n + (j - 1)]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{SeedSplitter, StreamDomain};
    use approx::assert_relative_eq;

    fn space(n: usize) -> GalerkinSpace {
        GalerkinSpace::new(vec![-1.0; n], vec![1.0]).unwrap()
    }

    fn ens(space: &GalerkinSpace, rows: &[&[f64]]) -> ParticleEnsemble {
        ParticleEnsemble::new(
            space,
            rows.iter().map(|r| StateVector::from_coords(r.to_vec())).collect(),
            CopyTag::Base,
        )
        .unwrap()
    }

    #[test]
    fn mean_statistic_trivial_cases() {
        let sp = space(2);
        let zeros = ens(&sp, &[&[0.0, 0.0], &[0.0, 0.0]]);
        let psi = StateVector::from_coords(vec![1.0, 0.0]);
        assert_eq!(zeros.empirical_mean_statistic(&psi).unwrap(), 0.0);

        let two = ens(&sp, &[&[1.0, 0.0], &[3.0, 0.0]]);
        assert_eq!(two.empirical_mean_statistic(&psi).unwrap(), 2.0);
    }

    #[test]
    fn mean_statistic_matches_naive_loop() {
        let sp = space(3);
        let splitter = SeedSplitter::new(77);
        let mut stream = splitter.stream(StreamDomain::TestData, 0, 0);
        let particles: Vec<StateVector> = (0..57)
            .map(|_| StateVector::from_coords((0..3).map(|_| stream.standard_normal()).collect()))
            .collect();
        let psi = StateVector::from_coords(vec![0.3, -1.2, 2.0]);
        let e = ParticleEnsemble::new(&sp, particles.clone(), CopyTag::Base).unwrap();
        let mut naive = 0.0;
        for p in &particles {
            let mut s = 0.0;
            for k in 0..3 {
                s += psi.coords[k] * p.coords[k];
            }
            naive += s;
        }
        naive /= particles.len() as f64;
        assert_relative_eq!(e.empirical_mean_statistic(&psi).unwrap(), naive, max_relative = 1e-14);
    }

    #[test]
    fn wasserstein_identity_and_dirac() {
        let sp = space(2);
        let a = ens(&sp, &[&[1.0, 2.0], &[0.0, -1.0]]);
        let r = wasserstein2(&a, &a).unwrap();
        assert!(r.value < 1e-12, "identical ensembles -> 0, got {}", r.value);

        let x = ens(&sp, &[&[0.0, 0.0]]);
        let y = ens(&sp, &[&[3.0, 4.0]]);
        let r = wasserstein2(&x, &y).unwrap();
        assert_relative_eq!(r.value, 5.0, max_relative = 1e-12);
        assert_eq!(r.method, W2Method::ExactAssignment);
    }

    #[test]
    fn wasserstein_1d_two_point_example() {
        // μ = {0, 1}, ν = {1, 2}: both couplings cost the same, W₂ = 1.
        let sp = space(1);
        let mu = ens(&sp, &[&[0.0], &[1.0]]);
        let nu = ens(&sp, &[&[1.0], &[2.0]]);
        let r = wasserstein2(&mu, &nu).unwrap();
        assert_relative_eq!(r.value, 1.0, max_relative = 1e-12);
        assert_eq!(r.method, W2Method::Exact1d);
    }

    #[test]
    fn wasserstein_rejects_unequal_counts() {
        let sp = space(1);
        let a = ens(&sp, &[&[0.0]]);
        let b = ens(&sp, &[&[0.0], &[1.0]]);
        assert!(wasserstein2(&a, &b).is_err());
    }

    /// Brute-force minimum over all permutations (oracle for small N).
    fn brute_force_w2_sq(mu: &ParticleEnsemble, nu: &ParticleEnsemble) -> f64 {
        fn permutations(n: usize) -> Vec<Vec<usize>> {
            if n == 1 {
                return vec![vec![0]];
            }
            let mut out = Vec::new();
            for p in permutations(n - 1) {
                for pos in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(pos, n - 1);
                    out.push(q);
                }
            }
            out
        }
        let n = mu.len();
        let mut best = f64::INFINITY;
        for perm in permutations(n) {
            let c: f64 = (0..n)
                .map(|i| mu.particles()[i].minus(&nu.particles()[perm[i]]).norm_sq())
                .sum();
            best = best.min(c);
        }
        best / n as f64
    }

    #[test]
    fn exact_assignment_matches_brute_force() {
        let sp = space(3);
        let splitter = SeedSplitter::new(1234);
        for case in 0..20u64 {
            let mut stream = splitter.stream(StreamDomain::TestData, case, 0);
            let n = 2 + (case % 5) as usize; // N in 2..=6
            let draw = |s: &mut crate::rng::RngStream| {
                StateVector::from_coords((0..3).map(|_| s.standard_normal()).collect())
            };
            let mu = ParticleEnsemble::new(&sp, (0..n).map(|_| draw(&mut stream)).collect(), CopyTag::Base).unwrap();
            let nu = ParticleEnsemble::new(&sp, (0..n).map(|_| draw(&mut stream)).collect(), CopyTag::Base).unwrap();
            let exact = wasserstein2(&mu, &nu).unwrap();
            let oracle = brute_force_w2_sq(&mu, &nu).sqrt();
            assert_relative_eq!(exact.value, oracle, max_relative = 1e-10);
        }
    }

    #[test]
    fn sliced_mode_engages_beyond_exact_cutoff_and_is_sane() {
        let sp = space(2);
        let splitter = SeedSplitter::new(5150);
        let mut stream = splitter.stream(StreamDomain::TestData, 0, 0);
        let n = W2_EXACT_ASSIGNMENT_MAX_N + 16;
        let shift = [2.0, -1.0];
        let mu_particles: Vec<StateVector> = (0..n)
            .map(|_| StateVector::from_coords(vec![stream.standard_normal(), stream.standard_normal()]))
            .collect();
        let nu_particles: Vec<StateVector> = mu_particles
            .iter()
            .map(|p| StateVector::from_coords(vec![p.coords[0] + shift[0], p.coords[1] + shift[1]]))
            .collect();
        let mu = ParticleEnsemble::new(&sp, mu_particles, CopyTag::Base).unwrap();
        let nu = ParticleEnsemble::new(&sp, nu_particles, CopyTag::Base).unwrap();
        let r = wasserstein2(&mu, &nu).unwrap();
        assert_eq!(
            r.method,
            W2Method::Sliced {
                directions: W2_SLICED_DIRECTIONS
            }
        );
        // For a pure translation the sliced value underestimates ‖shift‖ by
        // the mean of |⟨shift, θ⟩|² over directions ≈ ‖shift‖²/dim; with the
        // squared-slice average it concentrates near ‖shift‖/√dim.
        let expected = (shift[0] * shift[0] + shift[1] * shift[1]).sqrt() / (2.0f64).sqrt();
        assert!(
            (r.value - expected).abs() < 0.2 * expected,
            "sliced value {} vs concentration target {expected}",
            r.value
        );
    }

    #[test]
    fn copy_preserves_multiset_and_rejects_collision() {
        let sp = space(2);
        let e = ens(&sp, &[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let splitter = SeedSplitter::new(3);
        let mut stream = splitter.stream(StreamDomain::CopyPermutation, 0, 0);
        let copy = e.spawn_independent_copy(CopyTag::Tilde, &mut stream).unwrap();
        assert_eq!(copy.copy_tag(), CopyTag::Tilde);
        let mut orig: Vec<Vec<u64>> = e
            .particles()
            .iter()
            .map(|p| p.coords.iter().map(|x| x.to_bits()).collect())
            .collect();
        let mut perm: Vec<Vec<u64>> = copy
            .particles()
            .iter()
            .map(|p| p.coords.iter().map(|x| x.to_bits()).collect())
            .collect();
        orig.sort();
        perm.sort();
        assert_eq!(orig, perm, "copy must preserve the particle multiset exactly");
        assert!(e.spawn_independent_copy(CopyTag::Base, &mut stream).is_err());

        // Permutation-invariant statistics agree bit-for-bit is too strong for
        // reordered summation; they agree to tight tolerance.
        let psi = StateVector::from_coords(vec![1.0, -0.5]);
        assert_relative_eq!(
            e.empirical_mean_statistic(&psi).unwrap(),
            copy.empirical_mean_statistic(&psi).unwrap(),
            max_relative = 1e-14
        );
        assert_relative_eq!(e.second_moment(), copy.second_moment(), max_relative = 1e-14);
    }

    #[test]
    fn single_particle_copy_is_identity() {
        let sp = space(1);
        let e = ens(&sp, &[&[7.0]]);
        let splitter = SeedSplitter::new(3);
        let mut stream = splitter.stream(StreamDomain::CopyPermutation, 0, 0);
        let c = e.spawn_independent_copy(CopyTag::Hat, &mut stream).unwrap();
        assert_eq!(c.particles()[0].coords, vec![7.0]);
    }

    #[test]
    fn independent_copy_decorrelates_pairings() {
        // For a Gaussian cloud, the pair (xᵢ, x̃ᵢ) over repeated spawns should
        // have correlation ≈ 0 (independent coupling), within 5 standard
        // errors; SE ≈ 1/√(#samples).
        let sp = space(1);
        let splitter = SeedSplitter::new(99);
        let mut gen = splitter.stream(StreamDomain::TestData, 0, 0);
        let n = 64usize;
        let particles: Vec<StateVector> =
            (0..n).map(|_| StateVector::from_coords(vec![gen.standard_normal()])).collect();
        let e = ParticleEnsemble::new(&sp, particles, CopyTag::Base).unwrap();
        let mean = e.mean().coords[0];
        let var = e.second_moment() - mean * mean;

        let spawns = 400usize;
        let mut corr_acc = 0.0;
        for s in 0..spawns {
            let mut stream = splitter.stream(StreamDomain::CopyPermutation, s as u64, 0);
            let c = e.spawn_independent_copy(CopyTag::Tilde, &mut stream).unwrap();
            let mut cross = 0.0;
            for (x, y) in e.particles().iter().zip(c.particles()) {
                cross += (x.coords[0] - mean) * (y.coords[0] - mean);
            }
            corr_acc += cross / (n as f64 * var);
        }
        let total = (spawns * n) as f64;
        let corr = corr_acc / spawns as f64;
        let se = 1.0 / total.sqrt();
        // Uniform permutations retain fixed points at rate 1/N, producing a
        // small positive self-coupling bias of about 1/(N-1) after centering;
        // allow for it explicitly.
        let bias_allowance = 1.5 / (n as f64 - 1.0);
        assert!(
            corr.abs() < bias_allowance + 5.0 * se,
            "pairing correlation {corr} exceeds bias {bias_allowance} + 5·SE {se}"
        );
    }
}
