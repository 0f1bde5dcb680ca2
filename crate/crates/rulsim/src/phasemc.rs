//! Spectrally promoted random evolution: unitaries that are diagonal in a
//! fixed eigenbasis with stochastic phases per eigenvalue group,
//!
//! ```text
//! U(t) = Σ_a e^{-i(drift_a·t + X_{g(a)}(t))} |a⟩⟨a|,
//! X_g(t) = Σ_ch coeff[g][ch] · ∫₀ᵗ kernel_ch(s) dB_ch(s),
//! ```
//!
//! with channel Brownian motions correlated by a `CorrelationSpec`. Because
//! every trajectory is a Hadamard phase mask on ρ̃0 = B†ρ0B, sampling and
//! averaging run on the nonzero support of ρ̃0 only. The same structure
//! yields the closed-form average: entries damped by e^{-Λ_ab(t)/2} with
//! Λ_ab the variance of the phase difference.

use num_complex::Complex64;

use crate::ensemble::{pairwise_monte_carlo, Accumulate, EnsembleConfig, EnsembleResult, SeriesStats};
use crate::error::{Error, Result};
use crate::linalg::{c64, identity, max_abs, CMat, DensityMatrix, HermitianOperator};
use crate::noise::{CorrelatedIncrements, CorrelationSpec, NoiseKernel, TimeGrid};

use std::collections::BTreeMap;
use std::ops::Range;

/// Relative magnitude below which initial-state entries are treated as zero
/// support (they stay zero along every trajectory up to this threshold).
const SUPPORT_THRESHOLD: f64 = 1e-13;

#[derive(Debug, Clone)]
pub struct PhasePromotion {
    basis: CMat,
    col_drift: Vec<f64>,
    col_group: Vec<usize>,
    n_groups: usize,
    /// groups × channels noise coefficients.
    coeff: Vec<Vec<f64>>,
    kernels: Vec<NoiseKernel>,
    correlation: CorrelationSpec,
}

impl PhasePromotion {
    /// `basis` columns must be orthonormal; `col_group[a]` selects the row of
    /// `coeff` whose mixed channel noises drive column a's phase.
    pub fn new(
        basis: CMat,
        col_drift: Vec<f64>,
        col_group: Vec<usize>,
        coeff: Vec<Vec<f64>>,
        kernels: Vec<NoiseKernel>,
        correlation: CorrelationSpec,
    ) -> Result<Self> {
        let dim = basis.nrows();
        if basis.ncols() != dim {
            return Err(Error::NotSquare {
                rows: basis.nrows(),
                cols: basis.ncols(),
            });
        }
        let gram = max_abs(&(basis.adjoint() * &basis - identity(dim)));
        if gram > 1e-10 {
            return Err(Error::SpectralInvariant {
                property: "basis orthonormality",
                residual: gram,
            });
        }
        if col_drift.len() != dim || col_group.len() != dim {
            return Err(Error::DimensionMismatch {
                left: dim,
                right: col_drift.len().min(col_group.len()),
            });
        }
        let n_groups = coeff.len();
        if col_group.iter().any(|&g| g >= n_groups) {
            return Err(Error::InvalidParameter {
                reason: "column group index out of range".into(),
            });
        }
        let n_channels = kernels.len();
        if correlation.dim() != n_channels || coeff.iter().any(|row| row.len() != n_channels) {
            return Err(Error::DimensionMismatch {
                left: n_channels,
                right: correlation.dim(),
            });
        }
        Ok(PhasePromotion {
            basis,
            col_drift,
            col_group,
            n_groups,
            coeff,
            kernels,
            correlation,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn basis(&self) -> &CMat {
        &self.basis
    }

    /// Variance rate quadratic form between two groups:
    /// q_gh = (c_g - c_h)ᵀ g (c_g - c_h), so Λ = q · λ(t) for a shared kernel.
    fn phase_difference_quadratic(&self, ga: usize, gb: usize) -> f64 {
        let g = self.correlation.matrix();
        let ca = &self.coeff[ga];
        let cb = &self.coeff[gb];
        let n = ca.len();
        let mut q = 0.0;
        for i in 0..n {
            let di = ca[i] - cb[i];
            if di == 0.0 {
                continue;
            }
            for j in 0..n {
                let dj = ca[j] - cb[j];
                q += di * dj * g[(i, j)];
            }
        }
        q
    }

    fn shared_kernel(&self) -> Result<&NoiseKernel> {
        let first = self.kernels.first().ok_or(Error::InvalidParameter {
            reason: "promotion has no noise channels".into(),
        })?;
        if self.kernels.iter().any(|k| k != first) {
            return Err(Error::InvalidParameter {
                reason: "closed form requires one shared kernel across channels".into(),
            });
        }
        Ok(first)
    }

    /// Closed-form averaged state
    /// ρ(t) = Σ_ab e^{-i(drift_a - drift_b)t - Λ_ab(t)/2} P_a ρ0 P_b,
    /// valid when all channels share one kernel. The damping mask e^{-Λ/2}
    /// is checked to be PSD (as a group-indexed matrix) before use.
    pub fn closed_form_state(&self, rho0: &DensityMatrix, t: f64) -> Result<DensityMatrix> {
        let dim = self.dim();
        if rho0.dim() != dim {
            return Err(Error::DimensionMismatch {
                left: dim,
                right: rho0.dim(),
            });
        }
        let lambda = self.shared_kernel()?.lambda(t)?;

        let mut mask = nalgebra::DMatrix::<f64>::zeros(self.n_groups, self.n_groups);
        for ga in 0..self.n_groups {
            for gb in 0..self.n_groups {
                mask[(ga, gb)] = (-0.5 * lambda * self.phase_difference_quadratic(ga, gb)).exp();
            }
        }
        let min_ev = mask
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_ev < -1e-10 {
            return Err(Error::InvalidCorrelation {
                reason: format!("damping mask e^(-Λ/2) is not PSD: min eigenvalue {min_ev:.3e}"),
            });
        }

        let rho_tilde = self.basis.adjoint() * rho0.matrix() * &self.basis;
        let mut evolved = CMat::zeros(dim, dim);
        for a in 0..dim {
            for b in 0..dim {
                let angle = (self.col_drift[a] - self.col_drift[b]) * t;
                let damp = mask[(self.col_group[a], self.col_group[b])];
                evolved[(a, b)] =
                    rho_tilde[(a, b)] * Complex64::from_polar(damp, -angle);
            }
        }
        DensityMatrix::new(&self.basis * evolved * self.basis.adjoint())
    }

    /// Monte Carlo average over `config.n_trajectories` phase trajectories.
    /// Observables are evaluated on every grid point; mean states (with a
    /// max-entry standard error measured in the promotion eigenbasis) are
    /// stored every `state_stride` points, endpoints always included.
    /// Deterministic for any worker count.
    pub fn monte_carlo(
        &self,
        rho0: &DensityMatrix,
        config: &EnsembleConfig,
        observables: &[(String, HermitianOperator)],
        state_stride: usize,
    ) -> Result<EnsembleResult> {
        let dim = self.dim();
        if rho0.dim() != dim {
            return Err(Error::DimensionMismatch {
                left: dim,
                right: rho0.dim(),
            });
        }
        let grid = config.grid;
        let n_points = grid.n_points();

        let rho_tilde = self.basis.adjoint() * rho0.matrix() * &self.basis;
        let scale = max_abs(&rho_tilde);
        let mut support: Vec<SupportEntry> = Vec::new();
        for a in 0..dim {
            for b in 0..dim {
                let value = rho_tilde[(a, b)];
                if value.norm() > SUPPORT_THRESHOLD * scale {
                    support.push(SupportEntry {
                        row: a,
                        col: b,
                        base: value,
                        drift: self.col_drift[a] - self.col_drift[b],
                        group_row: self.col_group[a],
                        group_col: self.col_group[b],
                        weights: Vec::new(),
                    });
                }
            }
        }
        // per-observable weights w = ρ̃0_ab · Õ_ba so that each trajectory's
        // contribution is Re(w · e^{-iθ})
        for (_, op) in observables {
            let op_tilde = self.basis.adjoint() * op.matrix() * &self.basis;
            for entry in &mut support {
                entry
                    .weights
                    .push(entry.base * op_tilde[(entry.col, entry.row)]);
            }
        }

        let state_indices: Vec<usize> = (0..n_points)
            .filter(|&k| {
                k == 0 || k == grid.n_steps() || (state_stride > 0 && k % state_stride == 0)
            })
            .collect();
        let slot_of_point: BTreeMap<usize, usize> = state_indices
            .iter()
            .enumerate()
            .map(|(slot, &k)| (k, slot))
            .collect();

        let factor = self.correlation.factor();
        let n_channels = self.kernels.len();
        let n_obs = observables.len();
        let kernel_at: Vec<Vec<f64>> = {
            // kernel values at left points, shared by every trajectory
            let mut per_channel = Vec::with_capacity(n_channels);
            for kernel in &self.kernels {
                let mut vals = Vec::with_capacity(grid.n_steps());
                for k in 0..grid.n_steps() {
                    vals.push(kernel.value(grid.time(k))?);
                }
                per_channel.push(vals);
            }
            per_channel
        };

        let work = |range: Range<u64>| -> Result<PatternAccumulator> {
            let mut acc = PatternAccumulator::new(support.len(), state_indices.len(), n_obs, n_points);
            let mut channel_noise = vec![0.0f64; n_channels];
            let mut increments = vec![0.0f64; n_channels];
            let mut group_phase = vec![0.0f64; self.n_groups];
            let mut obs_point = vec![0.0f64; n_obs];
            for traj in range {
                let mut correlated =
                    CorrelatedIncrements::new(factor.clone(), config.master_seed, traj, grid);
                channel_noise.iter_mut().for_each(|x| *x = 0.0);
                for k in 0..n_points {
                    if k > 0 {
                        correlated.next_increments(&mut increments);
                        for ch in 0..n_channels {
                            channel_noise[ch] += kernel_at[ch][k - 1] * increments[ch];
                        }
                    }
                    for (g, phase) in group_phase.iter_mut().enumerate() {
                        let mut x = 0.0;
                        for (ch, noise) in channel_noise.iter().enumerate() {
                            x += self.coeff[g][ch] * noise;
                        }
                        *phase = x;
                    }
                    let t = grid.time(k);
                    let state_slot = slot_of_point.get(&k).copied();
                    obs_point.iter_mut().for_each(|x| *x = 0.0);
                    for (e, entry) in support.iter().enumerate() {
                        let theta = entry.drift * t + group_phase[entry.group_row]
                            - group_phase[entry.group_col];
                        let (sin, cos) = theta.sin_cos();
                        for (o, w) in entry.weights.iter().enumerate() {
                            obs_point[o] += w.re * cos + w.im * sin;
                        }
                        if let Some(slot) = state_slot {
                            acc.pattern_sum[slot * support.len() + e] +=
                                entry.base * Complex64::new(cos, -sin);
                        }
                    }
                    for (o, val) in obs_point.iter().enumerate() {
                        acc.obs_sum[o][k] += val;
                        acc.obs_sqsum[o][k] += val * val;
                    }
                }
                acc.count += 1;
            }
            Ok(acc)
        };

        let acc = pairwise_monte_carlo(0..config.n_trajectories as u64, &work)?;
        self.finish(acc, &support, state_indices, observables, grid)
    }

    fn finish(
        &self,
        acc: PatternAccumulator,
        support: &[SupportEntry],
        state_indices: Vec<usize>,
        observables: &[(String, HermitianOperator)],
        grid: TimeGrid,
    ) -> Result<EnsembleResult> {
        let dim = self.dim();
        let n = acc.count as f64;
        let mut mean_states = Vec::with_capacity(state_indices.len());
        let mut state_stderr_max = Vec::with_capacity(state_indices.len());
        for slot in 0..state_indices.len() {
            let mut tilde = CMat::zeros(dim, dim);
            let mut worst = 0.0f64;
            for (e, entry) in support.iter().enumerate() {
                let sum = acc.pattern_sum[slot * support.len() + e];
                let mean = sum / c64(n, 0.0);
                tilde[(entry.row, entry.col)] = mean;
                if acc.count > 1 {
                    // every sample has |z| = |base| exactly, so
                    // Σ|z|² = n·|base|² and the entry variance is
                    // (n·|base|² - n·|mean|²)/(n-1)
                    let var = ((entry.base.norm_sqr() - mean.norm_sqr()) * n / (n - 1.0)).max(0.0);
                    worst = worst.max((var / n).sqrt());
                }
            }
            let full = &self.basis * tilde * self.basis.adjoint();
            mean_states.push(DensityMatrix::new(full)?);
            state_stderr_max.push(worst);
        }
        let mut observable_stats = BTreeMap::new();
        for (o, (name, _)) in observables.iter().enumerate() {
            let mean: Vec<f64> = acc.obs_sum[o].iter().map(|s| s / n).collect();
            let stderr: Vec<f64> = acc.obs_sum[o]
                .iter()
                .zip(&acc.obs_sqsum[o])
                .map(|(s, sq)| {
                    if acc.count > 1 {
                        let m = s / n;
                        let var = ((sq - n * m * m) / (n - 1.0)).max(0.0);
                        (var / n).sqrt()
                    } else {
                        0.0
                    }
                })
                .collect();
            observable_stats.insert(name.clone(), SeriesStats { mean, stderr });
        }
        Ok(EnsembleResult {
            grid,
            n_trajectories: acc.count as usize,
            state_indices,
            mean_states,
            state_stderr_max,
            observable_stats,
        })
    }
}

struct SupportEntry {
    row: usize,
    col: usize,
    base: Complex64,
    drift: f64,
    group_row: usize,
    group_col: usize,
    /// per-observable ρ̃0_ab · Õ_ba
    weights: Vec<Complex64>,
}

struct PatternAccumulator {
    count: u64,
    /// stored-slot-major: pattern_sum[slot * n_pattern + entry]
    pattern_sum: Vec<Complex64>,
    obs_sum: Vec<Vec<f64>>,
    obs_sqsum: Vec<Vec<f64>>,
}

impl PatternAccumulator {
    fn new(n_pattern: usize, n_slots: usize, n_obs: usize, n_points: usize) -> Self {
        PatternAccumulator {
            count: 0,
            pattern_sum: vec![Complex64::new(0.0, 0.0); n_pattern * n_slots],
            obs_sum: vec![vec![0.0; n_points]; n_obs],
            obs_sqsum: vec![vec![0.0; n_points]; n_obs],
        }
    }
}

impl Accumulate for PatternAccumulator {
    fn merge(mut self, other: Self) -> Self {
        self.count += other.count;
        for (d, s) in self.pattern_sum.iter_mut().zip(&other.pattern_sum) {
            *d += s;
        }
        for (d, s) in self.obs_sum.iter_mut().zip(&other.obs_sum) {
            for (x, y) in d.iter_mut().zip(s) {
                *x += y;
            }
        }
        for (d, s) in self.obs_sqsum.iter_mut().zip(&other.obs_sqsum) {
            for (x, y) in d.iter_mut().zip(s) {
                *x += y;
            }
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{basis_ket, pauli_x, CVec};
    use approx::assert_abs_diff_eq;

    fn plus_state() -> DensityMatrix {
        let psi = CVec::from_vec(vec![
            c64(std::f64::consts::FRAC_1_SQRT_2, 0.0),
            c64(std::f64::consts::FRAC_1_SQRT_2, 0.0),
        ]);
        DensityMatrix::pure(&psi).unwrap()
    }

    /// σ_z dephasing as a phase promotion: drift ±ω, one channel per level,
    /// amplitude ±√γ·... encoded through coeff = eigenvalue.
    fn sigma_z_promotion(omega: f64, gamma: f64, correlation: CorrelationSpec) -> PhasePromotion {
        PhasePromotion::new(
            identity(2),
            vec![omega, -omega],
            vec![0, 1],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![
                NoiseKernel::constant(gamma.sqrt()).unwrap(),
                NoiseKernel::constant(gamma.sqrt()).unwrap(),
            ],
            correlation,
        )
        .unwrap()
    }

    #[test]
    fn closed_form_matches_master_equation_decay() {
        // independent level noises with amplitude √γ each: coherence decays
        // at rate (γ + γ)/2 = γ
        let gamma = 0.8;
        let promo = sigma_z_promotion(1.0, gamma, CorrelationSpec::identity(2));
        let rho0 = plus_state();
        let t = 1.3;
        let out = promo.closed_form_state(&rho0, t).unwrap();
        let expected_mag = 0.5 * (-gamma * t).exp();
        assert_abs_diff_eq!(out.matrix()[(0, 1)].norm(), expected_mag, epsilon = 1e-12);
        // phase rotates at the drift difference 2ω; -2.6 rad is within (-π, π]
        let angle = out.matrix()[(0, 1)].arg();
        assert_abs_diff_eq!(angle, -2.0 * t, epsilon = 1e-12);
    }

    #[test]
    fn fully_correlated_equal_amplitudes_mean_no_decay() {
        let promo = sigma_z_promotion(0.7, 1.0, CorrelationSpec::full(2));
        let rho0 = plus_state();
        let out = promo.closed_form_state(&rho0, 2.0).unwrap();
        assert_abs_diff_eq!(out.matrix()[(0, 1)].norm(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn monte_carlo_matches_closed_form_within_stderr() {
        let promo = sigma_z_promotion(1.0, 1.0, CorrelationSpec::identity(2));
        let rho0 = plus_state();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let config = EnsembleConfig::new(4000, 2718, grid).unwrap();
        let obs = vec![(
            "sx".to_string(),
            HermitianOperator::new(pauli_x()).unwrap(),
        )];
        let result = promo.monte_carlo(&rho0, &config, &obs, 20).unwrap();
        let stats = &result.observable_stats["sx"];
        for (k, (&mean, &stderr)) in stats.mean.iter().zip(&stats.stderr).enumerate() {
            let exact = promo
                .closed_form_state(&rho0, grid.time(k))
                .unwrap()
                .expectation(&pauli_x());
            assert!(
                (mean - exact).abs() < 3.0 * stderr + 1e-9,
                "t={}: {mean} vs {exact} (stderr {stderr})",
                grid.time(k)
            );
        }
        // mean states agree too
        for (slot, &k) in result.state_indices.iter().enumerate() {
            let exact = promo.closed_form_state(&rho0, grid.time(k)).unwrap();
            let err = max_abs(&(result.mean_states[slot].matrix() - exact.matrix()));
            let tol = (3.0 * result.state_stderr_max[slot]).max(1e-3);
            assert!(err < tol, "state error {err} > {tol} at slot {slot}");
        }
    }

    #[test]
    fn monte_carlo_with_zero_noise_is_deterministic() {
        let promo = PhasePromotion::new(
            identity(2),
            vec![1.0, -1.0],
            vec![0, 1],
            vec![vec![0.0], vec![0.0]],
            vec![NoiseKernel::zero()],
            CorrelationSpec::identity(1),
        )
        .unwrap();
        let rho0 = plus_state();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let config = EnsembleConfig::new(16, 5, grid).unwrap();
        let result = promo.monte_carlo(&rho0, &config, &[], 10).unwrap();
        // the variance estimator cancels |base|² - |mean|², leaving only
        // sin/cos roundoff; "zero stderr" up to that cancellation noise
        assert!(result.state_stderr_max.iter().all(|&s| s < 1e-8));
        let last = result.mean_states.last().unwrap();
        // pure rotation at 2t
        assert_abs_diff_eq!(last.matrix()[(0, 1)].norm(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn promotion_on_nontrivial_basis_matches_lindblad_integration() {
        // drift = eigenvalues of H = σ_x, noise ∝ eigenvalue with a common
        // Brownian: exactly the phase-damping model with V = √γ H
        let h = HermitianOperator::new(pauli_x()).unwrap();
        let basis = crate::linalg::eigen_basis(&h).unwrap();
        let gamma: f64 = 0.5;
        let promo = PhasePromotion::new(
            basis.vectors.clone(),
            basis.values.clone(),
            vec![0, 1],
            vec![vec![basis.values[0]], vec![basis.values[1]]],
            vec![NoiseKernel::constant(gamma.sqrt()).unwrap()],
            CorrelationSpec::full(1),
        )
        .unwrap();
        let rho0 = DensityMatrix::pure(&basis_ket(2, 0)).unwrap();
        let t = 0.9;
        let closed = promo.closed_form_state(&rho0, t).unwrap();

        let model = crate::lindblad::LindbladModel::new(
            h.clone(),
            vec![crate::lindblad::LindbladChannel {
                operator: HermitianOperator::new(pauli_x() * c64(gamma.sqrt(), 0.0)).unwrap(),
                kernel: NoiseKernel::constant(1.0).unwrap(),
            }],
        )
        .unwrap();
        let exact = model.analytic_markov_evolve(&rho0, t).unwrap();
        assert!(max_abs(&(closed.matrix() - exact.matrix())) < 1e-10);
    }

    #[test]
    fn closed_form_requires_shared_kernel() {
        let promo = PhasePromotion::new(
            identity(2),
            vec![1.0, -1.0],
            vec![0, 1],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![
                NoiseKernel::constant(1.0).unwrap(),
                NoiseKernel::constant(2.0).unwrap(),
            ],
            CorrelationSpec::identity(2),
        )
        .unwrap();
        assert!(promo.closed_form_state(&plus_state(), 1.0).is_err());
    }

    #[test]
    fn worker_count_invariance() {
        let promo = sigma_z_promotion(1.0, 1.0, CorrelationSpec::identity(2));
        let rho0 = plus_state();
        let config = EnsembleConfig::new(128, 7, TimeGrid::new(0.5, 40).unwrap()).unwrap();
        let obs = vec![(
            "sx".to_string(),
            HermitianOperator::new(pauli_x()).unwrap(),
        )];
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| promo.monte_carlo(&rho0, &config, &obs, 10).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.observable_stats["sx"].mean, b.observable_stats["sx"].mean);
        for (sa, sb) in a.mean_states.iter().zip(&b.mean_states) {
            assert_eq!(sa.matrix().as_slice(), sb.matrix().as_slice());
        }
    }
}
