//! Intrinsic-decoherence generators obtained by stochastically promoting the
//! spectral representation of a unitary: U(t) = Σ_θ e^{-iθt} P_θ with
//! θt → χ_t(θ). The realized promotions:
//!
//! * time dilation χ_t(θ) = θ(t + ∫σ dB_θ) with Gaussian cross-level
//!   correlation dB(θ)dB(θ') = e^{-τ²(θ-θ')²}dt reproduces the generalized
//!   phase-damping generator with the e^{-τ²C_H²} kernel, and collapses to
//!   the plain -(γ/2)[H,[H,ρ]] dissipator at τ = 0;
//! * uniform amplitude χ_t(θ) = θt + ∫σ dB_θ covers the per-level dephasing
//!   class, with the fully correlated limit a global phase that leaves ρ(t)
//!   exactly unitary;
//! * per-level kernels σ(t;θ) for the configurable general case.

use nalgebra::DMatrix;

use crate::ensemble::{EnsembleConfig, EnsembleResult};
use crate::error::{Error, Result};
use crate::linalg::{
    c64, eigen_basis, CMat, DensityMatrix, EigenBasis, HermitianOperator, Tolerances,
};
use crate::noise::{CorrelationSpec, NoiseKernel};
use crate::phasemc::PhasePromotion;

/// Noise amplitude assigned to each realized eigenvalue θ.
#[derive(Debug, Clone)]
pub enum LevelAmplitude {
    /// v_θ(t) = θ·σ(t): promotes the time variable per level.
    TimeDilation(NoiseKernel),
    /// v_θ(t) = σ(t) for every level.
    Uniform(NoiseKernel),
    /// Explicit kernel per level, ordered like the realized eigenvalues.
    PerLevel(Vec<NoiseKernel>),
}

/// Cross-level correlation of the driving Brownian motions.
#[derive(Debug, Clone)]
pub enum PhaseCorrelation {
    Independent,
    /// g_{θθ'} = e^{-τ²(θ-θ')²} over the realized eigenvalues.
    Gaussian { tau: f64 },
    Full,
    Custom(CorrelationSpec),
}

/// Spectral promotion of exp(-itH): realized eigenvalues (degeneracies
/// merged), a noise amplitude per level, and the phase correlation.
#[derive(Debug, Clone)]
pub struct SpectralPromotionSpec {
    basis: EigenBasis,
    col_group: Vec<usize>,
    group_values: Vec<f64>,
    amplitude: LevelAmplitude,
    correlation: PhaseCorrelation,
}

impl SpectralPromotionSpec {
    pub fn new(
        h: &HermitianOperator,
        amplitude: LevelAmplitude,
        correlation: PhaseCorrelation,
    ) -> Result<Self> {
        let basis = eigen_basis(h)?;
        let (col_group, group_values) = merge_degenerate(&basis);
        if let LevelAmplitude::PerLevel(kernels) = &amplitude {
            if kernels.len() != group_values.len() {
                return Err(Error::DimensionMismatch {
                    left: group_values.len(),
                    right: kernels.len(),
                });
            }
        }
        if let PhaseCorrelation::Custom(spec) = &correlation {
            if spec.dim() != group_values.len() {
                return Err(Error::DimensionMismatch {
                    left: group_values.len(),
                    right: spec.dim(),
                });
            }
        }
        Ok(SpectralPromotionSpec {
            basis,
            col_group,
            group_values,
            amplitude,
            correlation,
        })
    }

    /// Realized (merged) eigenvalues of H.
    pub fn level_values(&self) -> &[f64] {
        &self.group_values
    }

    pub fn correlation_matrix(&self) -> Result<CorrelationSpec> {
        let n = self.group_values.len();
        Ok(match &self.correlation {
            PhaseCorrelation::Independent => CorrelationSpec::identity(n),
            PhaseCorrelation::Full => CorrelationSpec::full(n),
            PhaseCorrelation::Gaussian { tau } => {
                let mut g = DMatrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        let diff = self.group_values[i] - self.group_values[j];
                        g[(i, j)] = (-tau * tau * diff * diff).exp();
                    }
                }
                CorrelationSpec::new(g)?
            }
            PhaseCorrelation::Custom(spec) => spec.clone(),
        })
    }

    /// The phase-promotion engine realizing this spec: one noise channel per
    /// level, drift at the level eigenvalue.
    pub fn promotion(&self) -> Result<PhasePromotion> {
        let n_groups = self.group_values.len();
        let (kernels, scales): (Vec<NoiseKernel>, Vec<f64>) = match &self.amplitude {
            LevelAmplitude::TimeDilation(sigma) => (
                vec![sigma.clone(); n_groups],
                self.group_values.clone(),
            ),
            LevelAmplitude::Uniform(sigma) => {
                (vec![sigma.clone(); n_groups], vec![1.0; n_groups])
            }
            LevelAmplitude::PerLevel(kernels) => (kernels.clone(), vec![1.0; n_groups]),
        };
        let coeff: Vec<Vec<f64>> = (0..n_groups)
            .map(|g| {
                let mut row = vec![0.0; n_groups];
                row[g] = scales[g];
                row
            })
            .collect();
        let col_drift: Vec<f64> = self
            .col_group
            .iter()
            .map(|&g| self.group_values[g])
            .collect();
        PhasePromotion::new(
            self.basis.vectors.clone(),
            col_drift,
            self.col_group.clone(),
            coeff,
            kernels,
            self.correlation_matrix()?,
        )
    }
}

fn merge_degenerate(basis: &EigenBasis) -> (Vec<usize>, Vec<f64>) {
    let tol = Tolerances::default().degeneracy;
    let scale = basis
        .values
        .iter()
        .fold(0.0f64, |m, e| m.max(e.abs()))
        .max(f64::MIN_POSITIVE);
    let gap = tol * scale;
    let mut col_group = Vec::with_capacity(basis.values.len());
    let mut group_values: Vec<f64> = Vec::new();
    for (idx, &e) in basis.values.iter().enumerate() {
        if idx == 0 || e - basis.values[idx - 1] >= gap {
            group_values.push(e);
        }
        col_group.push(group_values.len() - 1);
    }
    (col_group, group_values)
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

/// Prepared generator of the generalized phase-damping equation
/// dρ/dt = -i[H,ρ] - (γ/2)(H²ρ + ρH² - 2H e^{-τ²C_H²}[ρ] H):
/// in the H eigenbasis the dissipator multiplies ρ_{jk} by
/// -(γ/2)(E_j² + E_k² - 2E_jE_k e^{-τ²(E_j-E_k)²}).
#[derive(Debug, Clone)]
pub struct MilburnGenerator {
    basis: EigenBasis,
    gamma: f64,
    tau: f64,
}

impl MilburnGenerator {
    pub fn new(h: &HermitianOperator, gamma: f64, tau: f64) -> Result<Self> {
        if gamma < 0.0 {
            return Err(Error::NegativeParameter {
                name: "gamma",
                value: gamma,
            });
        }
        if tau < 0.0 {
            return Err(Error::NegativeParameter {
                name: "tau",
                value: tau,
            });
        }
        Ok(MilburnGenerator {
            basis: eigen_basis(h)?,
            gamma,
            tau,
        })
    }

    pub fn apply(&self, rho: &CMat) -> Result<CMat> {
        let dim = self.basis.dim();
        if rho.nrows() != dim || rho.ncols() != dim {
            return Err(Error::DimensionMismatch {
                left: dim,
                right: rho.nrows(),
            });
        }
        let mut tilde = self.basis.vectors.adjoint() * rho * &self.basis.vectors;
        for j in 0..dim {
            for k in 0..dim {
                let (ej, ek) = (self.basis.values[j], self.basis.values[k]);
                let diff = ej - ek;
                let kernel = (-self.tau * self.tau * diff * diff).exp();
                let rate = 0.5 * self.gamma * (ej * ej + ek * ek - 2.0 * ej * ek * kernel);
                tilde[(j, k)] *= c64(-rate, -diff);
            }
        }
        Ok(&self.basis.vectors * tilde * self.basis.vectors.adjoint())
    }
}

/// One-shot form of [`MilburnGenerator::apply`].
pub fn milburn_generator_apply(
    h: &HermitianOperator,
    gamma: f64,
    tau: f64,
    rho: &CMat,
) -> Result<CMat> {
    MilburnGenerator::new(h, gamma, tau)?.apply(rho)
}

/// Accumulated dephasing λ(t) = ∫₀ᵗ σ²(s) ds of the non-Markovian
/// nondissipative equation dρ/dt = -i[H,ρ] - (σ²(t)/2)[H,[H,ρ]]; a named
/// delegation so the scenario registry can cite it directly.
pub fn nonmarkov_dephasing_rate(sigma: &NoiseKernel, t: f64) -> Result<f64> {
    sigma.lambda(t)
}

/// Monte Carlo average of the spectrally promoted evolution.
pub fn spectral_promoted_evolve(
    spec: &SpectralPromotionSpec,
    rho0: &DensityMatrix,
    config: &EnsembleConfig,
    observables: &[(String, HermitianOperator)],
    state_stride: usize,
) -> Result<EnsembleResult> {
    spec.promotion()?.monte_carlo(rho0, config, observables, state_stride)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lindblad::{integrate_generator_sampled, LindbladChannel, LindbladModel};
    use crate::linalg::{max_abs, pauli_x, pauli_z, trace, CVec};
    use crate::noise::TimeGrid;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_hermitian(dim: usize, seed: u64) -> HermitianOperator {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut m = CMat::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                m[(i, j)] = c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            }
        }
        HermitianOperator::new((&m + m.adjoint()) * c64(0.5, 0.0)).unwrap()
    }

    fn random_state(dim: usize, seed: u64) -> DensityMatrix {
        let h = random_hermitian(dim, seed);
        let shifted = h.matrix() + CMat::identity(dim, dim) * c64(2.0 * dim as f64, 0.0);
        let tr = trace(&shifted).re;
        DensityMatrix::new(shifted / c64(tr, 0.0)).unwrap()
    }

    #[test]
    fn tau_zero_reduces_to_plain_phase_damping() {
        let gamma = 0.7;
        for seed in 0..10u64 {
            let h = random_hermitian(4, seed);
            let rho = random_state(4, 100 + seed);
            let milburn = milburn_generator_apply(&h, gamma, 0.0, rho.matrix()).unwrap();
            let model = LindbladModel::new(
                h.clone(),
                vec![LindbladChannel {
                    operator: HermitianOperator::new(h.matrix() * c64(gamma.sqrt(), 0.0))
                        .unwrap(),
                    kernel: NoiseKernel::constant(1.0).unwrap(),
                }],
            )
            .unwrap();
            let plain = model.generator_apply(rho.matrix(), 0.0).unwrap();
            assert!(
                max_abs(&(&milburn - &plain)) < 1e-12 * max_abs(&plain).max(1.0),
                "τ=0 generators disagree"
            );
        }
    }

    #[test]
    fn large_tau_decouples_the_cross_term() {
        // E_j ≠ E_k: off-diagonal rate → (γ/2)(E_j² + E_k²)
        let h = HermitianOperator::new(pauli_z() * c64(1.3, 0.0)).unwrap();
        let gamma = 0.4;
        let rho = crate::linalg::outer(&crate::linalg::basis_ket(2, 0), &crate::linalg::basis_ket(2, 1));
        let out = milburn_generator_apply(&h, gamma, 1e6, &rho).unwrap();
        // drift -i(E_0 - E_1) plus decay -(γ/2)(E² + E²)
        let e = 1.3;
        let expected = rho * c64(-gamma * e * e, -2.0 * e);
        assert!(max_abs(&(out - expected)) < 1e-10);
    }

    #[test]
    fn diagonal_elements_suffer_no_dissipation() {
        let h = random_hermitian(3, 77);
        let basis = eigen_basis(&h).unwrap();
        let col = basis.vectors.column(1).into_owned();
        let rho = crate::linalg::outer(&col, &col);
        let out = milburn_generator_apply(&h, 0.9, 0.8, &rho).unwrap();
        // an eigenprojector is stationary: zero drift, zero dissipation
        assert!(max_abs(&out) < 1e-12);
    }

    #[test]
    fn generator_preserves_trace_and_hermiticity() {
        for seed in 0..8u64 {
            let h = random_hermitian(4, 200 + seed);
            let rho = random_state(4, 300 + seed);
            let out = milburn_generator_apply(&h, 0.6, 1.1, rho.matrix()).unwrap();
            assert!(trace(&out).norm() < 1e-12);
            assert!(max_abs(&(&out - out.adjoint())) < 1e-12);
        }
    }

    #[test]
    fn off_diagonal_rates_are_nonnegative() {
        // the rate is a variance, rate ≥ (|E_j| - |E_k|)² ≥ 0, and dominates
        // the squared gap whenever the eigenvalues share a sign
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..500 {
            let ej: f64 = rng.random_range(-3.0..3.0);
            let ek: f64 = rng.random_range(-3.0..3.0);
            let tau: f64 = rng.random_range(0.0..4.0);
            let kernel = (-tau * tau * (ej - ek) * (ej - ek)).exp();
            let rate = ej * ej + ek * ek - 2.0 * ej * ek * kernel;
            let floor = (ej.abs() - ek.abs()).powi(2);
            assert!(rate >= floor - 1e-12);
            if ej * ek >= 0.0 {
                assert!(rate >= (ej - ek) * (ej - ek) - 1e-12);
            }
        }
    }

    #[test]
    fn nonmarkov_rate_closed_forms() {
        let decaying = NoiseKernel::tabulated(
            (0..=4000).map(|k| k as f64 / 1000.0).collect(),
            (0..=4000).map(|k| (-(k as f64) / 1000.0).exp()).collect(),
        )
        .unwrap();
        // ∫ e^{-2s} ds = (1 - e^{-2t})/2, trapezoid error O(Δt²)
        assert_abs_diff_eq!(
            nonmarkov_dephasing_rate(&decaying, 2.0).unwrap(),
            (1.0 - (-4.0f64).exp()) / 2.0,
            epsilon = 1e-6
        );
        let gamma: f64 = 0.3;
        let constant = NoiseKernel::constant(gamma.sqrt()).unwrap();
        assert_abs_diff_eq!(
            nonmarkov_dephasing_rate(&constant, 1.7).unwrap(),
            gamma * 1.7,
            epsilon = 1e-14
        );
        assert_eq!(nonmarkov_dephasing_rate(&NoiseKernel::zero(), 5.0).unwrap(), 0.0);
    }

    #[test]
    fn time_dilation_closed_form_at_tau_zero_is_master_flow() {
        // gaussian(0) ⇒ fully correlated: the promotion averages exactly to
        // exp(tL) with V = √γ H
        let h = random_hermitian(3, 31);
        let gamma = 0.5f64;
        let spec = SpectralPromotionSpec::new(
            &h,
            LevelAmplitude::TimeDilation(NoiseKernel::constant(gamma.sqrt()).unwrap()),
            PhaseCorrelation::Gaussian { tau: 0.0 },
        )
        .unwrap();
        let rho0 = random_state(3, 41);
        let t = 0.8;
        let closed = spec.promotion().unwrap().closed_form_state(&rho0, t).unwrap();
        let model = LindbladModel::new(
            h.clone(),
            vec![LindbladChannel {
                operator: HermitianOperator::new(h.matrix() * c64(gamma.sqrt(), 0.0)).unwrap(),
                kernel: NoiseKernel::constant(1.0).unwrap(),
            }],
        )
        .unwrap();
        let exact = model.analytic_markov_evolve(&rho0, t).unwrap();
        assert!(max_abs(&(closed.matrix() - exact.matrix())) < 1e-9);
    }

    #[test]
    fn gaussian_tau_promotion_matches_generator_integration() {
        let h = HermitianOperator::new(pauli_x() * c64(1.2, 0.0)).unwrap();
        let gamma = 0.6f64;
        let tau = 1.0;
        let spec = SpectralPromotionSpec::new(
            &h,
            LevelAmplitude::TimeDilation(NoiseKernel::constant(gamma.sqrt()).unwrap()),
            PhaseCorrelation::Gaussian { tau },
        )
        .unwrap();
        let psi = CVec::from_vec(vec![c64(1.0, 0.0), c64(0.0, 0.0)]);
        let rho0 = DensityMatrix::pure(&psi).unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let config = EnsembleConfig::new(3000, 616, grid).unwrap();
        let obs = vec![
            ("sz".to_string(), HermitianOperator::new(pauli_z()).unwrap()),
            ("sx".to_string(), HermitianOperator::new(pauli_x()).unwrap()),
        ];
        let mc = spectral_promoted_evolve(&spec, &rho0, &config, &obs, 25).unwrap();

        let generator = MilburnGenerator::new(&h, gamma, tau).unwrap();
        let ode = integrate_generator_sampled(
            |_, rho| generator.apply(rho),
            &rho0,
            &grid,
            &obs,
            25,
        )
        .unwrap();
        for name in ["sz", "sx"] {
            let stats = &mc.observable_stats[name];
            for (k, (&mean, &stderr)) in stats.mean.iter().zip(&stats.stderr).enumerate() {
                let exact = ode.observables[name][k];
                assert!(
                    (mean - exact).abs() < 3.0 * stderr + 1e-9,
                    "{name} at k={k}: {mean} vs {exact} (stderr {stderr})"
                );
            }
        }
    }

    #[test]
    fn uniform_independent_promotion_matches_per_level_dephasing() {
        // independent per-level phases with equal amplitude √γ on a 2-level
        // system equal the single-channel dephasing V = √(γ/2)(P₀ - P₁)
        let h = HermitianOperator::new(pauli_z() * c64(0.9, 0.0)).unwrap();
        let gamma = 0.8f64;
        let spec = SpectralPromotionSpec::new(
            &h,
            LevelAmplitude::Uniform(NoiseKernel::constant(gamma.sqrt()).unwrap()),
            PhaseCorrelation::Independent,
        )
        .unwrap();
        let psi = CVec::from_vec(vec![
            c64(std::f64::consts::FRAC_1_SQRT_2, 0.0),
            c64(std::f64::consts::FRAC_1_SQRT_2, 0.0),
        ]);
        let rho0 = DensityMatrix::pure(&psi).unwrap();
        let grid = TimeGrid::new(1.0, 80).unwrap();
        let config = EnsembleConfig::new(3000, 999, grid).unwrap();
        let obs = vec![("sx".to_string(), HermitianOperator::new(pauli_x()).unwrap())];
        let mc = spectral_promoted_evolve(&spec, &rho0, &config, &obs, 20).unwrap();

        let model = LindbladModel::new(
            h.clone(),
            vec![LindbladChannel {
                operator: HermitianOperator::new(pauli_z() * c64((gamma / 2.0).sqrt(), 0.0))
                    .unwrap(),
                kernel: NoiseKernel::constant(1.0).unwrap(),
            }],
        )
        .unwrap();
        let record = model
            .integrate_with_observables(&rho0, &grid, &obs)
            .unwrap();
        let stats = &mc.observable_stats["sx"];
        for (k, (&mean, &stderr)) in stats.mean.iter().zip(&stats.stderr).enumerate() {
            let exact = record.observables["sx"][k];
            assert!(
                (mean - exact).abs() < 3.0 * stderr + 1e-9,
                "k={k}: {mean} vs {exact} (stderr {stderr})"
            );
        }
    }

    #[test]
    fn fully_correlated_uniform_promotion_is_exactly_unitary() {
        let h = random_hermitian(3, 91);
        let spec = SpectralPromotionSpec::new(
            &h,
            LevelAmplitude::Uniform(NoiseKernel::constant(1.3).unwrap()),
            PhaseCorrelation::Full,
        )
        .unwrap();
        let rho0 = random_state(3, 92);
        let t = 0.7;
        let closed = spec.promotion().unwrap().closed_form_state(&rho0, t).unwrap();
        let u = crate::linalg::expm_hermitian_generator(&h, t).unwrap();
        let unitary = &u * rho0.matrix() * u.adjoint();
        assert!(max_abs(&(closed.matrix() - unitary)) < 1e-9);
    }

    #[test]
    fn per_level_kernels_allow_custom_generators() {
        // 3-level system with distinct per-level tabulated amplitudes: the
        // closed form is rejected (no shared kernel), but the MC still runs
        let mut diag = CMat::zeros(3, 3);
        for (i, e) in [0.0f64, 1.0, 2.5].iter().enumerate() {
            diag[(i, i)] = c64(*e, 0.0);
        }
        let h = HermitianOperator::new(diag).unwrap();
        let kernels = vec![
            NoiseKernel::constant(0.2).unwrap(),
            NoiseKernel::constant(0.5).unwrap(),
            NoiseKernel::constant(0.9).unwrap(),
        ];
        let spec = SpectralPromotionSpec::new(
            &h,
            LevelAmplitude::PerLevel(kernels),
            PhaseCorrelation::Independent,
        )
        .unwrap();
        let rho0 = random_state(3, 17);
        assert!(spec
            .promotion()
            .unwrap()
            .closed_form_state(&rho0, 1.0)
            .is_err());
        let grid = TimeGrid::new(0.5, 40).unwrap();
        let config = EnsembleConfig::new(500, 3, grid).unwrap();
        let mc = spectral_promoted_evolve(&spec, &rho0, &config, &[], 10).unwrap();
        // coherence (0,1) decays at (v₀² + v₁²)/2 = (0.04 + 0.25)/2
        let rate: f64 = 0.5 * (0.04 + 0.25);
        let last = mc.mean_states.last().unwrap().matrix()[(0, 1)].norm();
        let expected = rho0.matrix()[(0, 1)].norm() * (-rate * 0.5).exp();
        assert!(
            (last - expected).abs() < 0.05 * expected.max(0.02),
            "coherence {last} vs {expected}"
        );
    }
}
