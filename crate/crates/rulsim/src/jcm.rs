//! Resonant multiphoton Jaynes-Cummings model on a truncated Fock space:
//! H = ω a†a + ω₀ S_z + λ (S₋ a†ᵐ + S₊ aᵐ) with ω₀ = mω, the closed-form
//! atomic inversion and photon statistics with and without phase damping,
//! and the stochastic-coupling variant whose averaged Rabi oscillations
//! decay exponentially.
//!
//! Basis ordering is atom-major with the excited state first:
//! index(atom, n) = atom·(n_max+1) + n, atom 0 = |+⟩, atom 1 = |−⟩.
//! S_z has eigenvalues ±1/2; the closed-form inversion series equals
//! 2·Tr[ρ S_z], which the full-state oracle pins down.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{c64, CMat, CVec, DensityMatrix, HermitianOperator};
use crate::noise::NoiseKernel;
use crate::phasemc::PhasePromotion;

#[derive(Debug, Clone, Copy)]
pub struct JcmParams {
    omega: f64,
    omega0: f64,
    coupling: f64,
    multiplicity: usize,
    n_max: usize,
}

impl JcmParams {
    pub fn new(
        omega: f64,
        omega0: f64,
        coupling: f64,
        multiplicity: usize,
        n_max: usize,
    ) -> Result<Self> {
        if !(omega > 0.0) || !omega.is_finite() {
            return Err(Error::InvalidParameter {
                reason: format!("mode frequency must be positive, got {omega}"),
            });
        }
        if !coupling.is_finite() {
            return Err(Error::InvalidParameter {
                reason: "coupling must be finite".into(),
            });
        }
        if multiplicity == 0 {
            return Err(Error::InvalidParameter {
                reason: "photon multiplicity m must be at least 1".into(),
            });
        }
        if n_max < multiplicity {
            return Err(Error::InvalidParameter {
                reason: format!("n_max = {n_max} must be at least m = {multiplicity}"),
            });
        }
        let resonant = multiplicity as f64 * omega;
        if (omega0 - resonant).abs() > 1e-12 * resonant.abs().max(omega0.abs()) {
            return Err(Error::InvalidParameter {
                reason: format!("exact resonance requires ω₀ = mω; got ω₀ = {omega0}, mω = {resonant}"),
            });
        }
        Ok(JcmParams {
            omega,
            omega0,
            coupling,
            multiplicity,
            n_max,
        })
    }

    /// Parameters with ω₀ fixed to mω.
    pub fn resonant(omega: f64, coupling: f64, multiplicity: usize, n_max: usize) -> Result<Self> {
        Self::new(omega, multiplicity as f64 * omega, coupling, multiplicity, n_max)
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn omega0(&self) -> f64 {
        self.omega0
    }

    pub fn coupling(&self) -> f64 {
        self.coupling
    }

    pub fn multiplicity(&self) -> usize {
        self.multiplicity
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn fock_dim(&self) -> usize {
        self.n_max + 1
    }

    pub fn dim(&self) -> usize {
        2 * self.fock_dim()
    }

    /// (n+m)!/n! = (n+1)(n+2)···(n+m), the m-photon Rabi ratio.
    pub fn rabi_ratio(&self, n: usize) -> f64 {
        (1..=self.multiplicity).map(|k| (n + k) as f64).product()
    }
}

fn annihilation(fock_dim: usize) -> CMat {
    let mut a = CMat::zeros(fock_dim, fock_dim);
    for n in 1..fock_dim {
        a[(n - 1, n)] = c64((n as f64).sqrt(), 0.0);
    }
    a
}

fn atom_matrix(e_plus: f64, e_minus: f64) -> CMat {
    let mut m = CMat::zeros(2, 2);
    m[(0, 0)] = c64(e_plus, 0.0);
    m[(1, 1)] = c64(e_minus, 0.0);
    m
}

/// S_z ⊗ I with S_z eigenvalues ±1/2 (excited first).
pub fn inversion_operator(p: &JcmParams) -> HermitianOperator {
    let id = CMat::identity(p.fock_dim(), p.fock_dim());
    HermitianOperator::new(atom_matrix(0.5, -0.5).kronecker(&id)).expect("diagonal is Hermitian")
}

/// |−⟩⟨−| ⊗ I, the ground-state projector of the atom.
pub fn ground_projector(p: &JcmParams) -> HermitianOperator {
    let id = CMat::identity(p.fock_dim(), p.fock_dim());
    HermitianOperator::new(atom_matrix(0.0, 1.0).kronecker(&id)).expect("projector is Hermitian")
}

/// I ⊗ |n⟩⟨n|, the photon-number projector.
pub fn number_projector(p: &JcmParams, n: usize) -> Result<HermitianOperator> {
    if n > p.n_max() {
        return Err(Error::IndexOutOfRange {
            index: n,
            max: p.n_max(),
        });
    }
    let mut proj = CMat::zeros(p.fock_dim(), p.fock_dim());
    proj[(n, n)] = c64(1.0, 0.0);
    Ok(HermitianOperator::new(CMat::identity(2, 2).kronecker(&proj)).expect("projector"))
}

/// Interaction part S₋ a†ᵐ + S₊ aᵐ (unit coupling).
pub fn interaction_hamiltonian(p: &JcmParams) -> HermitianOperator {
    let a = annihilation(p.fock_dim());
    let mut a_m = CMat::identity(p.fock_dim(), p.fock_dim());
    for _ in 0..p.multiplicity {
        a_m = &a_m * &a;
    }
    let s_plus = {
        let mut m = CMat::zeros(2, 2);
        m[(0, 1)] = c64(1.0, 0.0);
        m
    };
    let term = s_plus.kronecker(&a_m);
    HermitianOperator::new(&term + term.adjoint()).expect("sum with adjoint is Hermitian")
}

/// Full Hamiltonian ω a†a + ω₀ S_z + λ (S₋ a†ᵐ + S₊ aᵐ).
pub fn build_hamiltonian(p: &JcmParams) -> HermitianOperator {
    let a = annihilation(p.fock_dim());
    let number = a.adjoint() * &a;
    let free = CMat::identity(2, 2).kronecker(&number) * c64(p.omega, 0.0)
        + atom_matrix(0.5, -0.5).kronecker(&CMat::identity(p.fock_dim(), p.fock_dim()))
            * c64(p.omega0, 0.0);
    let h = free + interaction_hamiltonian(p).matrix() * c64(p.coupling, 0.0);
    HermitianOperator::new(h).expect("assembled Hamiltonian is Hermitian")
}

/// a†a + m·S_z, conserved by the resonant Hamiltonian.
pub fn excitation_operator(p: &JcmParams) -> HermitianOperator {
    let a = annihilation(p.fock_dim());
    let number = a.adjoint() * &a;
    let m = CMat::identity(2, 2).kronecker(&number)
        + atom_matrix(0.5, -0.5).kronecker(&CMat::identity(p.fock_dim(), p.fock_dim()))
            * c64(p.multiplicity as f64, 0.0);
    HermitianOperator::new(m).expect("diagonal is Hermitian")
}

// ---------------------------------------------------------------------------
// Coherent field state
// ---------------------------------------------------------------------------

/// Truncated coherent state |α⟩ with amplitudes Q_n = e^{-|α|²/2} αⁿ/√(n!);
/// construction fails when the truncation drops more than 1e-10 of weight.
#[derive(Debug, Clone)]
pub struct CoherentAmplitude {
    alpha: Complex64,
    amplitudes: Vec<Complex64>,
}

const TRUNCATION_TOLERANCE: f64 = 1e-10;

impl CoherentAmplitude {
    pub fn new(alpha: Complex64, n_max: usize) -> Result<Self> {
        let mut amplitudes = Vec::with_capacity(n_max + 1);
        let mut q = c64((-alpha.norm_sqr() / 2.0).exp(), 0.0);
        amplitudes.push(q);
        for n in 1..=n_max {
            q *= alpha / c64((n as f64).sqrt(), 0.0);
            amplitudes.push(q);
        }
        let retained: f64 = amplitudes.iter().map(|q| q.norm_sqr()).sum();
        if retained < 1.0 - TRUNCATION_TOLERANCE {
            return Err(Error::TruncationInadequate {
                retained,
                required: 1.0 - TRUNCATION_TOLERANCE,
            });
        }
        Ok(CoherentAmplitude { alpha, amplitudes })
    }

    /// Smallest adequate truncation for |α⟩ plus `guard` extra levels.
    pub fn auto_n_max(alpha: Complex64, guard: usize) -> usize {
        let nbar = alpha.norm_sqr();
        let mut weight = (-nbar).exp();
        let mut cumulative = weight;
        let mut n = 0usize;
        while cumulative <= 1.0 - TRUNCATION_TOLERANCE && n < 10_000 {
            n += 1;
            weight *= nbar / n as f64;
            cumulative += weight;
        }
        n + guard
    }

    pub fn alpha(&self) -> Complex64 {
        self.alpha
    }

    pub fn n_max(&self) -> usize {
        self.amplitudes.len() - 1
    }

    pub fn amplitude(&self, n: usize) -> Complex64 {
        self.amplitudes.get(n).copied().unwrap_or(c64(0.0, 0.0))
    }

    /// |Q_n|² for n = 0..=n_max.
    pub fn weights(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|q| q.norm_sqr()).collect()
    }
}

/// |+⟩ ⊗ |α⟩ as a density matrix (normalized within the truncated space).
pub fn initial_excited_coherent(p: &JcmParams, field: &CoherentAmplitude) -> Result<DensityMatrix> {
    if field.n_max() != p.n_max() {
        return Err(Error::DimensionMismatch {
            left: p.n_max(),
            right: field.n_max(),
        });
    }
    let mut psi = CVec::zeros(p.dim());
    for n in 0..=p.n_max() {
        psi[n] = field.amplitude(n);
    }
    DensityMatrix::pure(&psi)
}

// ---------------------------------------------------------------------------
// Closed forms
// ---------------------------------------------------------------------------

/// Unitary atomic inversion W(t) = Σ |Q_n|² cos(2λt √((n+m)!/n!)) for the
/// excited-atom, coherent-field initial condition; equals 2·Tr[ρ(t) S_z].
pub fn inversion_unitary(p: &JcmParams, field: &CoherentAmplitude, t: f64) -> f64 {
    inversion_damped(p, field, 0.0, t).expect("γ = 0 is valid")
}

/// Phase-damped inversion
/// W^pd(t) = Σ |Q_n|² e^{-2γλ²t (n+m)!/n!} cos(2λt √((n+m)!/n!)).
pub fn inversion_damped(p: &JcmParams, field: &CoherentAmplitude, gamma: f64, t: f64) -> Result<f64> {
    if gamma < 0.0 {
        return Err(Error::NegativeParameter {
            name: "gamma",
            value: gamma,
        });
    }
    let lam = p.coupling;
    let mut w = 0.0;
    for (n, weight) in field.weights().iter().enumerate() {
        let ratio = p.rabi_ratio(n);
        let envelope = (-2.0 * gamma * lam * lam * t * ratio).exp();
        w += weight * envelope * (2.0 * lam * t * ratio.sqrt()).cos();
    }
    Ok(w)
}

/// Unitary photon number distribution
/// P_n(t) = |Q_n|² cos²(λt√R_n) + |Q_{n-m}|² sin²(λt√R_{n-m}),
/// with R_k = (k+m)!/k! and the second term absent for n < m.
pub fn photon_distribution_unitary(
    p: &JcmParams,
    field: &CoherentAmplitude,
    n: usize,
    t: f64,
) -> Result<f64> {
    photon_distribution_damped(p, field, 0.0, n, t)
}

/// Phase-damped photon number distribution, assembled from E[cos²] via the
/// moment identities:
/// ½|Q_n|²(1 + e^{-2γλ²tR_n} cos(2λt√R_n)) +
/// ½|Q_{n-m}|²(1 - e^{-2γλ²tR_{n-m}} cos(2λt√R_{n-m})).
pub fn photon_distribution_damped(
    p: &JcmParams,
    field: &CoherentAmplitude,
    gamma: f64,
    n: usize,
    t: f64,
) -> Result<f64> {
    if gamma < 0.0 {
        return Err(Error::NegativeParameter {
            name: "gamma",
            value: gamma,
        });
    }
    if n > p.n_max() {
        return Err(Error::IndexOutOfRange {
            index: n,
            max: p.n_max(),
        });
    }
    let lam = p.coupling;
    let damped_cos = |k: usize| {
        let ratio = p.rabi_ratio(k);
        (-2.0 * gamma * lam * lam * t * ratio).exp() * (2.0 * lam * t * ratio.sqrt()).cos()
    };
    let weights = field.weights();
    let mut out = 0.5 * weights[n] * (1.0 + damped_cos(n));
    if n >= p.multiplicity {
        out += 0.5 * weights[n - p.multiplicity] * (1.0 - damped_cos(n - p.multiplicity));
    }
    Ok(out)
}

/// Ground-state probability of the stochastic-coupling model (m = 1):
/// P_eg(t) = ½(1 - Σ P_n e^{-2(n+1)γλt} cos(2λt√(n+1))) for arbitrary
/// initial photon weights P_n.
pub fn p_eg_stochastic_jcm(weights: &[f64], coupling: f64, gamma: f64, t: f64) -> Result<f64> {
    if gamma < 0.0 {
        return Err(Error::NegativeParameter {
            name: "gamma",
            value: gamma,
        });
    }
    let total: f64 = weights.iter().sum();
    if total > 1.0 + 1e-10 || weights.iter().any(|&w| w < -1e-12) {
        return Err(Error::InvalidParameter {
            reason: format!("photon weights must be a subnormalized distribution (Σ = {total})"),
        });
    }
    let mut sum = 0.0;
    for (n, &w) in weights.iter().enumerate() {
        let np1 = (n + 1) as f64;
        sum += w * (-2.0 * np1 * gamma * coupling * t).exp() * (2.0 * coupling * t * np1.sqrt()).cos();
    }
    Ok(0.5 * (1.0 - sum))
}

/// Constant kernel v = √(γ λ) whose coupling promotion
/// λt → λt + ∫ v dB reproduces the printed e^{-2(n+1)γλt} envelopes.
pub fn coupling_promotion_kernel(gamma: f64, coupling: f64) -> Result<NoiseKernel> {
    if gamma < 0.0 {
        return Err(Error::NegativeParameter {
            name: "gamma",
            value: gamma,
        });
    }
    if coupling < 0.0 {
        return Err(Error::NegativeParameter {
            name: "coupling",
            value: coupling,
        });
    }
    NoiseKernel::constant((gamma * coupling).sqrt())
}

// ---------------------------------------------------------------------------
// Random evolution realizations
// ---------------------------------------------------------------------------

/// Time promotion t → t + √γ B_t of the full Hamiltonian: one common
/// Brownian, phase velocity per eigenvalue. Averages to the phase-damped
/// master equation with V = √γ H.
pub fn phase_damping_promotion(p: &JcmParams, gamma: f64) -> Result<PhasePromotion> {
    if gamma < 0.0 {
        return Err(Error::NegativeParameter {
            name: "gamma",
            value: gamma,
        });
    }
    let h = build_hamiltonian(p);
    let basis = crate::linalg::eigen_basis(&h)?;
    let dim = basis.dim();
    let coeff: Vec<Vec<f64>> = basis.values.iter().map(|&e| vec![e]).collect();
    PhasePromotion::new(
        basis.vectors,
        basis.values,
        (0..dim).collect(),
        coeff,
        vec![NoiseKernel::constant(gamma.sqrt())?],
        crate::noise::CorrelationSpec::full(1),
    )
}

/// Coupling promotion λt → λt + √(γλ) B_t: drift from the full Hamiltonian,
/// noise velocity from the interaction part, one common Brownian. H and the
/// interaction commute on resonance, so a joint eigenbasis exists.
pub fn stochastic_coupling_promotion(p: &JcmParams, gamma: f64) -> Result<PhasePromotion> {
    let h = build_hamiltonian(p);
    let h_int = interaction_hamiltonian(p);
    let (basis, diagonals) =
        crate::ensemble::simultaneous_eigenbasis(&[h.matrix(), h_int.matrix()])?;
    let drift = diagonals[0].clone();
    let kernel = coupling_promotion_kernel(gamma, p.coupling)?;
    let coeff: Vec<Vec<f64>> = diagonals[1].iter().map(|&v| vec![v]).collect();
    let dim = drift.len();
    PhasePromotion::new(
        basis,
        drift,
        (0..dim).collect(),
        coeff,
        vec![kernel],
        crate::noise::CorrelationSpec::full(1),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lindblad::{LindbladChannel, LindbladModel};
    use crate::linalg::{eigen_basis, eigendecompose, max_abs};
    use approx::assert_abs_diff_eq;

    fn params(m: usize) -> JcmParams {
        JcmParams::resonant(0.3, 1.0, m, 9 + m).unwrap()
    }

    fn field(p: &JcmParams) -> CoherentAmplitude {
        // n̄ = 0.4
        CoherentAmplitude::new(c64(0.4f64.sqrt(), 0.0), p.n_max()).unwrap()
    }

    #[test]
    fn resonance_is_enforced() {
        assert!(JcmParams::new(1.0, 2.0, 0.5, 1, 4).is_err());
        assert!(JcmParams::new(1.0, 2.0, 0.5, 2, 4).is_ok());
    }

    #[test]
    fn free_hamiltonian_is_diagonal_with_level_energies() {
        let p = JcmParams::resonant(0.7, 0.0, 1, 5).unwrap();
        let h = build_hamiltonian(&p);
        for n in 0..=5usize {
            let e_plus = h.matrix()[(n, n)].re;
            let e_minus = h.matrix()[(6 + n, 6 + n)].re;
            assert_abs_diff_eq!(e_plus, 0.7 * n as f64 + 0.35, epsilon = 1e-14);
            assert_abs_diff_eq!(e_minus, 0.7 * n as f64 - 0.35, epsilon = 1e-14);
        }
        let off_diag_max = (0..p.dim())
            .flat_map(|i| (0..p.dim()).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j)
            .map(|(i, j)| h.matrix()[(i, j)].norm())
            .fold(0.0f64, f64::max);
        assert_eq!(off_diag_max, 0.0);
    }

    #[test]
    fn single_photon_doublets_split_by_rabi_frequency() {
        let p = JcmParams::resonant(1.0, 0.25, 1, 8).unwrap();
        let spectral = eigendecompose(&build_hamiltonian(&p)).unwrap();
        // dressed pair for photon number n: ω(n + 1/2) ± λ√(n+1)
        for n in 0..=6usize {
            let center = 1.0 * (n as f64 + 0.5);
            let gap = 0.25 * ((n + 1) as f64).sqrt();
            for sign in [-1.0, 1.0] {
                let target = center + sign * gap;
                let found = spectral
                    .eigenvalues
                    .iter()
                    .any(|&e| (e - target).abs() < 1e-10);
                assert!(found, "missing dressed level {target} (n = {n})");
            }
        }
    }

    #[test]
    fn two_photon_hamiltonian_conserves_excitation_number() {
        let p = JcmParams::resonant(0.5, 1.0, 2, 10).unwrap();
        let h = build_hamiltonian(&p);
        let n_op = excitation_operator(&p);
        let comm = crate::linalg::commutator(h.matrix(), n_op.matrix()).unwrap();
        assert!(max_abs(&comm) < 1e-12);
    }

    #[test]
    fn coherent_amplitudes_are_poissonian_and_truncation_guarded() {
        let alpha = c64(0.4f64.sqrt(), 0.0);
        let n_max = CoherentAmplitude::auto_n_max(alpha, 1);
        let field = CoherentAmplitude::new(alpha, n_max).unwrap();
        let w = field.weights();
        assert_abs_diff_eq!(w[0], (-0.4f64).exp(), epsilon = 1e-14);
        assert_abs_diff_eq!(w[1], 0.4 * (-0.4f64).exp(), epsilon = 1e-14);
        assert!(w.iter().sum::<f64>() >= 1.0 - 1e-10);
        assert!(CoherentAmplitude::new(c64(3.0, 0.0), 4).is_err());
    }

    #[test]
    fn inversion_starts_at_unity_and_vacuum_gives_pure_rabi() {
        let p = params(1);
        let f = field(&p);
        assert_abs_diff_eq!(inversion_unitary(&p, &f, 0.0), 1.0, epsilon = 1e-10);

        let vac_params = JcmParams::resonant(0.3, 1.0, 1, 3).unwrap();
        let vacuum = CoherentAmplitude::new(c64(0.0, 0.0), 3).unwrap();
        for &t in &[0.1, 0.7, 2.0] {
            assert_abs_diff_eq!(
                inversion_unitary(&vac_params, &vacuum, t),
                (2.0 * t).cos(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn inversion_matches_full_state_oracle() {
        for m in [1usize, 2] {
            let p = params(m);
            let f = field(&p);
            let h = build_hamiltonian(&p);
            let basis = eigen_basis(&h).unwrap();
            let rho0 = initial_excited_coherent(&p, &f).unwrap();
            let sz = inversion_operator(&p);
            for &t in &[0.0, 0.4, 1.3, 3.7] {
                let u = basis.phase_exponential(t);
                let rho_t = &u * rho0.matrix() * u.adjoint();
                let oracle = 2.0 * crate::linalg::expectation_from_matrix(&rho_t, sz.matrix());
                let series = inversion_unitary(&p, &f, t);
                assert!(
                    (series - oracle).abs() < 1e-8,
                    "m={m} t={t}: series {series} vs oracle {oracle}"
                );
            }
        }
    }

    #[test]
    fn photon_distribution_matches_full_state_oracle_and_normalizes() {
        for m in [1usize, 2] {
            let p = params(m);
            let f = field(&p);
            let h = build_hamiltonian(&p);
            let basis = eigen_basis(&h).unwrap();
            let rho0 = initial_excited_coherent(&p, &f).unwrap();
            for &t in &[0.0, 0.6, 2.1] {
                let u = basis.phase_exponential(t);
                let rho_t = &u * rho0.matrix() * u.adjoint();
                let mut total = 0.0;
                for n in 0..=p.n_max() {
                    let proj = number_projector(&p, n).unwrap();
                    let oracle = crate::linalg::expectation_from_matrix(&rho_t, proj.matrix());
                    let series = photon_distribution_unitary(&p, &f, n, t).unwrap();
                    assert!(
                        (series - oracle).abs() < 1e-8,
                        "m={m} n={n} t={t}: {series} vs {oracle}"
                    );
                    assert!((-1e-12..=1.0 + 1e-12).contains(&series));
                    total += series;
                }
                assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
            }
        }
        let p = params(1);
        let f = field(&p);
        assert!(photon_distribution_unitary(&p, &f, p.n_max() + 1, 0.5).is_err());
    }

    #[test]
    fn damped_inversion_reduces_to_unitary_at_zero_gamma() {
        let p = params(2);
        let f = field(&p);
        for &t in &[0.3, 1.1] {
            assert_abs_diff_eq!(
                inversion_damped(&p, &f, 0.0, t).unwrap(),
                inversion_unitary(&p, &f, t),
                epsilon = 1e-15
            );
        }
        assert!(inversion_damped(&p, &f, -0.1, 1.0).is_err());
    }

    #[test]
    fn damped_inversion_is_bounded_by_its_envelope() {
        let p = params(1);
        let f = field(&p);
        let gamma = 0.02;
        let lam = p.coupling();
        for k in 0..200 {
            let t = 12.0 * k as f64 / 200.0;
            let w = inversion_damped(&p, &f, gamma, t).unwrap();
            let envelope: f64 = f
                .weights()
                .iter()
                .enumerate()
                .map(|(n, wn)| wn * (-2.0 * gamma * lam * lam * t * p.rabi_ratio(n)).exp())
                .sum();
            assert!(w.abs() <= envelope + 1e-12, "t={t}: |W|={} > {envelope}", w.abs());
        }
    }

    #[test]
    fn damped_observables_match_master_equation_integration() {
        // short-window unit-scale check; the acceptance suite runs the full
        // three-revival comparison
        let p = JcmParams::resonant(0.3, 1.0, 1, 10).unwrap();
        let f = CoherentAmplitude::new(c64(0.4f64.sqrt(), 0.0), 10).unwrap();
        let gamma: f64 = 0.02;
        let h = build_hamiltonian(&p);
        let model = LindbladModel::new(
            h.clone(),
            vec![LindbladChannel {
                operator: HermitianOperator::new(h.matrix() * c64(gamma.sqrt(), 0.0)).unwrap(),
                kernel: NoiseKernel::constant(1.0).unwrap(),
            }],
        )
        .unwrap();
        let rho0 = initial_excited_coherent(&p, &f).unwrap();
        let grid = crate::noise::TimeGrid::new(1.0, 2000).unwrap();
        let mut obs = vec![(
            "w".to_string(),
            HermitianOperator::new(inversion_operator(&p).matrix() * c64(2.0, 0.0)).unwrap(),
        )];
        for n in 0..=3usize {
            obs.push((format!("p{n}"), number_projector(&p, n).unwrap()));
        }
        let sampled = model.integrate_sampled(&rho0, &grid, &obs, 500).unwrap();
        for (k, t) in grid.times().enumerate().step_by(100) {
            let w_closed = inversion_damped(&p, &f, gamma, t).unwrap();
            let w_ode = sampled.observables["w"][k];
            assert!(
                (w_closed - w_ode).abs() < 1e-6,
                "W mismatch at t={t}: {w_closed} vs {w_ode}"
            );
            for n in 0..=3usize {
                let p_closed = photon_distribution_damped(&p, &f, gamma, n, t).unwrap();
                let p_ode = sampled.observables[&format!("p{n}")][k];
                assert!(
                    (p_closed - p_ode).abs() < 1e-6,
                    "P_{n} mismatch at t={t}: {p_closed} vs {p_ode}"
                );
            }
        }
    }

    #[test]
    fn damped_photon_distribution_long_time_limit() {
        let p = params(2);
        let f = field(&p);
        let w = f.weights();
        let n = 3usize;
        let limit = 0.5 * (w[n] + w[n - 2]);
        let got = photon_distribution_damped(&p, &f, 0.5, n, 1e4).unwrap();
        assert_abs_diff_eq!(got, limit, epsilon = 1e-12);
    }

    #[test]
    fn time_promotion_ensemble_matches_damped_inversion() {
        let p = JcmParams::resonant(0.3, 1.0, 1, 10).unwrap();
        let f = CoherentAmplitude::new(c64(0.4f64.sqrt(), 0.0), 10).unwrap();
        let gamma = 0.05;
        let promo = phase_damping_promotion(&p, gamma).unwrap();
        let rho0 = initial_excited_coherent(&p, &f).unwrap();
        let grid = crate::noise::TimeGrid::new(3.0, 150).unwrap();
        let config = crate::ensemble::EnsembleConfig::new(2000, 909, grid).unwrap();
        let obs = vec![(
            "w".to_string(),
            HermitianOperator::new(inversion_operator(&p).matrix() * c64(2.0, 0.0)).unwrap(),
        )];
        let result = promo.monte_carlo(&rho0, &config, &obs, 50).unwrap();
        let stats = &result.observable_stats["w"];
        for (k, t) in grid.times().enumerate() {
            let closed = inversion_damped(&p, &f, gamma, t).unwrap();
            let diff = (stats.mean[k] - closed).abs();
            assert!(
                diff < 3.0 * stats.stderr[k] + 1e-9,
                "t={t}: MC {} vs closed {closed} (stderr {})",
                stats.mean[k],
                stats.stderr[k]
            );
        }
    }

    #[test]
    fn stochastic_jcm_closed_form_limits() {
        let weights = [0.5, 0.3, 0.2];
        // t = 0: excited atom
        assert_abs_diff_eq!(
            p_eg_stochastic_jcm(&weights, 1.0, 0.3, 0.0).unwrap(),
            0.0,
            epsilon = 1e-14
        );
        // γ = 0: ½(1 - Σ P_n cos) = Σ P_n sin²
        let t = 0.8;
        let coupling = 1.2;
        let direct: f64 = weights
            .iter()
            .enumerate()
            .map(|(n, w)| w * (coupling * t * ((n + 1) as f64).sqrt()).sin().powi(2))
            .sum();
        assert_abs_diff_eq!(
            p_eg_stochastic_jcm(&weights, coupling, 0.0, t).unwrap(),
            direct,
            epsilon = 1e-12
        );
        assert!(p_eg_stochastic_jcm(&[0.9, 0.9], 1.0, 0.1, 1.0).is_err());
    }

    #[test]
    fn stochastic_jcm_envelope_rate_in_cavity_regime() {
        // λ = 50π kHz, γ = 1/(2π), n̄ = 0.4 (times in ms): the n-th term
        // decays at 2(n+1)γλ
        let coupling = 50.0 * std::f64::consts::PI;
        let gamma = 1.0 / std::f64::consts::TAU; // 1/(2π)
        let n = 1usize;
        let rate = 2.0 * (n as f64 + 1.0) * gamma * coupling;
        let mut weights = vec![0.0; 3];
        weights[n] = 1.0;
        // at peak times cos = ±1, so |2P - 1| = e^{-rate·t}
        let t = std::f64::consts::PI / (coupling * ((n + 1) as f64).sqrt());
        let p_eg = p_eg_stochastic_jcm(&weights, coupling, gamma, t).unwrap();
        assert_abs_diff_eq!((2.0 * p_eg - 1.0).abs(), (-rate * t).exp(), epsilon = 1e-12);
    }

    #[test]
    fn coupling_kernel_accumulates_gamma_lambda_t() {
        let kernel = coupling_promotion_kernel(0.3, 2.0).unwrap();
        assert_abs_diff_eq!(kernel.lambda(1.5).unwrap(), 0.3 * 2.0 * 1.5, epsilon = 1e-14);
        assert!(coupling_promotion_kernel(0.0, 2.0).unwrap().is_zero());
        assert!(coupling_promotion_kernel(-0.1, 2.0).is_err());
    }

    #[test]
    fn stochastic_coupling_ensemble_reproduces_printed_envelope() {
        let p = JcmParams::resonant(0.4, 1.0, 1, 10).unwrap();
        let f = CoherentAmplitude::new(c64(0.4f64.sqrt(), 0.0), 10).unwrap();
        let gamma = 0.08;
        let promo = stochastic_coupling_promotion(&p, gamma).unwrap();
        let rho0 = initial_excited_coherent(&p, &f).unwrap();
        let grid = crate::noise::TimeGrid::new(4.0, 200).unwrap();
        let config = crate::ensemble::EnsembleConfig::new(1500, 4242, grid).unwrap();
        let obs = vec![("p_eg".to_string(), ground_projector(&p))];
        let result = promo.monte_carlo(&rho0, &config, &obs, 100).unwrap();
        let stats = &result.observable_stats["p_eg"];
        let weights = f.weights();
        for (k, t) in grid.times().enumerate() {
            let closed = p_eg_stochastic_jcm(&weights, p.coupling(), gamma, t).unwrap();
            let diff = (stats.mean[k] - closed).abs();
            assert!(
                diff < 3.0 * stats.stderr[k] + 1e-9,
                "t={t}: MC {} vs closed {closed} (stderr {})",
                stats.mean[k],
                stats.stderr[k]
            );
        }
    }
}
