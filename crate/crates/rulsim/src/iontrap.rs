//! First-blue-sideband ion trap: H = ηΩ(S₊a† + S₋a) with dressed doublets
//! |e_n^±⟩ = (|−,n−1⟩ ± |+,n⟩)/√2 at energies ±ηΩ√n, stochastically promoted
//! dressed phases with level-dependent noise amplitudes ±½√Γ nᵈ, the
//! resulting P₋(t) = ½(1 + e^{-Γt(n+1)^{2d}/2} cos(2ηΩt√(n+1))) decay law,
//! and the log-log fit extracting the decay exponent from simulated
//! envelopes.
//!
//! Basis ordering matches the JCM module: atom-major, |+⟩ first,
//! index(atom, n) = atom·(n_max+1) + n.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::ensemble::{EnsembleConfig, EnsembleResult};
use crate::error::{Error, Result};
use crate::linalg::{c64, CMat, DensityMatrix, HermitianOperator};
use crate::noise::{CorrelationSpec, NoiseKernel};
use crate::phasemc::PhasePromotion;

#[derive(Debug, Clone, Copy)]
pub struct TrapParams {
    eta: f64,
    rabi: f64,
    trap_freq: f64,
    detuning: f64,
    n_max: usize,
}

impl TrapParams {
    pub fn new(eta: f64, rabi: f64, trap_freq: f64, detuning: f64, n_max: usize) -> Result<Self> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::InvalidParameter {
                reason: format!("Lamb-Dicke parameter must be positive, got {eta}"),
            });
        }
        if !(rabi > 0.0) || !rabi.is_finite() {
            return Err(Error::InvalidParameter {
                reason: format!("Rabi frequency must be positive, got {rabi}"),
            });
        }
        if n_max < 1 {
            return Err(Error::InvalidParameter {
                reason: "n_max must be at least 1".into(),
            });
        }
        Ok(TrapParams {
            eta,
            rabi,
            trap_freq,
            detuning,
            n_max,
        })
    }

    /// Laser tuned to the first blue sideband: δ = ω_z.
    pub fn first_blue_sideband(eta: f64, rabi: f64, trap_freq: f64, n_max: usize) -> Result<Self> {
        Self::new(eta, rabi, trap_freq, trap_freq, n_max)
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn rabi(&self) -> f64 {
        self.rabi
    }

    pub fn trap_freq(&self) -> f64 {
        self.trap_freq
    }

    pub fn detuning(&self) -> f64 {
        self.detuning
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

    /// Sideband Rabi frequency ηΩ√(n+1) of the |−,n⟩ ↔ |+,n+1⟩ transition.
    pub fn sideband_frequency(&self, n: usize) -> f64 {
        self.eta * self.rabi * ((n + 1) as f64).sqrt()
    }
}

/// ηΩ (S₊ a† + S₋ a) on the truncated space.
pub fn blue_sideband_hamiltonian(p: &TrapParams) -> HermitianOperator {
    let dim = p.dim();
    let fock = p.fock_dim();
    let mut h = CMat::zeros(dim, dim);
    let scale = p.eta * p.rabi;
    // ⟨+, n+1| H |−, n⟩ = ηΩ √(n+1)
    for n in 0..p.n_max {
        let row = n + 1; // |+, n+1⟩
        let col = fock + n; // |−, n⟩
        let val = c64(scale * ((n + 1) as f64).sqrt(), 0.0);
        h[(row, col)] = val;
        h[(col, row)] = val;
    }
    HermitianOperator::new(h).expect("symmetric real matrix")
}

/// |−⟩⟨−| ⊗ I.
pub fn ground_projector(p: &TrapParams) -> HermitianOperator {
    let mut m = CMat::zeros(p.dim(), p.dim());
    for n in 0..p.fock_dim() {
        m[(p.fock_dim() + n, p.fock_dim() + n)] = c64(1.0, 0.0);
    }
    HermitianOperator::new(m).expect("projector")
}

/// Dressed-label annotation: COM level n with internal sign m_z (0 for the
/// zero modes |+,0⟩ and the truncation edge |−,n_max⟩, which carries the
/// level index n_max+1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DressedLabel {
    pub n: usize,
    pub mz: i8,
}

/// Analytic dressed basis: columns, eigenvalues and labels in the fixed
/// order [(0,+), (1,+), (1,−), ..., (n_max,+), (n_max,−), (n_max+1,−)].
pub fn dressed_basis(p: &TrapParams) -> (CMat, Vec<f64>, Vec<DressedLabel>) {
    let dim = p.dim();
    let fock = p.fock_dim();
    let mut basis = CMat::zeros(dim, dim);
    let mut eigenvalues = Vec::with_capacity(dim);
    let mut labels = Vec::with_capacity(dim);
    let mut col = 0;

    // |e_0^+⟩ = |+, 0⟩ at zero energy
    basis[(0, col)] = c64(1.0, 0.0);
    eigenvalues.push(0.0);
    labels.push(DressedLabel { n: 0, mz: 1 });
    col += 1;

    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    for n in 1..=p.n_max {
        for &sign in &[1.0f64, -1.0] {
            // (|−, n−1⟩ ± |+, n⟩)/√2 at ±ηΩ√n
            basis[(fock + n - 1, col)] = c64(inv_sqrt2, 0.0);
            basis[(n, col)] = c64(sign * inv_sqrt2, 0.0);
            eigenvalues.push(sign * p.eta * p.rabi * (n as f64).sqrt());
            labels.push(DressedLabel {
                n,
                mz: sign as i8,
            });
            col += 1;
        }
    }

    // truncation edge |−, n_max⟩: no partner above the cut, zero energy
    basis[(fock + p.n_max, col)] = c64(1.0, 0.0);
    eigenvalues.push(0.0);
    labels.push(DressedLabel {
        n: p.n_max + 1,
        mz: -1,
    });

    (basis, eigenvalues, labels)
}

// ---------------------------------------------------------------------------
// Level-dependent noise
// ---------------------------------------------------------------------------

/// Stochastic perturbation of the dressed levels: velocity v per dressed
/// label and correlation of the driving Brownian motions across labels.
/// The level hypothesis e_n^+ - e_n^- → e_n^+ - e_n^- + √Γ nᵈ ξ_t pins the
/// within-level velocity difference to √Γ nᵈ.
#[derive(Debug, Clone)]
pub struct LevelNoiseSpec {
    gamma_scale: f64,
    level_exponent: f64,
    labels: Vec<DressedLabel>,
    velocities: Vec<f64>,
    correlation: CorrelationSpec,
}

impl LevelNoiseSpec {
    /// Symmetric default: v_n^± = ±½√Γ nᵈ, levels fully correlated within
    /// (g_{n,n}^{+,-} = 1) and independent across n.
    pub fn symmetric(gamma_scale: f64, level_exponent: f64, p: &TrapParams) -> Result<Self> {
        if gamma_scale < 0.0 {
            return Err(Error::NegativeParameter {
                name: "gamma_scale",
                value: gamma_scale,
            });
        }
        let (_, _, labels) = dressed_basis(p);
        let half_amp = |n: usize| 0.5 * gamma_scale.sqrt() * (n as f64).powf(level_exponent);
        let velocities: Vec<f64> = labels
            .iter()
            .map(|l| l.mz as f64 * half_amp(l.n))
            .collect();
        // one all-ones block per complete level, singleton blocks elsewhere
        let mut blocks: Vec<DMatrix<f64>> = vec![DMatrix::from_element(1, 1, 1.0)];
        for _ in 1..=p.n_max() {
            blocks.push(DMatrix::from_element(2, 2, 1.0));
        }
        blocks.push(DMatrix::from_element(1, 1, 1.0));
        let correlation = CorrelationSpec::from_blocks(&blocks)?;
        Self::new(gamma_scale, level_exponent, labels, velocities, correlation)
    }

    /// Arbitrary velocities and correlation, validated against the
    /// within-level difference constraint v_n^+ - v_n^- = √Γ nᵈ.
    pub fn new(
        gamma_scale: f64,
        level_exponent: f64,
        labels: Vec<DressedLabel>,
        velocities: Vec<f64>,
        correlation: CorrelationSpec,
    ) -> Result<Self> {
        if gamma_scale < 0.0 {
            return Err(Error::NegativeParameter {
                name: "gamma_scale",
                value: gamma_scale,
            });
        }
        if labels.len() != velocities.len() || correlation.dim() != labels.len() {
            return Err(Error::DimensionMismatch {
                left: labels.len(),
                right: velocities.len().min(correlation.dim()),
            });
        }
        for (i, li) in labels.iter().enumerate() {
            if li.mz != 1 {
                continue;
            }
            if let Some(j) = labels.iter().position(|lj| lj.n == li.n && lj.mz == -1) {
                let expected = gamma_scale.sqrt() * (li.n as f64).powf(level_exponent);
                let got = velocities[i] - velocities[j];
                if (got - expected).abs() > 1e-9 * expected.max(1.0) {
                    return Err(Error::InvalidParameter {
                        reason: format!(
                            "level {}: v⁺ - v⁻ = {got}, constraint requires √Γ n^d = {expected}",
                            li.n
                        ),
                    });
                }
            }
        }
        Ok(LevelNoiseSpec {
            gamma_scale,
            level_exponent,
            labels,
            velocities,
            correlation,
        })
    }

    pub fn gamma_scale(&self) -> f64 {
        self.gamma_scale
    }

    pub fn level_exponent(&self) -> f64 {
        self.level_exponent
    }

    pub fn labels(&self) -> &[DressedLabel] {
        &self.labels
    }

    pub fn correlation(&self) -> &CorrelationSpec {
        &self.correlation
    }

    fn label_index(&self, n: usize, mz: i8) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l.n == n && l.mz == mz)
            .ok_or(Error::IndexOutOfRange {
                index: n,
                max: self.labels.len(),
            })
    }

    /// Instantaneous dephasing rate λ_{ab} = v_a² + v_b² - 2 v_a v_b g_ab
    /// between two labels (unit diagonal of g already applied).
    pub fn pair_rate(&self, a: usize, b: usize) -> f64 {
        let (va, vb) = (self.velocities[a], self.velocities[b]);
        va * va + vb * vb - 2.0 * va * vb * self.correlation.matrix()[(a, b)]
    }
}

// ---------------------------------------------------------------------------
// Initial states
// ---------------------------------------------------------------------------

/// COM initial state with the internal state fixed to ground |−⟩.
#[derive(Debug, Clone, Copy)]
pub enum ComInitialState {
    Fock(usize),
    Thermal(f64),
    Coherent(Complex64),
}

const TRUNCATION_TOLERANCE: f64 = 1e-10;

impl ComInitialState {
    /// Diagonal photon weights P_n, n = 0..=n_max; errors when the
    /// truncated weights fall below 1 - 1e-10.
    pub fn weights(&self, n_max: usize) -> Result<Vec<f64>> {
        match *self {
            ComInitialState::Fock(n) => {
                if n > n_max {
                    return Err(Error::IndexOutOfRange { index: n, max: n_max });
                }
                let mut w = vec![0.0; n_max + 1];
                w[n] = 1.0;
                Ok(w)
            }
            ComInitialState::Thermal(nbar) => {
                if nbar < 0.0 {
                    return Err(Error::NegativeParameter {
                        name: "nbar",
                        value: nbar,
                    });
                }
                let ratio = nbar / (1.0 + nbar);
                let weights: Vec<f64> = (0..=n_max)
                    .map(|n| ratio.powi(n as i32) / (1.0 + nbar))
                    .collect();
                let retained: f64 = weights.iter().sum();
                if retained < 1.0 - TRUNCATION_TOLERANCE {
                    return Err(Error::TruncationInadequate {
                        retained,
                        required: 1.0 - TRUNCATION_TOLERANCE,
                    });
                }
                Ok(weights)
            }
            ComInitialState::Coherent(alpha) => {
                Ok(crate::jcm::CoherentAmplitude::new(alpha, n_max)?.weights())
            }
        }
    }

    /// Smallest adequate truncation for this state plus `guard` levels.
    pub fn auto_n_max(&self, guard: usize) -> usize {
        match *self {
            ComInitialState::Fock(n) => n + guard.max(1),
            ComInitialState::Thermal(nbar) => {
                if nbar <= 0.0 {
                    return 1 + guard;
                }
                let ratio = nbar / (1.0 + nbar);
                // (n̄/(1+n̄))^{N+1} ≤ tolerance
                let n = (TRUNCATION_TOLERANCE.ln() / ratio.ln()).ceil() as usize;
                n + guard
            }
            ComInitialState::Coherent(alpha) => {
                crate::jcm::CoherentAmplitude::auto_n_max(alpha, guard)
            }
        }
    }

    /// |−⟩⟨−| ⊗ ρ_COM on the trap space (pure for Fock and coherent, mixed
    /// for thermal).
    pub fn density_matrix(&self, p: &TrapParams) -> Result<DensityMatrix> {
        let fock = p.fock_dim();
        match *self {
            ComInitialState::Coherent(alpha) => {
                let amp = crate::jcm::CoherentAmplitude::new(alpha, p.n_max())?;
                let mut psi = crate::linalg::CVec::zeros(p.dim());
                for n in 0..=p.n_max() {
                    psi[fock + n] = amp.amplitude(n);
                }
                DensityMatrix::pure(&psi)
            }
            _ => {
                let weights = self.weights(p.n_max())?;
                let total: f64 = weights.iter().sum();
                let mut mat = CMat::zeros(p.dim(), p.dim());
                for (n, &w) in weights.iter().enumerate() {
                    mat[(fock + n, fock + n)] = c64(w / total, 0.0);
                }
                DensityMatrix::new(mat)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Promoted evolution
// ---------------------------------------------------------------------------

/// Phase promotion of the dressed evolution under a level noise spec:
/// one noise channel per dressed label, correlated per the spec.
pub fn promotion(p: &TrapParams, noise: &LevelNoiseSpec) -> Result<PhasePromotion> {
    let (basis, eigenvalues, labels) = dressed_basis(p);
    if labels != noise.labels {
        return Err(Error::InvalidParameter {
            reason: "noise spec labels do not match the trap's dressed labels".into(),
        });
    }
    let n_labels = labels.len();
    let coeff: Vec<Vec<f64>> = (0..n_labels)
        .map(|g| {
            let mut row = vec![0.0; n_labels];
            row[g] = noise.velocities[g];
            row
        })
        .collect();
    PhasePromotion::new(
        basis,
        eigenvalues,
        (0..n_labels).collect(),
        coeff,
        vec![NoiseKernel::constant(1.0)?; n_labels],
        noise.correlation.clone(),
    )
}

/// Closed-form averaged state
/// ρ(t) = Σ e^{-i(e_a - e_b)t - Λ_ab(t)/2} P_a ρ0 P_b with
/// Λ_ab(t) = t·(v_a² + v_b² - 2 v_a v_b g_ab); same-label blocks undamped.
pub fn promoted_density_matrix(
    p: &TrapParams,
    rho0: &DensityMatrix,
    noise: &LevelNoiseSpec,
    t: f64,
) -> Result<DensityMatrix> {
    promotion(p, noise)?.closed_form_state(rho0, t)
}

/// Monte Carlo sampling of the promoted evolution; agrees with
/// [`promoted_density_matrix`] within sampling error.
pub fn mc_promoted_evolution(
    p: &TrapParams,
    rho0: &DensityMatrix,
    noise: &LevelNoiseSpec,
    config: &EnsembleConfig,
    observables: &[(String, HermitianOperator)],
    state_stride: usize,
) -> Result<EnsembleResult> {
    promotion(p, noise)?.monte_carlo(rho0, config, observables, state_stride)
}

/// P₋(t) for the initial state |−⟩⊗|n⟩, computed from the noise spec's
/// actual label rates: ½(1 + e^{-Λ_{n+1}^{+,-}(t)/2} cos(2ηΩt√(n+1))).
pub fn p_minus_fock(p: &TrapParams, n: usize, noise: &LevelNoiseSpec, t: f64) -> Result<f64> {
    if n + 1 > p.n_max() {
        return Err(Error::IndexOutOfRange {
            index: n,
            max: p.n_max() - 1,
        });
    }
    let plus = noise.label_index(n + 1, 1)?;
    let minus = noise.label_index(n + 1, -1)?;
    let rate = noise.pair_rate(plus, minus);
    let angle = 2.0 * p.sideband_frequency(n) * t;
    Ok(0.5 * (1.0 + (-0.5 * rate * t).exp() * angle.cos()))
}

/// Weighted P₋(t) = ½(1 + Σ P_n e^{-Γt(n+1)^{2d}/2} cos(2ηΩt√(n+1))) for a
/// Fock, thermal or coherent COM distribution; the per-term envelopes come
/// from the spec's (Γ, d) law directly.
pub fn p_minus_distribution(
    p: &TrapParams,
    init: &ComInitialState,
    noise: &LevelNoiseSpec,
    t: f64,
) -> Result<f64> {
    let weights = init.weights(p.n_max())?;
    let gamma = noise.gamma_scale();
    let two_d = 2.0 * noise.level_exponent();
    let mut sum = 0.0;
    for (n, &w) in weights.iter().enumerate() {
        let envelope = (-0.5 * gamma * t * ((n + 1) as f64).powf(two_d)).exp();
        sum += w * envelope * (2.0 * p.sideband_frequency(n) * t).cos();
    }
    Ok(0.5 * (1.0 + sum))
}

// ---------------------------------------------------------------------------
// Decay-rate extraction and exponent fit
// ---------------------------------------------------------------------------

/// Envelope decay rate of a damped sideband oscillation
/// P(t) ≈ ½(1 + e^{-rt} cos(2ft)): reads |2P-1| at the extremal times
/// t_k = kπ/(2f) (which must lie on the sampled grid) and regresses
/// log-linearly while the envelope stays above the noise floor.
pub fn envelope_decay_rate(times: &[f64], p_minus: &[f64], oscillation_frequency: f64) -> Result<f64> {
    if times.len() != p_minus.len() || times.len() < 2 {
        return Err(Error::NotEnoughPoints {
            required: 2,
            got: times.len().min(p_minus.len()),
        });
    }
    let dt = times[1] - times[0];
    let peak_spacing = std::f64::consts::PI / (2.0 * oscillation_frequency);
    let mut samples = Vec::new();
    let mut k = 1usize;
    loop {
        let t_k = k as f64 * peak_spacing;
        let idx = (t_k / dt).round() as usize;
        if idx >= times.len() {
            break;
        }
        if (times[idx] - t_k).abs() > 1e-6 * peak_spacing.max(dt) {
            return Err(Error::InvalidParameter {
                reason: format!(
                    "sampling grid does not contain the envelope extremum at t = {t_k:.6e}"
                ),
            });
        }
        let envelope = (2.0 * p_minus[idx] - 1.0).abs();
        if envelope < 0.15 {
            break;
        }
        samples.push((t_k, envelope.ln()));
        k += 1;
    }
    if samples.len() < 3 {
        return Err(Error::NotEnoughPoints {
            required: 3,
            got: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let sx: f64 = samples.iter().map(|(x, _)| x).sum();
    let sy: f64 = samples.iter().map(|(_, y)| y).sum();
    let sxx: f64 = samples.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = samples.iter().map(|(x, y)| x * y).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    Ok(-slope)
}

#[derive(Debug, Clone, Copy)]
pub struct DecayFit {
    /// Fitted exponent of rate ∝ (n+1)^exponent (≈ 2d).
    pub exponent: f64,
    /// Fitted prefactor (≈ Γ/2).
    pub scale: f64,
    /// Largest relative deviation of the input rates from the fit.
    pub max_relative_residual: f64,
}

/// Least-squares fit of log(rate) = log(scale) + exponent·log(n+1).
pub fn fit_decay_exponent(rates: &[(usize, f64)]) -> Result<DecayFit> {
    if rates.len() < 3 {
        return Err(Error::NotEnoughPoints {
            required: 3,
            got: rates.len(),
        });
    }
    if let Some(&(n, r)) = rates.iter().find(|&&(_, r)| !(r > 0.0)) {
        return Err(Error::InvalidParameter {
            reason: format!("decay rate for n = {n} is not positive ({r})"),
        });
    }
    let pts: Vec<(f64, f64)> = rates
        .iter()
        .map(|&(n, r)| (((n + 1) as f64).ln(), r.ln()))
        .collect();
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|(x, _)| x).sum();
    let sy: f64 = pts.iter().map(|(_, y)| y).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = pts.iter().map(|(x, y)| x * y).sum();
    let exponent = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - exponent * sx) / n;
    let scale = intercept.exp();
    let max_relative_residual = rates
        .iter()
        .map(|&(n, r)| {
            let fitted = scale * ((n + 1) as f64).powf(exponent);
            ((r - fitted) / fitted).abs()
        })
        .fold(0.0f64, f64::max);
    Ok(DecayFit {
        exponent,
        scale,
        max_relative_residual,
    })
}
