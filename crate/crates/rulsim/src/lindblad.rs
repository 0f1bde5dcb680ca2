//! Direct integration of master equations of the form
//!
//! ```text
//! dρ/dt = -i[H, ρ] - Σ_i (v_i²(t)/2) [V_i, [V_i, ρ]]
//! ```
//!
//! with self-adjoint V_i and possibly time-dependent rates v_i²(t), plus the
//! Markov-only analytic path that exponentiates the vectorized generator.
//! The integrator is fixed-step classical RK4: grids are small, the
//! convergence-order check needs fixed steps, and reproducibility matters
//! more than adaptivity here.

use std::collections::BTreeMap;


use crate::error::{Error, Result};
use crate::linalg::{
    c64, commutator_superoperator, expm, unvec, vec_column_stack, CMat, DensityMatrix,
    HermitianOperator, Tolerances,
};
use crate::noise::{NoiseKernel, TimeGrid};

/// One dephasing channel: a self-adjoint operator with its rate kernel;
/// the instantaneous rate is v²(t).
#[derive(Debug, Clone)]
pub struct LindbladChannel {
    pub operator: HermitianOperator,
    pub kernel: NoiseKernel,
}

/// Hamiltonian plus self-adjoint dephasing channels, all sharing one
/// dimension (ħ = 1 throughout).
#[derive(Debug, Clone)]
pub struct LindbladModel {
    h: HermitianOperator,
    channels: Vec<LindbladChannel>,
}

/// Named Hermitian observables evaluated as Tr(ρ O) along an evolution.
pub type ObservableSet = Vec<(String, HermitianOperator)>;

/// Every grid point retained: `states[k]` is the state at `grid.time(k)`.
#[derive(Debug, Clone)]
pub struct EvolutionRecord {
    pub grid: TimeGrid,
    pub states: Vec<DensityMatrix>,
    pub observables: BTreeMap<String, Vec<f64>>,
}

/// Observables on every grid point, states only at sampled indices; the
/// memory-friendly variant for long fine-step integrations.
#[derive(Debug, Clone)]
pub struct SampledEvolution {
    pub grid: TimeGrid,
    pub observables: BTreeMap<String, Vec<f64>>,
    pub states: Vec<(usize, DensityMatrix)>,
}

impl LindbladModel {
    pub fn new(h: HermitianOperator, channels: Vec<LindbladChannel>) -> Result<Self> {
        let dim = h.dim();
        for ch in &channels {
            if ch.operator.dim() != dim {
                return Err(Error::DimensionMismatch {
                    left: dim,
                    right: ch.operator.dim(),
                });
            }
        }
        Ok(LindbladModel { h, channels })
    }

    pub fn hamiltonian(&self) -> &HermitianOperator {
        &self.h
    }

    pub fn channels(&self) -> &[LindbladChannel] {
        &self.channels
    }

    pub fn dim(&self) -> usize {
        self.h.dim()
    }

    /// Right-hand side -i[H,ρ] - Σ_i (v_i²(t)/2)[V_i,[V_i,ρ]].
    ///
    /// Accepts any square matrix (e.g. single coherences |j⟩⟨k|); the result
    /// is Hermitian and traceless whenever ρ is Hermitian.
    pub fn generator_apply(&self, rho: &CMat, t: f64) -> Result<CMat> {
        if rho.nrows() != self.dim() || rho.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                left: self.dim(),
                right: rho.nrows(),
            });
        }
        let mut out =
            crate::linalg::commutator(self.h.matrix(), rho)? * c64(0.0, -1.0);
        for ch in &self.channels {
            let v = ch.kernel.value(t)?;
            let half_rate = 0.5 * v * v;
            if half_rate == 0.0 {
                continue;
            }
            out -= crate::linalg::double_commutator_apply(&ch.operator, rho)?
                * c64(half_rate, 0.0);
        }
        Ok(out)
    }

    fn prepared(&self) -> PreparedGenerator<'_> {
        PreparedGenerator {
            h: self.h.matrix(),
            channels: self.channels.iter().map(|ch| ch.operator.matrix()).collect(),
        }
    }

    /// RK4 integration storing every grid point; each stored state is
    /// re-validated against the density-matrix invariants.
    pub fn integrate(&self, rho0: &DensityMatrix, grid: &TimeGrid) -> Result<EvolutionRecord> {
        self.integrate_with_observables(rho0, grid, &[])
    }

    pub fn integrate_with_observables(
        &self,
        rho0: &DensityMatrix,
        grid: &TimeGrid,
        observables: &[(String, HermitianOperator)],
    ) -> Result<EvolutionRecord> {
        let sampled = self.integrate_sampled(rho0, grid, observables, 1)?;
        Ok(EvolutionRecord {
            grid: *grid,
            states: sampled.states.into_iter().map(|(_, s)| s).collect(),
            observables: sampled.observables,
        })
    }

    /// RK4 with observables on every grid point and states kept (and
    /// validated) every `state_stride` points; the final point is always
    /// kept. `state_stride = 0` keeps only the endpoints.
    pub fn integrate_sampled(
        &self,
        rho0: &DensityMatrix,
        grid: &TimeGrid,
        observables: &[(String, HermitianOperator)],
        state_stride: usize,
    ) -> Result<SampledEvolution> {
        if rho0.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                left: self.dim(),
                right: rho0.dim(),
            });
        }
        let prepared = self.prepared();
        let kernels: Vec<&NoiseKernel> = self.channels.iter().map(|ch| &ch.kernel).collect();
        integrate_generator_sampled(
            move |t: f64, rho: &CMat| -> Result<CMat> {
                let mut rates = Vec::with_capacity(kernels.len());
                for k in &kernels {
                    let v = k.value(t)?;
                    rates.push(0.5 * v * v);
                }
                Ok(prepared.apply(rho, t, &rates))
            },
            rho0,
            grid,
            observables,
            state_stride,
        )
    }

    /// Matrix of the Markovian generator under column-stacking vectorization.
    /// Only valid when every kernel is constant.
    pub fn superoperator_matrix(&self) -> Result<CMat> {
        let dim = self.dim();
        let mut sup = commutator_superoperator(self.h.matrix())? * c64(0.0, -1.0);
        for (idx, ch) in self.channels.iter().enumerate() {
            let gamma = match ch.kernel {
                NoiseKernel::Constant(c) => c * c,
                _ => return Err(Error::NonConstantKernel { channel: idx }),
            };
            if gamma == 0.0 {
                continue;
            }
            let cv = commutator_superoperator(ch.operator.matrix())?;
            sup -= (&cv * &cv) * c64(0.5 * gamma, 0.0);
        }
        debug_assert_eq!(sup.nrows(), dim * dim);
        Ok(sup)
    }

    /// exp(t L) vec(ρ0) through the dense Liouvillian exponential; the
    /// analytic oracle for [`LindbladModel::integrate`] in the Markov case.
    pub fn analytic_markov_evolve(&self, rho0: &DensityMatrix, t: f64) -> Result<DensityMatrix> {
        if rho0.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                left: self.dim(),
                right: rho0.dim(),
            });
        }
        let sup = self.superoperator_matrix()?;
        let propagator = expm(&(sup * c64(t, 0.0)))?;
        let evolved = &propagator * vec_column_stack(rho0.matrix());
        DensityMatrix::new(unvec(self.dim(), &evolved)?)
    }
}

/// Borrowed operator views used in the RK4 hot loop. Exploits Hermiticity of
/// H, V and ρ: [H,ρ] = G - G^H with G = Hρ, and
/// [V,[V,ρ]] = A + A^H - 2 K V with K = Vρ, A = V K. The adjoint forms also
/// re-symmetrize roundoff drift.
struct PreparedGenerator<'a> {
    h: &'a CMat,
    channels: Vec<&'a CMat>,
}

impl PreparedGenerator<'_> {
    fn apply(&self, rho: &CMat, _t: f64, half_rates: &[f64]) -> CMat {
        let g = self.h * rho;
        let mut out = (&g - g.adjoint()) * c64(0.0, -1.0);
        for (v, &half_rate) in self.channels.iter().zip(half_rates) {
            if half_rate == 0.0 {
                continue;
            }
            let k = *v * rho;
            let a = *v * &k;
            let dc = &a + a.adjoint() - (&k * *v) * c64(2.0, 0.0);
            out -= dc * c64(half_rate, 0.0);
        }
        out
    }
}

/// Fixed-step RK4 for an arbitrary matrix-valued generator; shared by the
/// Lindblad models and the intrinsic-decoherence generators.
pub fn integrate_generator_sampled(
    generator: impl Fn(f64, &CMat) -> Result<CMat>,
    rho0: &DensityMatrix,
    grid: &TimeGrid,
    observables: &[(String, HermitianOperator)],
    state_stride: usize,
) -> Result<SampledEvolution> {
    let dt = grid.dt();
    let half = dt / 2.0;
    let mut rho = rho0.matrix().clone();

    let mut obs_series: BTreeMap<String, Vec<f64>> = observables
        .iter()
        .map(|(name, _)| (name.clone(), Vec::with_capacity(grid.n_points())))
        .collect();
    let mut states = Vec::new();

    let keep = |k: usize| -> bool {
        k == 0 || k == grid.n_steps() || (state_stride > 0 && k % state_stride == 0)
    };

    let record = |k: usize,
                  rho: &CMat,
                  states: &mut Vec<(usize, DensityMatrix)>,
                  obs_series: &mut BTreeMap<String, Vec<f64>>|
     -> Result<()> {
        for (name, op) in observables {
            let val = crate::linalg::expectation_from_matrix(rho, op.matrix());
            obs_series.get_mut(name).expect("series exists").push(val);
        }
        if keep(k) {
            let state = DensityMatrix::with_tolerances(rho.clone(), &Tolerances::default())
                .map_err(|e| Error::StepInvariant {
                    step: k,
                    t: grid.time(k),
                    source: Box::new(e),
                })?;
            states.push((k, state));
        }
        Ok(())
    };

    record(0, &rho, &mut states, &mut obs_series)?;
    for k in 0..grid.n_steps() {
        let t = grid.time(k);
        let k1 = generator(t, &rho)?;
        let k2 = generator(t + half, &(&rho + &k1 * c64(half, 0.0)))?;
        let k3 = generator(t + half, &(&rho + &k2 * c64(half, 0.0)))?;
        let k4 = generator(t + dt, &(&rho + &k3 * c64(dt, 0.0)))?;
        rho += (k1 + k2 * c64(2.0, 0.0) + k3 * c64(2.0, 0.0) + k4) * c64(dt / 6.0, 0.0);
        record(k + 1, &rho, &mut states, &mut obs_series)?;
    }

    Ok(SampledEvolution {
        grid: *grid,
        observables: obs_series,
        states,
    })
}
