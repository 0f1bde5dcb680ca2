//! Monte Carlo realization of Lindblad flows as averaged random unitary
//! evolution: sample unitary trajectories driven by Brownian phases, average
//! U ρ U† over trajectories, and compare against the direct integrator.
//!
//! Also hosts the state-vector side of the story: the conditional variance
//! process Ṽ_t (constant along random unitary trajectories) and collapse-model
//! trajectories (Ṽ_t contracting), which average to the same master equation.
//!
//! Reduction over trajectories is a fixed binary tree keyed on trajectory
//! index with sequential leaves, so the result is bit-identical for any
//! worker count.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{
    c64, commutator, eigen_basis, expectation_from_matrix, identity, max_abs, CMat, CVec,
    DensityMatrix, EigenBasis, HermitianOperator,
};
use crate::lindblad::ObservableSet;
use crate::noise::{ito_integral_from_increments, BrownianIncrementStream, NoiseKernel, TimeGrid};

/// Absolute commutator threshold for the commuting-case fast path.
const COMMUTING_TOL: f64 = 1e-10;

/// Hamiltonian plus noise channels (V_i, v_i) driving the random unitary
/// U(t); `commuting` records whether H and all V_i commute pairwise, which
/// enables the shared-eigenbasis evaluation.
#[derive(Debug, Clone)]
pub struct RandomUnitaryModel {
    h: HermitianOperator,
    channels: Vec<(HermitianOperator, NoiseKernel)>,
    commuting: bool,
}

impl RandomUnitaryModel {
    pub fn new(h: HermitianOperator, channels: Vec<(HermitianOperator, NoiseKernel)>) -> Result<Self> {
        let dim = h.dim();
        for (v, _) in &channels {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch {
                    left: dim,
                    right: v.dim(),
                });
            }
        }
        let mut ops: Vec<&CMat> = vec![h.matrix()];
        ops.extend(channels.iter().map(|(v, _)| v.matrix()));
        let mut commuting = true;
        'outer: for i in 0..ops.len() {
            for j in (i + 1)..ops.len() {
                if max_abs(&commutator(ops[i], ops[j])?) >= COMMUTING_TOL {
                    commuting = false;
                    break 'outer;
                }
            }
        }
        Ok(RandomUnitaryModel {
            h,
            channels,
            commuting,
        })
    }

    pub fn hamiltonian(&self) -> &HermitianOperator {
        &self.h
    }

    pub fn channels(&self) -> &[(HermitianOperator, NoiseKernel)] {
        &self.channels
    }

    pub fn commuting(&self) -> bool {
        self.commuting
    }

    pub fn dim(&self) -> usize {
        self.h.dim()
    }

    /// Matching master-equation model (same H, same channels).
    pub fn lindblad_model(&self) -> Result<crate::lindblad::LindbladModel> {
        crate::lindblad::LindbladModel::new(
            self.h.clone(),
            self.channels
                .iter()
                .map(|(v, k)| crate::lindblad::LindbladChannel {
                    operator: v.clone(),
                    kernel: k.clone(),
                })
                .collect(),
        )
    }

    fn sample_channel_increments(&self, master_seed: u64, trajectory: u64, grid: &TimeGrid) -> Vec<Vec<f64>> {
        (0..self.channels.len())
            .map(|ch| {
                BrownianIncrementStream::new(master_seed, trajectory, ch as u64, *grid)
                    .sample_increments()
            })
            .collect()
    }

    /// U(t_k) = exp(-i t_k H - i Σ_i X_i(t_k) V_i) evaluated in the shared
    /// eigenbasis; exact for commuting models, each U unitary to roundoff.
    pub fn trajectory_commuting(
        &self,
        increments: &[Vec<f64>],
        grid: &TimeGrid,
    ) -> Result<Vec<CMat>> {
        if !self.commuting {
            return Err(Error::InvalidParameter {
                reason: "trajectory_commuting requires a commuting model".into(),
            });
        }
        let shared = self.shared_basis()?;
        let paths = self.ito_paths(increments, grid)?;
        let dim = self.dim();
        let mut out = Vec::with_capacity(grid.n_points());
        for k in 0..grid.n_points() {
            let t = grid.time(k);
            let mut scaled = shared.basis.clone();
            for j in 0..dim {
                let mut phase = t * shared.h_diag[j];
                for (i, path) in paths.iter().enumerate() {
                    phase += path[k] * shared.v_diags[i][j];
                }
                let factor = Complex64::from_polar(1.0, -phase);
                for r in 0..dim {
                    scaled[(r, j)] *= factor;
                }
            }
            out.push(&scaled * shared.basis.adjoint());
        }
        Ok(out)
    }

    /// Lie-Trotter stepping U(t_{k+1}) = e^{-iHΔt} e^{-i Σ_i v_i(t_k) ΔB_k^i V_i} U(t_k)
    /// with U(0) = I; every factor is exactly unitary, any model admitted.
    pub fn trajectory_general(&self, increments: &[Vec<f64>], grid: &TimeGrid) -> Result<Vec<CMat>> {
        let stepper = self.stepper(grid)?;
        let mut u = identity(self.dim());
        let mut out = Vec::with_capacity(grid.n_points());
        out.push(u.clone());
        for k in 0..grid.n_steps() {
            u = stepper.advance(&u, grid.time(k), increments, k)?;
            out.push(u.clone());
        }
        Ok(out)
    }

    fn ito_paths(&self, increments: &[Vec<f64>], grid: &TimeGrid) -> Result<Vec<Vec<f64>>> {
        if increments.len() != self.channels.len() {
            return Err(Error::DimensionMismatch {
                left: self.channels.len(),
                right: increments.len(),
            });
        }
        self.channels
            .iter()
            .zip(increments)
            .map(|((_, kernel), inc)| ito_integral_from_increments(kernel, grid, inc))
            .collect()
    }

    fn shared_basis(&self) -> Result<SharedBasis> {
        let mut ops: Vec<&CMat> = vec![self.h.matrix()];
        ops.extend(self.channels.iter().map(|(v, _)| v.matrix()));
        let (basis, diagonals) = simultaneous_eigenbasis(&ops)?;
        let mut diags = diagonals.into_iter();
        let h_diag = diags.next().expect("H diagonal present");
        Ok(SharedBasis {
            basis,
            h_diag,
            v_diags: diags.collect(),
        })
    }

    fn stepper(&self, grid: &TimeGrid) -> Result<GeneralStepper<'_>> {
        let h_basis = eigen_basis(&self.h)?;
        let step_unitary = h_basis.phase_exponential(grid.dt());
        let single_channel = if self.channels.len() == 1 {
            Some(eigen_basis(&self.channels[0].0)?)
        } else {
            None
        };
        Ok(GeneralStepper {
            step_unitary,
            single_channel,
            channels: &self.channels,
        })
    }
}

struct SharedBasis {
    basis: CMat,
    h_diag: Vec<f64>,
    v_diags: Vec<Vec<f64>>,
}

struct GeneralStepper<'m> {
    step_unitary: CMat,
    single_channel: Option<EigenBasis>,
    channels: &'m [(HermitianOperator, NoiseKernel)],
}

impl GeneralStepper<'_> {
    fn advance(&self, u: &CMat, t: f64, increments: &[Vec<f64>], k: usize) -> Result<CMat> {
        let noisy = if self.channels.is_empty() {
            u.clone()
        } else if let Some(basis) = &self.single_channel {
            let kick = self.channels[0].1.value(t)? * increments[0][k];
            basis.phase_exponential(kick) * u
        } else {
            let dim = u.nrows();
            let mut combo = CMat::zeros(dim, dim);
            for (i, (v, kernel)) in self.channels.iter().enumerate() {
                combo += v.matrix() * c64(kernel.value(t)? * increments[i][k], 0.0);
            }
            let basis = eigen_basis(&HermitianOperator::new(combo)?)?;
            basis.phase_exponential(1.0) * u
        };
        Ok(&self.step_unitary * noisy)
    }
}

/// Common eigenbasis of pairwise-commuting Hermitian operators, refined
/// operator by operator inside degenerate blocks; validated by the final
/// off-diagonal residual of every operator.
pub fn simultaneous_eigenbasis(ops: &[&CMat]) -> Result<(CMat, Vec<Vec<f64>>)> {
    let dim = ops[0].nrows();
    let mut basis = identity(dim);
    let mut blocks: Vec<Range<usize>> = vec![0..dim];
    for op in ops {
        let scale = max_abs(op).max(f64::MIN_POSITIVE);
        let mut next_blocks = Vec::new();
        for block in &blocks {
            let len = block.len();
            if len == 1 {
                next_blocks.push(block.clone());
                continue;
            }
            let cols = basis.columns(block.start, len).into_owned();
            let restricted = cols.adjoint() * *op * &cols;
            let sub = eigen_basis(&HermitianOperator::with_tolerances(
                restricted,
                &crate::linalg::Tolerances {
                    // restriction of a Hermitian op is Hermitian up to roundoff
                    hermiticity: 1e-9,
                    ..Default::default()
                },
            )?)?;
            let rotated = &cols * &sub.vectors;
            for (offset, col) in (block.start..block.end).enumerate() {
                basis.set_column(col, &rotated.column(offset));
            }
            // split the block where the restricted spectrum has real gaps
            let gap = 1e-9 * scale;
            let mut start = 0;
            while start < len {
                let mut end = start + 1;
                while end < len && sub.values[end] - sub.values[end - 1] < gap {
                    end += 1;
                }
                next_blocks.push(block.start + start..block.start + end);
                start = end;
            }
        }
        blocks = next_blocks;
    }

    let mut diagonals = Vec::with_capacity(ops.len());
    for (index, op) in ops.iter().enumerate() {
        let transformed = basis.adjoint() * *op * &basis;
        let mut off = 0.0f64;
        for i in 0..dim {
            for j in 0..dim {
                if i != j {
                    off = off.max(transformed[(i, j)].norm());
                }
            }
        }
        let scale = max_abs(op).max(1.0);
        if off > 1e-10 * scale {
            return Err(Error::SharedBasisFailure {
                index,
                residual: off,
            });
        }
        diagonals.push((0..dim).map(|j| transformed[(j, j)].re).collect());
    }
    Ok((basis, diagonals))
}

// ---------------------------------------------------------------------------
// Deterministic parallel reduction
// ---------------------------------------------------------------------------

pub(crate) trait Accumulate: Send + Sized {
    fn merge(self, other: Self) -> Self;
}

const REDUCE_LEAF: u64 = 16;

/// Pairwise reduction over trajectory indices with a fixed split tree and
/// sequential leaves; rayon may execute branches on any worker without
/// changing the floating-point result.
pub(crate) fn pairwise_monte_carlo<A, F>(range: Range<u64>, work: &F) -> Result<A>
where
    A: Accumulate,
    F: Fn(Range<u64>) -> Result<A> + Sync,
{
    let span = range.end - range.start;
    if span <= REDUCE_LEAF {
        return work(range);
    }
    let mid = range.start + span / 2;
    let (left, right) = rayon::join(
        || pairwise_monte_carlo(range.start..mid, work),
        || pairwise_monte_carlo(mid..range.end, work),
    );
    Ok(left?.merge(right?))
}

// ---------------------------------------------------------------------------
// Ensemble averaging
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct EnsembleConfig {
    pub n_trajectories: usize,
    pub master_seed: u64,
    pub grid: TimeGrid,
}

impl EnsembleConfig {
    pub fn new(n_trajectories: usize, master_seed: u64, grid: TimeGrid) -> Result<Self> {
        if n_trajectories == 0 {
            return Err(Error::InvalidParameter {
                reason: "n_trajectories must be at least 1".into(),
            });
        }
        Ok(EnsembleConfig {
            n_trajectories,
            master_seed,
            grid,
        })
    }
}

/// Mean and standard error (sample standard deviation / √n) per grid point.
#[derive(Debug, Clone)]
pub struct SeriesStats {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Trajectory-averaged evolution: sample-mean states at stored grid indices
/// with a max-entry standard error each, plus per-observable statistics on
/// every grid point.
#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub grid: TimeGrid,
    pub n_trajectories: usize,
    pub state_indices: Vec<usize>,
    pub mean_states: Vec<DensityMatrix>,
    pub state_stderr_max: Vec<f64>,
    pub observable_stats: BTreeMap<String, SeriesStats>,
}

impl EnsembleResult {
    /// Mean state at a grid index, if stored.
    pub fn mean_state_at(&self, index: usize) -> Option<&DensityMatrix> {
        self.state_indices
            .iter()
            .position(|&k| k == index)
            .map(|p| &self.mean_states[p])
    }
}

pub(crate) struct MomentAccumulator {
    count: u64,
    state_indices: Vec<usize>,
    state_sum: Vec<CMat>,
    state_sqsum: Vec<DMatrix<f64>>,
    obs_sum: Vec<Vec<f64>>,
    obs_sqsum: Vec<Vec<f64>>,
}

impl MomentAccumulator {
    pub(crate) fn new(dim: usize, state_indices: Vec<usize>, n_obs: usize, n_points: usize) -> Self {
        let n_states = state_indices.len();
        MomentAccumulator {
            count: 0,
            state_indices,
            state_sum: vec![CMat::zeros(dim, dim); n_states],
            state_sqsum: vec![DMatrix::zeros(dim, dim); n_states],
            obs_sum: vec![vec![0.0; n_points]; n_obs],
            obs_sqsum: vec![vec![0.0; n_points]; n_obs],
        }
    }

    #[inline]
    pub(crate) fn add_state(&mut self, slot: usize, state: &CMat) {
        let sum = &mut self.state_sum[slot];
        let sq = &mut self.state_sqsum[slot];
        for ((dst, sqdst), src) in sum.iter_mut().zip(sq.iter_mut()).zip(state.iter()) {
            *dst += src;
            *sqdst += src.norm_sqr();
        }
    }

    #[inline]
    pub(crate) fn add_observable(&mut self, obs: usize, point: usize, value: f64) {
        self.obs_sum[obs][point] += value;
        self.obs_sqsum[obs][point] += value * value;
    }

    pub(crate) fn bump(&mut self) {
        self.count += 1;
    }

    pub(crate) fn finish(
        self,
        grid: TimeGrid,
        observable_names: &[String],
    ) -> Result<EnsembleResult> {
        let n = self.count as f64;
        let mut mean_states = Vec::with_capacity(self.state_sum.len());
        let mut state_stderr_max = Vec::with_capacity(self.state_sum.len());
        for (sum, sq) in self.state_sum.iter().zip(&self.state_sqsum) {
            let mean = sum / c64(n, 0.0);
            let mut worst = 0.0f64;
            if self.count > 1 {
                for (m, s) in mean.iter().zip(sq.iter()) {
                    let var = ((s - n * m.norm_sqr()) / (n - 1.0)).max(0.0);
                    worst = worst.max((var / n).sqrt());
                }
            }
            mean_states.push(DensityMatrix::new(mean)?);
            state_stderr_max.push(worst);
        }
        let mut observable_stats = BTreeMap::new();
        for (idx, name) in observable_names.iter().enumerate() {
            let mean: Vec<f64> = self.obs_sum[idx].iter().map(|s| s / n).collect();
            let stderr: Vec<f64> = self.obs_sum[idx]
                .iter()
                .zip(&self.obs_sqsum[idx])
                .map(|(s, sq)| {
                    if self.count > 1 {
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
            n_trajectories: self.count as usize,
            state_indices: self.state_indices,
            mean_states,
            state_stderr_max,
            observable_stats,
        })
    }
}

impl Accumulate for MomentAccumulator {
    fn merge(mut self, other: Self) -> Self {
        self.count += other.count;
        for (dst, src) in self.state_sum.iter_mut().zip(&other.state_sum) {
            *dst += src;
        }
        for (dst, src) in self.state_sqsum.iter_mut().zip(&other.state_sqsum) {
            *dst += src;
        }
        for (dst, src) in self.obs_sum.iter_mut().zip(&other.obs_sum) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        for (dst, src) in self.obs_sqsum.iter_mut().zip(&other.obs_sqsum) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        self
    }
}

/// E[U ρ0 U†] over `config.n_trajectories` random unitary trajectories,
/// with states stored at every grid point. Deterministic for any worker
/// count at fixed (model, ρ0, config).
pub fn ensemble_average(
    model: &RandomUnitaryModel,
    rho0: &DensityMatrix,
    config: &EnsembleConfig,
    observables: &ObservableSet,
) -> Result<EnsembleResult> {
    if rho0.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            left: model.dim(),
            right: rho0.dim(),
        });
    }
    let grid = config.grid;
    let n_points = grid.n_points();
    let dim = model.dim();
    let obs_ops: Vec<&CMat> = observables.iter().map(|(_, op)| op.matrix()).collect();
    let obs_names: Vec<String> = observables.iter().map(|(n, _)| n.clone()).collect();

    let work = |range: Range<u64>| -> Result<MomentAccumulator> {
        let mut acc =
            MomentAccumulator::new(dim, (0..n_points).collect(), obs_ops.len(), n_points);
        for traj in range {
            let increments = model.sample_channel_increments(config.master_seed, traj, &grid);
            let unitaries = if model.commuting() {
                model.trajectory_commuting(&increments, &grid)?
            } else {
                model.trajectory_general(&increments, &grid)?
            };
            for (k, u) in unitaries.iter().enumerate() {
                let state = u * rho0.matrix() * u.adjoint();
                acc.add_state(k, &state);
                for (o, op) in obs_ops.iter().enumerate() {
                    acc.add_observable(o, k, expectation_from_matrix(&state, op));
                }
            }
            acc.bump();
        }
        Ok(acc)
    };

    let acc = pairwise_monte_carlo(0..config.n_trajectories as u64, &work)?;
    acc.finish(grid, &obs_names)
}

/// Mean final state per coarsening level, all levels driven by the same
/// fine-grid Brownian paths (coarse increments are sums of fine ones).
/// Used to verify the weak-order Δt scaling of the splitting.
pub fn refinement_mean_final_states(
    model: &RandomUnitaryModel,
    rho0: &DensityMatrix,
    config: &EnsembleConfig,
    coarsenings: &[usize],
) -> Result<Vec<CMat>> {
    let fine = config.grid;
    for &c in coarsenings {
        if c == 0 || fine.n_steps() % c != 0 {
            return Err(Error::InvalidParameter {
                reason: format!(
                    "coarsening {c} does not divide the fine grid ({} steps)",
                    fine.n_steps()
                ),
            });
        }
    }

    struct LevelAccumulator {
        count: u64,
        sums: Vec<CMat>,
    }
    impl Accumulate for LevelAccumulator {
        fn merge(mut self, other: Self) -> Self {
            self.count += other.count;
            for (d, s) in self.sums.iter_mut().zip(&other.sums) {
                *d += s;
            }
            self
        }
    }

    let dim = model.dim();
    let work = |range: Range<u64>| -> Result<LevelAccumulator> {
        let mut acc = LevelAccumulator {
            count: 0,
            sums: vec![CMat::zeros(dim, dim); coarsenings.len()],
        };
        for traj in range {
            let fine_incs = model.sample_channel_increments(config.master_seed, traj, &fine);
            for (lvl, &c) in coarsenings.iter().enumerate() {
                let coarse_grid = TimeGrid::new(fine.t_end(), fine.n_steps() / c)?;
                let coarse_incs: Vec<Vec<f64>> = fine_incs
                    .iter()
                    .map(|inc| inc.chunks(c).map(|chunk| chunk.iter().sum()).collect())
                    .collect();
                let stepper = model.stepper(&coarse_grid)?;
                let mut u = identity(dim);
                for k in 0..coarse_grid.n_steps() {
                    u = stepper.advance(&u, coarse_grid.time(k), &coarse_incs, k)?;
                }
                acc.sums[lvl] += &u * rho0.matrix() * u.adjoint();
            }
            acc.count += 1;
        }
        Ok(acc)
    };

    let acc = pairwise_monte_carlo(0..config.n_trajectories as u64, &work)?;
    Ok(acc
        .sums
        .into_iter()
        .map(|s| s / c64(acc.count as f64, 0.0))
        .collect())
}

// ---------------------------------------------------------------------------
// Variance process and collapse trajectories
// ---------------------------------------------------------------------------

/// Conditional variance Ṽ(t_k) = ⟨ψ|(A - ⟨A⟩)²|ψ⟩ / ⟨ψ|ψ⟩ along a state path.
pub fn variance_process(path: &[CVec], a: &HermitianOperator) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(path.len());
    for psi in path {
        let norm2: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
        if norm2 <= 0.0 || !norm2.is_finite() {
            return Err(Error::NonFinite);
        }
        let w = a.matrix() * psi;
        let mean: Complex64 = psi.iter().zip(w.iter()).map(|(p, q)| p.conj() * q).sum();
        let mean = mean.re / norm2;
        let second: f64 = w.iter().map(|z| z.norm_sqr()).sum::<f64>() / norm2;
        out.push(second - mean * mean);
    }
    Ok(out)
}

/// Euler-Maruyama integration of the collapse-model state equation
/// dψ = -iHψ dt - ½(A - ⟨A⟩)²ψ dt + (A - ⟨A⟩)ψ dB, renormalizing after
/// every step.
pub fn collapse_trajectory(
    h: &HermitianOperator,
    a: &HermitianOperator,
    psi0: &CVec,
    stream: &BrownianIncrementStream,
    grid: &TimeGrid,
) -> Result<Vec<CVec>> {
    if h.dim() != a.dim() || psi0.len() != h.dim() {
        return Err(Error::DimensionMismatch {
            left: h.dim(),
            right: psi0.len(),
        });
    }
    let norm0: f64 = psi0.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm0 <= 0.0 {
        return Err(Error::NonFinite);
    }
    let dt = grid.dt();
    let mut psi = psi0 / c64(norm0, 0.0);
    let mut path = Vec::with_capacity(grid.n_points());
    path.push(psi.clone());
    let mut sampler = stream.sampler();
    for k in 0..grid.n_steps() {
        let db = sampler.next_increment();
        let w = a.matrix() * &psi;
        let mean: Complex64 = psi.iter().zip(w.iter()).map(|(p, q)| p.conj() * q).sum();
        let mean = mean.re; // ψ stays normalized
        let centered = &w - &psi * c64(mean, 0.0);
        let centered_sq = a.matrix() * &centered - &centered * c64(mean, 0.0);
        let drift = h.matrix() * &psi * c64(0.0, -dt) - &centered_sq * c64(0.5 * dt, 0.0);
        psi += drift + &centered * c64(db, 0.0);
        let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm <= f64::MIN_POSITIVE || !norm.is_finite() {
            return Err(Error::TrajectoryAborted {
                trajectory: stream.trajectory_index,
                step: k,
                reason: "state vector collapsed to zero norm".into(),
            });
        }
        psi /= c64(norm, 0.0);
        path.push(psi.clone());
    }
    Ok(path)
}

/// State-vector path |ψ(t_k)⟩ = U(t_k)|ψ0⟩ along one random unitary
/// trajectory (normalized input required only up to overall scale).
pub fn unitary_state_path(
    model: &RandomUnitaryModel,
    psi0: &CVec,
    master_seed: u64,
    trajectory: u64,
    grid: &TimeGrid,
) -> Result<Vec<CVec>> {
    let increments = model.sample_channel_increments(master_seed, trajectory, grid);
    let unitaries = if model.commuting() {
        model.trajectory_commuting(&increments, grid)?
    } else {
        model.trajectory_general(&increments, grid)?
    };
    Ok(unitaries.iter().map(|u| u * psi0).collect())
}

/// Collapse-model ensemble: mean density matrix at every grid point and the
/// statistics of the variance process Ṽ(t). Deterministic for any worker
/// count, like [`ensemble_average`].
pub fn collapse_ensemble(
    h: &HermitianOperator,
    a: &HermitianOperator,
    psi0: &CVec,
    config: &EnsembleConfig,
) -> Result<EnsembleResult> {
    let dim = h.dim();
    let grid = config.grid;
    let n_points = grid.n_points();
    let names = vec!["variance_process".to_string()];

    let work = |range: Range<u64>| -> Result<MomentAccumulator> {
        let mut acc = MomentAccumulator::new(dim, (0..n_points).collect(), 1, n_points);
        for traj in range {
            let stream = BrownianIncrementStream::new(config.master_seed, traj, 0, grid);
            let path = collapse_trajectory(h, a, psi0, &stream, &grid)?;
            let variances = variance_process(&path, a)?;
            for (k, (psi, v)) in path.iter().zip(&variances).enumerate() {
                let state = crate::linalg::outer(psi, psi);
                acc.add_state(k, &state);
                acc.add_observable(0, k, *v);
            }
            acc.bump();
        }
        Ok(acc)
    };

    let acc = pairwise_monte_carlo(0..config.n_trajectories as u64, &work)?;
    acc.finish(grid, &names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{basis_ket, pauli_x, pauli_z};
    use approx::assert_abs_diff_eq;

    fn hermitian(m: CMat) -> HermitianOperator {
        HermitianOperator::new(m).unwrap()
    }

    fn plus_state_vec() -> CVec {
        CVec::from_vec(vec![
            c64(std::f64::consts::FRAC_1_SQRT_2, 0.0),
            c64(std::f64::consts::FRAC_1_SQRT_2, 0.0),
        ])
    }

    fn grid(t_end: f64, n: usize) -> TimeGrid {
        TimeGrid::new(t_end, n).unwrap()
    }

    #[test]
    fn commuting_flag_detection() {
        let commuting = RandomUnitaryModel::new(
            hermitian(pauli_z() * c64(0.5, 0.0)),
            vec![(hermitian(pauli_z()), NoiseKernel::constant(1.0).unwrap())],
        )
        .unwrap();
        assert!(commuting.commuting());
        let noncommuting = RandomUnitaryModel::new(
            hermitian(pauli_x()),
            vec![(hermitian(pauli_z()), NoiseKernel::constant(1.0).unwrap())],
        )
        .unwrap();
        assert!(!noncommuting.commuting());
    }

    #[test]
    fn commuting_trajectory_without_noise_is_deterministic_evolution() {
        let model = RandomUnitaryModel::new(
            hermitian(pauli_z()),
            vec![(hermitian(pauli_z()), NoiseKernel::zero())],
        )
        .unwrap();
        let g = grid(1.0, 10);
        let incs = vec![vec![0.0; 10]];
        let unitaries = model.trajectory_commuting(&incs, &g).unwrap();
        for (k, u) in unitaries.iter().enumerate() {
            let expected = crate::linalg::expm_hermitian_generator(
                model.hamiltonian(),
                g.time(k),
            )
            .unwrap();
            assert!(max_abs(&(u - expected)) < 1e-12);
        }
    }

    #[test]
    fn commuting_trajectory_is_diagonal_phase_pair() {
        // H = 0, V = σ_z: U(t) = diag(e^{-iX(t)}, e^{iX(t)})
        let model = RandomUnitaryModel::new(
            hermitian(CMat::zeros(2, 2)),
            vec![(hermitian(pauli_z()), NoiseKernel::constant(1.0).unwrap())],
        )
        .unwrap();
        let g = grid(1.0, 16);
        let stream = BrownianIncrementStream::new(5, 0, 0, g);
        let incs = vec![stream.sample_increments()];
        let path = ito_integral_from_increments(&NoiseKernel::constant(1.0).unwrap(), &g, &incs[0])
            .unwrap();
        let unitaries = model.trajectory_commuting(&incs, &g).unwrap();
        for (k, u) in unitaries.iter().enumerate() {
            let x = path[k];
            assert_abs_diff_eq!(u[(0, 0)].re, x.cos(), epsilon = 1e-12);
            assert_abs_diff_eq!(u[(0, 0)].im, -x.sin(), epsilon = 1e-12);
            assert_abs_diff_eq!(u[(1, 1)].re, x.cos(), epsilon = 1e-12);
            assert_abs_diff_eq!(u[(1, 1)].im, x.sin(), epsilon = 1e-12);
            assert!(u[(0, 1)].norm() < 1e-15);
        }
    }

    #[test]
    fn general_trajectory_stays_unitary() {
        let model = RandomUnitaryModel::new(
            hermitian(pauli_x()),
            vec![(hermitian(pauli_z()), NoiseKernel::constant(1.0).unwrap())],
        )
        .unwrap();
        let g = grid(1.0, 200);
        let incs = model.sample_channel_increments(77, 0, &g);
        let unitaries = model.trajectory_general(&incs, &g).unwrap();
        for u in &unitaries {
            let residual = max_abs(&(u.adjoint() * u - identity(2)));
            assert!(residual < 1e-10, "unitarity residual {residual}");
        }
    }

    #[test]
    fn general_and_commuting_paths_agree_on_commuting_models() {
        // identical driving noise: the splitting is exact when [H, V] = 0
        let model = RandomUnitaryModel::new(
            hermitian(pauli_z() * c64(0.7, 0.0)),
            vec![(hermitian(pauli_z()), NoiseKernel::constant(0.9).unwrap())],
        )
        .unwrap();
        let g = grid(1.0, 50);
        let incs = model.sample_channel_increments(11, 3, &g);
        let a = model.trajectory_commuting(&incs, &g).unwrap();
        let b = model.trajectory_general(&incs, &g).unwrap();
        for (ua, ub) in a.iter().zip(&b) {
            assert!(max_abs(&(ua - ub)) < 1e-11);
        }
    }

    #[test]
    fn single_trajectory_zero_noise_ensemble_is_unitary_evolution() {
        let model = RandomUnitaryModel::new(
            hermitian(pauli_x()),
            vec![(hermitian(pauli_z()), NoiseKernel::zero())],
        )
        .unwrap();
        let g = grid(1.0, 64);
        let rho0 = DensityMatrix::pure(&basis_ket(2, 0)).unwrap();
        let config = EnsembleConfig::new(1, 9, g).unwrap();
        let result = ensemble_average(&model, &rho0, &config, &vec![]).unwrap();
        let u = crate::linalg::expm_hermitian_generator(model.hamiltonian(), 1.0).unwrap();
        let exact = &u * rho0.matrix() * u.adjoint();
        let got = result.mean_states.last().unwrap().matrix().clone();
        // Trotter splitting is not exact here, but converges at O(Δt²) per
        // step deterministically; with 64 steps the error is small.
        assert!(max_abs(&(got - exact)) < 1e-3);
        assert!(result.state_stderr_max.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn ensemble_mean_matches_analytic_markov_commuting() {
        let model = RandomUnitaryModel::new(
            hermitian(pauli_z() * c64(1.0, 0.0)),
            vec![(hermitian(pauli_z()), NoiseKernel::constant(0.8).unwrap())],
        )
        .unwrap();
        let rho0 = DensityMatrix::pure(&plus_state_vec()).unwrap();
        let g = grid(1.0, 200);
        let config = EnsembleConfig::new(2000, 12345, g).unwrap();
        let result = ensemble_average(&model, &rho0, &config, &vec![]).unwrap();
        let exact = model.lindblad_model().unwrap().analytic_markov_evolve(&rho0, 1.0).unwrap();
        let got = result.mean_states.last().unwrap();
        let err = max_abs(&(got.matrix() - exact.matrix()));
        let tol = (3.0 * result.state_stderr_max.last().unwrap()).max(0.01);
        assert!(err < tol, "commuting ensemble error {err} > {tol}");
    }

    #[test]
    fn ensemble_mean_matches_analytic_markov_noncommuting() {
        let model = RandomUnitaryModel::new(
            hermitian(pauli_x()),
            vec![(hermitian(pauli_z()), NoiseKernel::constant(1.0).unwrap())],
        )
        .unwrap();
        let rho0 = DensityMatrix::pure(&basis_ket(2, 0)).unwrap();
        let g = grid(1.0, 1000);
        let config = EnsembleConfig::new(2000, 777, g).unwrap();
        let result = ensemble_average(&model, &rho0, &config, &vec![]).unwrap();
        let exact = model.lindblad_model().unwrap().analytic_markov_evolve(&rho0, 1.0).unwrap();
        let got = result.mean_states.last().unwrap();
        let err = max_abs(&(got.matrix() - exact.matrix()));
        let tol = (3.0 * result.state_stderr_max.last().unwrap()).max(0.01);
        assert!(err < tol, "non-commuting ensemble error {err} > {tol}");
    }

    #[test]
    fn stderr_shrinks_like_inverse_sqrt_of_trajectories() {
        let model = RandomUnitaryModel::new(
            hermitian(CMat::zeros(2, 2)),
            vec![(hermitian(pauli_z()), NoiseKernel::constant(1.0).unwrap())],
        )
        .unwrap();
        let rho0 = DensityMatrix::pure(&plus_state_vec()).unwrap();
        let g = grid(0.5, 50);
        let obs = vec![("sx".to_string(), hermitian(pauli_x()))];
        let small = ensemble_average(
            &model,
            &rho0,
            &EnsembleConfig::new(1000, 5, g).unwrap(),
            &obs,
        )
        .unwrap();
        let large = ensemble_average(
            &model,
            &rho0,
            &EnsembleConfig::new(2000, 5, g).unwrap(),
            &obs,
        )
        .unwrap();
        let s_small = *small.observable_stats["sx"].stderr.last().unwrap();
        let s_large = *large.observable_stats["sx"].stderr.last().unwrap();
        let ratio = s_small / s_large;
        assert!(
            (1.2..1.7).contains(&ratio),
            "stderr ratio {ratio}, expected ≈ √2"
        );
    }

    #[test]
    fn ensemble_result_is_worker_count_invariant() {
        let model = RandomUnitaryModel::new(
            hermitian(pauli_x()),
            vec![(hermitian(pauli_z()), NoiseKernel::constant(1.0).unwrap())],
        )
        .unwrap();
        let rho0 = DensityMatrix::pure(&basis_ket(2, 0)).unwrap();
        let config = EnsembleConfig::new(200, 42, grid(0.5, 100)).unwrap();
        let obs = vec![("sz".to_string(), hermitian(pauli_z()))];

        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| ensemble_average(&model, &rho0, &config, &obs).unwrap())
        };
        let a = run(1);
        let b = run(4);
        for (sa, sb) in a.mean_states.iter().zip(&b.mean_states) {
            assert_eq!(sa.matrix().as_slice(), sb.matrix().as_slice());
        }
        assert_eq!(
            a.observable_stats["sz"].mean,
            b.observable_stats["sz"].mean
        );
        assert_eq!(
            a.observable_stats["sz"].stderr,
            b.observable_stats["sz"].stderr
        );
    }

    #[test]
    fn variance_process_on_eigenvector_is_zero() {
        let a = hermitian(pauli_z());
        let path = vec![basis_ket(2, 0); 5];
        let v = variance_process(&path, &a).unwrap();
        assert!(v.iter().all(|&x| x.abs() < 1e-14));
    }

    #[test]
    fn variance_process_on_balanced_superposition_is_one() {
        let a = hermitian(pauli_z());
        let v = variance_process(&[plus_state_vec()], &a).unwrap();
        assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn variance_is_conserved_along_random_unitary_paths() {
        // [A, H] = 0 with A = V: dṼ = 0 pathwise
        let model = RandomUnitaryModel::new(
            hermitian(pauli_z() * c64(0.6, 0.0)),
            vec![(hermitian(pauli_z()), NoiseKernel::constant(1.0).unwrap())],
        )
        .unwrap();
        let a = hermitian(pauli_z());
        let g = grid(2.0, 400);
        for traj in 0..20 {
            let path = unitary_state_path(&model, &plus_state_vec(), 2024, traj, &g).unwrap();
            let v = variance_process(&path, &a).unwrap();
            for &vk in &v {
                assert!((vk - v[0]).abs() < 1e-9, "variance drifted: {vk} vs {}", v[0]);
            }
        }
    }

    #[test]
    fn collapse_trajectory_fixed_point_on_eigenvectors() {
        let h = hermitian(CMat::zeros(2, 2));
        let a = hermitian(pauli_z());
        let g = grid(1.0, 100);
        let stream = BrownianIncrementStream::new(3, 0, 0, g);
        let path = collapse_trajectory(&h, &a, &basis_ket(2, 0), &stream, &g).unwrap();
        for psi in &path {
            assert!((psi[0].norm() - 1.0).abs() < 1e-12);
            assert!(psi[1].norm() < 1e-12);
        }
    }

    #[test]
    fn collapse_ensemble_reduces_variance_and_matches_lindblad() {
        let h = hermitian(CMat::zeros(2, 2));
        let a = hermitian(pauli_z());
        let g = grid(4.0, 1600);
        let config = EnsembleConfig::new(300, 99, g).unwrap();
        let result = collapse_ensemble(&h, &a, &plus_state_vec(), &config).unwrap();
        let v = &result.observable_stats["variance_process"];
        assert_abs_diff_eq!(v.mean[0], 1.0, epsilon = 1e-12);
        assert!(
            *v.mean.last().unwrap() < 0.1,
            "mean variance at T: {}",
            v.mean.last().unwrap()
        );

        // mean state follows the same master equation as the unitary ensemble
        let lind = crate::lindblad::LindbladModel::new(
            h.clone(),
            vec![crate::lindblad::LindbladChannel {
                operator: a.clone(),
                kernel: NoiseKernel::constant(1.0).unwrap(),
            }],
        )
        .unwrap();
        let rho0 = DensityMatrix::pure(&plus_state_vec()).unwrap();
        for (idx, t) in [(400usize, 1.0), (1600usize, 4.0)] {
            let exact = lind.analytic_markov_evolve(&rho0, t).unwrap();
            let got = result.mean_state_at(idx).unwrap();
            let err = max_abs(&(got.matrix() - exact.matrix()));
            let tol = (3.0 * result.state_stderr_max[idx]).max(0.02);
            assert!(err < tol, "collapse mean error {err} > {tol} at t={t}");
        }
    }

    #[test]
    fn refinement_bias_scales_linearly_in_dt() {
        let model = RandomUnitaryModel::new(
            hermitian(pauli_x()),
            vec![(hermitian(pauli_z()), NoiseKernel::constant(1.0).unwrap())],
        )
        .unwrap();
        let rho0 = DensityMatrix::pure(&basis_ket(2, 0)).unwrap();
        let config = EnsembleConfig::new(2000, 31, grid(1.0, 1000)).unwrap();
        let means = refinement_mean_final_states(&model, &rho0, &config, &[4, 2, 1]).unwrap();
        let d1 = max_abs(&(&means[0] - &means[1]));
        let d2 = max_abs(&(&means[1] - &means[2]));
        let ratio = d1 / d2;
        assert!(
            (1.0..4.0).contains(&ratio),
            "coupled-difference ratio {ratio}, expected ≈ 2 for weak order 1"
        );
    }
}
