//! Reproducible Brownian increment streams, deterministic noise kernels and
//! their accumulated variance λ(t) = ∫₀ᵗ v²(s) ds, and the closed-form moment
//! identities used as oracles throughout the crate.
//!
//! Streams are counter-seeded: the generator state is a pure function of
//! (master_seed, trajectory_index, channel_index), so any parallel execution
//! schedule reproduces the same increments bit for bit.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Time grid
// ---------------------------------------------------------------------------

/// Uniform grid t_k = k·Δt, k = 0..=n_steps, with Δt = t_end / n_steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_end > 0.0) || !t_end.is_finite() {
            return Err(Error::InvalidGrid {
                reason: format!("t_end must be positive and finite, got {t_end}"),
            });
        }
        if n_steps == 0 {
            return Err(Error::InvalidGrid {
                reason: "n_steps must be at least 1".into(),
            });
        }
        Ok(TimeGrid { t_end, n_steps })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of grid points including t = 0.
    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.dt() * k as f64
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_points()).map(|k| self.time(k))
    }
}

// ---------------------------------------------------------------------------
// Noise kernels
// ---------------------------------------------------------------------------

/// Deterministic real kernel v(t) with units 1/√time, so that
/// λ(t) = ∫₀ᵗ v²(s) ds is dimensionless.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseKernel {
    /// v(t) = c.
    Constant(f64),
    /// v(t) = coeff · t^exponent.
    PowerLaw { coeff: f64, exponent: f64 },
    /// Piecewise-linear interpolation of (t_i, v_i) samples.
    Tabulated { times: Vec<f64>, values: Vec<f64> },
}

impl NoiseKernel {
    pub fn zero() -> Self {
        NoiseKernel::Constant(0.0)
    }

    pub fn constant(c: f64) -> Result<Self> {
        if !c.is_finite() {
            return Err(Error::InvalidKernel {
                reason: format!("constant kernel value {c} is not finite"),
            });
        }
        Ok(NoiseKernel::Constant(c))
    }

    pub fn power_law(coeff: f64, exponent: f64) -> Result<Self> {
        if !coeff.is_finite() || !exponent.is_finite() {
            return Err(Error::InvalidKernel {
                reason: "power-law parameters must be finite".into(),
            });
        }
        // λ(t) = coeff² t^{2p+1} / (2p+1) must be integrable at 0.
        if exponent <= -0.5 {
            return Err(Error::InvalidKernel {
                reason: format!("power-law exponent {exponent} makes v² non-integrable at 0"),
            });
        }
        Ok(NoiseKernel::PowerLaw { coeff, exponent })
    }

    pub fn tabulated(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() || times.len() < 2 {
            return Err(Error::InvalidKernel {
                reason: "tabulated kernel needs at least two (t, v) samples".into(),
            });
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidKernel {
                reason: "tabulated grid must be strictly increasing".into(),
            });
        }
        if times.iter().chain(values.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidKernel {
                reason: "tabulated kernel contains non-finite entries".into(),
            });
        }
        Ok(NoiseKernel::Tabulated { times, values })
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, NoiseKernel::Constant(c) if *c == 0.0)
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, NoiseKernel::Constant(_))
    }

    /// v(t).
    pub fn value(&self, t: f64) -> Result<f64> {
        match self {
            NoiseKernel::Constant(c) => Ok(*c),
            NoiseKernel::PowerLaw { coeff, exponent } => {
                if t < 0.0 {
                    return Err(Error::KernelDomain { t });
                }
                Ok(coeff * t.powf(*exponent))
            }
            NoiseKernel::Tabulated { times, values } => {
                let (t0, t1) = (times[0], *times.last().unwrap());
                if t < t0 || t > t1 {
                    return Err(Error::KernelDomain { t });
                }
                let idx = match times.binary_search_by(|x| x.total_cmp(&t)) {
                    Ok(i) => return Ok(values[i]),
                    Err(i) => i,
                };
                let (ta, tb) = (times[idx - 1], times[idx]);
                let (va, vb) = (values[idx - 1], values[idx]);
                let w = (t - ta) / (tb - ta);
                Ok(va + w * (vb - va))
            }
        }
    }

    /// λ(t) = ∫₀ᵗ v²(s) ds. Exact for constant and power-law kernels,
    /// trapezoidal on the tabulated grid otherwise.
    pub fn lambda(&self, t: f64) -> Result<f64> {
        if t < 0.0 {
            return Err(Error::KernelDomain { t });
        }
        match self {
            NoiseKernel::Constant(c) => Ok(c * c * t),
            NoiseKernel::PowerLaw { coeff, exponent } => {
                let p = 2.0 * exponent + 1.0;
                Ok(coeff * coeff * t.powf(p) / p)
            }
            NoiseKernel::Tabulated { times, .. } => {
                if times[0] > 0.0 || t > *times.last().unwrap() {
                    return Err(Error::KernelDomain { t });
                }
                let mut acc = 0.0;
                let mut prev_t = times[0];
                let mut prev_v2 = self.value(prev_t)?.powi(2);
                for &tk in &times[1..] {
                    let seg_end = tk.min(t);
                    if seg_end > prev_t {
                        let v2 = self.value(seg_end)?.powi(2);
                        acc += 0.5 * (prev_v2 + v2) * (seg_end - prev_t);
                        prev_t = seg_end;
                        prev_v2 = v2;
                    }
                    if tk >= t {
                        break;
                    }
                }
                Ok(acc)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Counter-seeded Brownian increment streams
// ---------------------------------------------------------------------------

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 32-byte ChaCha seed derived from the (master_seed, trajectory, channel)
/// counters; the only thing that identifies a stream.
fn derive_seed(master_seed: u64, trajectory_index: u64, channel_index: u64) -> [u8; 32] {
    let mut state = master_seed;
    let _ = splitmix64(&mut state);
    state ^= trajectory_index.wrapping_mul(0xA076_1D64_78BD_642F);
    let _ = splitmix64(&mut state);
    state ^= channel_index.wrapping_mul(0xE703_7ED1_A0B4_28DB);
    let _ = splitmix64(&mut state);
    let mut seed = [0u8; 32];
    for word in 0..4 {
        let bytes = splitmix64(&mut state).to_le_bytes();
        seed[word * 8..(word + 1) * 8].copy_from_slice(&bytes);
    }
    seed
}

/// One reproducible Gaussian increment stream: ΔB_k ~ N(0, Δt), fully
/// determined by (master_seed, trajectory_index, channel_index, grid).
#[derive(Debug, Clone)]
pub struct BrownianIncrementStream {
    pub master_seed: u64,
    pub trajectory_index: u64,
    pub channel_index: u64,
    pub grid: TimeGrid,
}

impl BrownianIncrementStream {
    pub fn new(master_seed: u64, trajectory_index: u64, channel_index: u64, grid: TimeGrid) -> Self {
        BrownianIncrementStream {
            master_seed,
            trajectory_index,
            channel_index,
            grid,
        }
    }

    /// Streaming sampler over the grid's steps.
    pub fn sampler(&self) -> IncrementSampler {
        IncrementSampler {
            rng: ChaCha12Rng::from_seed(derive_seed(
                self.master_seed,
                self.trajectory_index,
                self.channel_index,
            )),
            sqrt_dt: self.grid.dt().sqrt(),
        }
    }

    /// All n_steps increments of this stream.
    pub fn sample_increments(&self) -> Vec<f64> {
        let mut sampler = self.sampler();
        (0..self.grid.n_steps()).map(|_| sampler.next_increment()).collect()
    }
}

pub struct IncrementSampler {
    rng: ChaCha12Rng,
    sqrt_dt: f64,
}

impl IncrementSampler {
    #[inline]
    pub fn next_increment(&mut self) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        z * self.sqrt_dt
    }
}

/// Ito integral X(t_k) = Σ_{j<k} v(t_j) ΔB_j with the left-point rule;
/// returns one value per grid point, X(0) = 0.
pub fn ito_integral_path(kernel: &NoiseKernel, stream: &BrownianIncrementStream) -> Result<Vec<f64>> {
    let grid = &stream.grid;
    let increments = stream.sample_increments();
    ito_integral_from_increments(kernel, grid, &increments)
}

/// Same as [`ito_integral_path`] but over externally supplied increments
/// (used to couple refinement levels in convergence studies).
pub fn ito_integral_from_increments(
    kernel: &NoiseKernel,
    grid: &TimeGrid,
    increments: &[f64],
) -> Result<Vec<f64>> {
    let mut path = Vec::with_capacity(grid.n_points());
    let mut acc = 0.0;
    path.push(0.0);
    for (j, db) in increments.iter().enumerate() {
        acc += kernel.value(grid.time(j))? * db;
        path.push(acc);
    }
    Ok(path)
}

// ---------------------------------------------------------------------------
// Closed-form identities
// ---------------------------------------------------------------------------

/// n-th moment of X_t = ∫₀ᵗ v dB: zero for odd n, (2k)!/(2^k k!)·λ(t)^k for
/// n = 2k.
pub fn theoretical_moment(kernel: &NoiseKernel, n: u32, t: f64) -> Result<f64> {
    if n % 2 == 1 {
        return Ok(0.0);
    }
    let lambda = kernel.lambda(t)?;
    let k = n / 2;
    // (2k)!/(2^k k!) = (2k-1)!! by induction
    let mut double_factorial = 1.0;
    let mut m = 1;
    while m < 2 * k {
        double_factorial *= (2 * k - m) as f64;
        m += 2;
    }
    Ok(double_factorial * lambda.powi(k as i32))
}

/// E[cos(b + X_t)] = e^{-λ/2} cos b.
pub fn expected_cos(b: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::NegativeParameter {
            name: "lambda",
            value: lambda,
        });
    }
    Ok((-lambda / 2.0).exp() * b.cos())
}

/// E[cos²(b + X_t)] = ½(1 + e^{-2λ} cos 2b); the doubled argument doubles
/// λ's coefficient.
pub fn expected_cos_squared(b: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::NegativeParameter {
            name: "lambda",
            value: lambda,
        });
    }
    Ok(0.5 * (1.0 + (-2.0 * lambda).exp() * (2.0 * b).cos()))
}

// ---------------------------------------------------------------------------
// Correlated streams
// ---------------------------------------------------------------------------

/// Symmetric positive-semidefinite cross-correlation matrix with unit
/// diagonal: dB_a dB_b = g_ab dt.
#[derive(Debug, Clone)]
pub struct CorrelationSpec {
    g: DMatrix<f64>,
}

const CORRELATION_PSD_FLOOR: f64 = -1e-10;

impl CorrelationSpec {
    pub fn new(g: DMatrix<f64>) -> Result<Self> {
        if g.nrows() != g.ncols() || g.nrows() == 0 {
            return Err(Error::InvalidCorrelation {
                reason: format!("matrix must be square and non-empty, got {}x{}", g.nrows(), g.ncols()),
            });
        }
        let n = g.nrows();
        for i in 0..n {
            if (g[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidCorrelation {
                    reason: format!("diagonal entry ({i},{i}) = {} is not 1", g[(i, i)]),
                });
            }
            for j in 0..n {
                if (g[(i, j)] - g[(j, i)]).abs() > 1e-12 {
                    return Err(Error::InvalidCorrelation {
                        reason: format!("matrix is not symmetric at ({i},{j})"),
                    });
                }
                if g[(i, j)].abs() > 1.0 + 1e-12 {
                    return Err(Error::InvalidCorrelation {
                        reason: format!("|g({i},{j})| = {} exceeds 1", g[(i, j)].abs()),
                    });
                }
            }
        }
        let eig = g.clone().symmetric_eigen();
        let min_ev = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if min_ev < CORRELATION_PSD_FLOOR {
            return Err(Error::InvalidCorrelation {
                reason: format!("matrix is not PSD: min eigenvalue {min_ev:.3e}"),
            });
        }
        Ok(CorrelationSpec { g })
    }

    /// Independent channels.
    pub fn identity(n: usize) -> Self {
        CorrelationSpec {
            g: DMatrix::identity(n, n),
        }
    }

    /// Fully correlated channels (all entries 1).
    pub fn full(n: usize) -> Self {
        CorrelationSpec {
            g: DMatrix::from_element(n, n, 1.0),
        }
    }

    /// Block-diagonal correlation assembled from per-block matrices.
    pub fn from_blocks(blocks: &[DMatrix<f64>]) -> Result<Self> {
        let n: usize = blocks.iter().map(|b| b.nrows()).sum();
        let mut g = DMatrix::identity(n, n);
        let mut offset = 0;
        for b in blocks {
            g.view_mut((offset, offset), (b.nrows(), b.ncols())).copy_from(b);
            offset += b.nrows();
        }
        Self::new(g)
    }

    pub fn dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    /// Factor L (channels × rank) with L Lᵀ = g. Built from the spectral
    /// square root so that singular correlations (e.g. all-ones) work; rank
    /// deficiency just means fewer independent generators per step.
    pub fn factor(&self) -> CorrelationFactor {
        let n = self.dim();
        let eig = self.g.clone().symmetric_eigen();
        let max_ev = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
        let cutoff = 1e-12 * max_ev.max(1.0);
        let mut kept: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > cutoff).collect();
        // fixed column order keeps sampling deterministic
        kept.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let rank = kept.len();
        let mut l = DMatrix::zeros(n, rank);
        for (col, &k) in kept.iter().enumerate() {
            let scale = eig.eigenvalues[k].max(0.0).sqrt();
            for row in 0..n {
                l[(row, col)] = eig.eigenvectors[(row, k)] * scale;
            }
        }
        CorrelationFactor { l }
    }
}

/// Factor of a correlation matrix used to drive correlated increments.
#[derive(Debug, Clone)]
pub struct CorrelationFactor {
    l: DMatrix<f64>,
}

impl CorrelationFactor {
    pub fn n_channels(&self) -> usize {
        self.l.nrows()
    }

    pub fn rank(&self) -> usize {
        self.l.ncols()
    }

    /// out[a] = Σ_r L[a,r]·z[r]; `z` are independent N(0, Δt) increments.
    pub fn mix_into(&self, z: &[f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), self.rank());
        debug_assert_eq!(out.len(), self.n_channels());
        for (a, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (r, zr) in z.iter().enumerate() {
                acc += self.l[(a, r)] * zr;
            }
            *slot = acc;
        }
    }
}

/// Correlated increment source for one trajectory: `rank` independent
/// streams mixed through the correlation factor at every step.
pub struct CorrelatedIncrements {
    factor: CorrelationFactor,
    samplers: Vec<IncrementSampler>,
    scratch: Vec<f64>,
}

impl CorrelatedIncrements {
    pub fn new(
        factor: CorrelationFactor,
        master_seed: u64,
        trajectory_index: u64,
        grid: TimeGrid,
    ) -> Self {
        let samplers = (0..factor.rank())
            .map(|ch| BrownianIncrementStream::new(master_seed, trajectory_index, ch as u64, grid).sampler())
            .collect();
        let scratch = vec![0.0; factor.rank()];
        CorrelatedIncrements { factor, samplers, scratch }
    }

    /// Next vector of correlated increments, one entry per channel.
    pub fn next_increments(&mut self, out: &mut [f64]) {
        for (slot, sampler) in self.scratch.iter_mut().zip(&mut self.samplers) {
            *slot = sampler.next_increment();
        }
        self.factor.mix_into(&self.scratch, out);
    }
}
