//! Dense complex linear algebra kernels: validated Hermitian operators and
//! density matrices, spectral decompositions with degeneracy merging, matrix
//! exponentials, and the nested-commutator conjugation series.
//!
//! Conventions fixed here and relied on by the rest of the crate:
//! * `vec` is column-stacking, so `vec(A X B) = (B^T ⊗ A) vec(X)`;
//! * exponentials of Hermitian generators go through the eigendecomposition,
//!   which keeps trajectory unitaries unitary to roundoff.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

/// Shorthand complex constructor.
#[inline]
pub fn c64(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Default numerical tolerances. Tests pin these values; callers may override
/// them where a constructor accepts a `Tolerances`.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    /// Relative Hermiticity deviation, `max|M - M^H| <= hermiticity * max|M|`.
    pub hermiticity: f64,
    /// Absolute deviation of the trace from one.
    pub trace: f64,
    /// Magnitude of the most negative admissible eigenvalue of a state.
    pub positivity: f64,
    /// Residuals of spectral-decomposition invariants.
    pub projector: f64,
    /// Relative eigenvalue gap below which eigenvalues merge into one projector.
    pub degeneracy: f64,
    /// Unitarity residual `max|U^H U - I|`.
    pub unitarity: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            hermiticity: 1e-12,
            trace: 1e-10,
            positivity: 1e-8,
            projector: 1e-10,
            degeneracy: 1e-9,
            unitarity: 1e-12,
        }
    }
}

/// Max entry modulus; the `‖·‖_max` used throughout.
pub fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn all_finite(m: &CMat) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

fn check_square(m: &CMat) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(m.nrows())
}

fn check_same_dim(a: &CMat, b: &CMat) -> Result<usize> {
    let da = check_square(a)?;
    let db = check_square(b)?;
    if da != db {
        return Err(Error::DimensionMismatch { left: da, right: db });
    }
    Ok(da)
}

fn hermiticity_deviation(m: &CMat) -> f64 {
    let dim = m.nrows();
    let mut dev: f64 = 0.0;
    for j in 0..dim {
        for i in 0..=j {
            dev = dev.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    dev
}

pub fn identity(dim: usize) -> CMat {
    CMat::identity(dim, dim)
}

pub fn pauli_x() -> CMat {
    CMat::from_row_slice(2, 2, &[c64(0.0, 0.0), c64(1.0, 0.0), c64(1.0, 0.0), c64(0.0, 0.0)])
}

pub fn pauli_y() -> CMat {
    CMat::from_row_slice(2, 2, &[c64(0.0, 0.0), c64(0.0, -1.0), c64(0.0, 1.0), c64(0.0, 0.0)])
}

pub fn pauli_z() -> CMat {
    CMat::from_row_slice(2, 2, &[c64(1.0, 0.0), c64(0.0, 0.0), c64(0.0, 0.0), c64(-1.0, 0.0)])
}

/// Computational basis vector |i⟩.
pub fn basis_ket(dim: usize, i: usize) -> CVec {
    let mut v = CVec::zeros(dim);
    v[i] = c64(1.0, 0.0);
    v
}

/// Outer product |u⟩⟨v|.
pub fn outer(u: &CVec, v: &CVec) -> CMat {
    u * v.adjoint()
}

pub fn trace(m: &CMat) -> Complex64 {
    let mut t = c64(0.0, 0.0);
    for i in 0..m.nrows().min(m.ncols()) {
        t += m[(i, i)];
    }
    t
}

// ---------------------------------------------------------------------------
// Validated operator types
// ---------------------------------------------------------------------------

/// A validated self-adjoint operator.
#[derive(Debug, Clone)]
pub struct HermitianOperator {
    mat: CMat,
}

impl HermitianOperator {
    pub fn new(mat: CMat) -> Result<Self> {
        Self::with_tolerances(mat, &Tolerances::default())
    }

    pub fn with_tolerances(mat: CMat, tol: &Tolerances) -> Result<Self> {
        check_square(&mat)?;
        if !all_finite(&mat) {
            return Err(Error::NonFinite);
        }
        let scale = max_abs(&mat);
        let dev = hermiticity_deviation(&mat);
        let bound = tol.hermiticity * scale.max(f64::MIN_POSITIVE);
        if scale > 0.0 && dev > bound {
            return Err(Error::NotHermitian {
                deviation: dev,
                tolerance: bound,
            });
        }
        Ok(HermitianOperator { mat })
    }

    pub fn matrix(&self) -> &CMat {
        &self.mat
    }

    pub fn into_matrix(self) -> CMat {
        self.mat
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    /// Real expectation value ⟨ψ|H|ψ⟩ / ⟨ψ|ψ⟩.
    pub fn expectation(&self, psi: &CVec) -> f64 {
        let norm2: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
        let hp = &self.mat * psi;
        let val: Complex64 = psi.iter().zip(hp.iter()).map(|(a, b)| a.conj() * b).sum();
        val.re / norm2
    }
}

/// A validated density matrix: Hermitian, unit trace, positive semidefinite
/// within tolerance.
#[derive(Debug, Clone)]
pub struct DensityMatrix {
    mat: CMat,
}

impl DensityMatrix {
    pub fn new(mat: CMat) -> Result<Self> {
        Self::with_tolerances(mat, &Tolerances::default())
    }

    pub fn with_tolerances(mat: CMat, tol: &Tolerances) -> Result<Self> {
        check_square(&mat)?;
        if !all_finite(&mat) {
            return Err(Error::NonFinite);
        }
        let scale = max_abs(&mat);
        let dev = hermiticity_deviation(&mat);
        let bound = tol.hermiticity * scale.max(f64::MIN_POSITIVE);
        if dev > bound {
            return Err(Error::NotHermitian {
                deviation: dev,
                tolerance: bound,
            });
        }
        let tr = trace(&mat);
        let tr_dev = (tr - c64(1.0, 0.0)).norm();
        if tr_dev > tol.trace {
            return Err(Error::TraceNotOne {
                deviation: tr_dev,
                tolerance: tol.trace,
            });
        }
        check_positive_semidefinite(&mat, tol.positivity)?;
        Ok(DensityMatrix { mat })
    }

    /// Normalized projector onto `psi`.
    pub fn pure(psi: &CVec) -> Result<Self> {
        let norm2: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
        if norm2 <= 0.0 || !norm2.is_finite() {
            return Err(Error::NonFinite);
        }
        let mat = outer(psi, psi) / c64(norm2, 0.0);
        Self::new(mat)
    }

    /// Mixture Σ w_i |i⟩⟨i| of computational basis states.
    pub fn from_diagonal_weights(weights: &[f64]) -> Result<Self> {
        let dim = weights.len();
        let mut mat = CMat::zeros(dim, dim);
        for (i, &w) in weights.iter().enumerate() {
            mat[(i, i)] = c64(w, 0.0);
        }
        Self::new(mat)
    }

    pub fn matrix(&self) -> &CMat {
        &self.mat
    }

    pub fn into_matrix(self) -> CMat {
        self.mat
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    /// Tr(ρ²), the purity.
    pub fn purity(&self) -> f64 {
        self.mat.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Real expectation value Tr(ρ O).
    pub fn expectation(&self, op: &CMat) -> f64 {
        expectation_from_matrix(&self.mat, op)
    }
}

/// Tr(ρ O).re for Hermitian `op`; also used on raw state matrices in hot loops.
pub fn expectation_from_matrix(rho: &CMat, op: &CMat) -> f64 {
    // Tr(ρ O) = Σ_ij ρ_ij O_ji
    let dim = rho.nrows();
    let mut acc = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            let p = rho[(i, j)] * op[(j, i)];
            acc += p.re;
        }
    }
    acc
}

/// Cholesky factorization attempt on a Hermitian matrix, failing on a
/// non-positive pivot. nalgebra's complex Cholesky never fails (complex sqrt
/// is total), so positivity gating needs this hand-rolled variant.
fn hermitian_cholesky_succeeds(mat: &CMat) -> bool {
    let dim = mat.nrows();
    let mut l = CMat::zeros(dim, dim);
    for j in 0..dim {
        let mut d = mat[(j, j)].re;
        for k in 0..j {
            d -= l[(j, k)].norm_sqr();
        }
        if d <= 0.0 || !d.is_finite() {
            return false;
        }
        let root = d.sqrt();
        l[(j, j)] = c64(root, 0.0);
        for i in (j + 1)..dim {
            let mut s = mat[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = s / root;
        }
    }
    true
}

/// Cheap positivity gate: a shifted Cholesky succeeds iff the smallest
/// eigenvalue is above `-tolerance` (up to roundoff). Falls back to a full
/// eigendecomposition only to produce an accurate error report.
fn check_positive_semidefinite(mat: &CMat, tolerance: f64) -> Result<()> {
    let dim = mat.nrows();
    let shifted = mat + identity(dim) * c64(tolerance, 0.0);
    if hermitian_cholesky_succeeds(&shifted) {
        return Ok(());
    }
    let min_ev = match symmetric_eigen_sorted(mat) {
        Ok((vals, _)) => vals.first().copied().unwrap_or(f64::NAN),
        Err(_) => f64::NAN,
    };
    Err(Error::NotPositive {
        min_eigenvalue: min_ev,
        tolerance,
    })
}

// ---------------------------------------------------------------------------
// Eigendecomposition
// ---------------------------------------------------------------------------

/// Eigenvalues (ascending) and matching orthonormal eigenvector columns of a
/// Hermitian matrix.
pub fn symmetric_eigen_sorted(mat: &CMat) -> Result<(Vec<f64>, CMat)> {
    let dim = check_square(mat)?;
    let scale = max_abs(mat);
    let max_iter = 256 * dim.max(8);
    let se = nalgebra::linalg::SymmetricEigen::try_new(mat.clone(), f64::EPSILON, max_iter)
        .ok_or(Error::EigenFailure { dim, scale })?;
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| se.eigenvalues[a].total_cmp(&se.eigenvalues[b]));
    let values: Vec<f64> = order.iter().map(|&k| se.eigenvalues[k]).collect();
    let mut vectors = CMat::zeros(dim, dim);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &se.eigenvectors.column(src));
    }
    Ok((values, vectors))
}

/// Raw eigenbasis of a Hermitian operator: ascending eigenvalues with one
/// orthonormal column each (no degeneracy merging).
#[derive(Debug, Clone)]
pub struct EigenBasis {
    pub values: Vec<f64>,
    pub vectors: CMat,
}

impl EigenBasis {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// exp(-i s H) assembled from the eigenbasis; unitary to roundoff.
    pub fn phase_exponential(&self, s: f64) -> CMat {
        let dim = self.dim();
        let mut scaled = self.vectors.clone();
        for (j, &e) in self.values.iter().enumerate() {
            let phase = Complex64::from_polar(1.0, -s * e);
            for i in 0..dim {
                scaled[(i, j)] *= phase;
            }
        }
        &scaled * self.vectors.adjoint()
    }

    /// exp(z H) for arbitrary complex z.
    pub fn scalar_exponential(&self, z: Complex64) -> CMat {
        let dim = self.dim();
        let mut scaled = self.vectors.clone();
        for (j, &e) in self.values.iter().enumerate() {
            let factor = (z * c64(e, 0.0)).exp();
            for i in 0..dim {
                scaled[(i, j)] *= factor;
            }
        }
        &scaled * self.vectors.adjoint()
    }
}

pub fn eigen_basis(h: &HermitianOperator) -> Result<EigenBasis> {
    let (values, vectors) = symmetric_eigen_sorted(h.matrix())?;
    Ok(EigenBasis { values, vectors })
}

/// Eigenvalues with orthogonal projectors; nearly-degenerate eigenvalues
/// (relative gap below the degeneracy tolerance) share one projector.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<f64>,
    pub projectors: Vec<CMat>,
}

impl SpectralDecomposition {
    /// Σ e_j P_j.
    pub fn reconstruct(&self) -> CMat {
        let dim = self.projectors[0].nrows();
        let mut acc = CMat::zeros(dim, dim);
        for (e, p) in self.eigenvalues.iter().zip(&self.projectors) {
            acc += p * c64(*e, 0.0);
        }
        acc
    }

    pub fn dim(&self) -> usize {
        self.projectors[0].nrows()
    }
}

pub fn eigendecompose(h: &HermitianOperator) -> Result<SpectralDecomposition> {
    eigendecompose_with_tolerances(h, &Tolerances::default())
}

pub fn eigendecompose_with_tolerances(
    h: &HermitianOperator,
    tol: &Tolerances,
) -> Result<SpectralDecomposition> {
    let basis = eigen_basis(h)?;
    let dim = basis.dim();
    let scale = basis.values.iter().fold(0.0f64, |m, e| m.max(e.abs()));

    // Basis orthonormality implies projector idempotency, mutual orthogonality
    // and completeness; verify it once instead of all pairwise products.
    let gram_residual = max_abs(&(basis.vectors.adjoint() * &basis.vectors - identity(dim)));
    if gram_residual > tol.projector {
        return Err(Error::SpectralInvariant {
            property: "basis orthonormality",
            residual: gram_residual,
        });
    }

    let gap = tol.degeneracy * scale.max(f64::MIN_POSITIVE);
    let mut eigenvalues = Vec::new();
    let mut projectors = Vec::new();
    let mut start = 0;
    while start < dim {
        let mut end = start + 1;
        while end < dim && basis.values[end] - basis.values[end - 1] < gap {
            end += 1;
        }
        let block = basis.vectors.columns(start, end - start);
        let projector = &block * block.adjoint();
        let mean: f64 = basis.values[start..end].iter().sum::<f64>() / (end - start) as f64;
        eigenvalues.push(mean);
        projectors.push(projector);
        start = end;
    }

    let decomposition = SpectralDecomposition {
        eigenvalues,
        projectors,
    };
    let recon_residual = max_abs(&(decomposition.reconstruct() - h.matrix()));
    if recon_residual > tol.projector * scale.max(1.0) {
        return Err(Error::SpectralInvariant {
            property: "reconstruction",
            residual: recon_residual,
        });
    }
    Ok(decomposition)
}

// ---------------------------------------------------------------------------
// Commutators
// ---------------------------------------------------------------------------

/// [G, X] = GX - XG.
pub fn commutator(g: &CMat, x: &CMat) -> Result<CMat> {
    check_same_dim(g, x)?;
    Ok(g * x - x * g)
}

/// [V, [V, ρ]] = V²ρ - 2VρV + ρV².
pub fn double_commutator_apply(v: &HermitianOperator, rho: &CMat) -> Result<CMat> {
    check_same_dim(v.matrix(), rho)?;
    let v = v.matrix();
    let vr = v * rho;
    let vvr = v * &vr;
    let vrv = &vr * v;
    let rvv = rho * (v * v);
    Ok(vvr - vrv * c64(2.0, 0.0) + rvv)
}

/// exp(-i s H) for Hermitian H, via the eigendecomposition.
pub fn expm_hermitian_generator(h: &HermitianOperator, s: f64) -> Result<CMat> {
    Ok(eigen_basis(h)?.phase_exponential(s))
}

// ---------------------------------------------------------------------------
// Conjugation by the nested-commutator series
// ---------------------------------------------------------------------------

const CONJUGATION_MAX_TERMS: usize = 64;

/// e^{ξA} B e^{-ξA} evaluated as Σ_k (ξ^k / k!) [A, ·]^k [B], truncated when
/// the next term drops below 1e-14 of the running scale.
///
/// `xi` may be complex; the series is the same.
pub fn louisell_conjugate(a: &CMat, b: &CMat, xi: Complex64) -> Result<CMat> {
    check_same_dim(a, b)?;
    let b_scale = max_abs(b).max(1.0);
    let mut sum = b.clone();
    let mut term = b.clone();
    if xi.norm() == 0.0 {
        return Ok(sum);
    }
    for k in 1..=CONJUGATION_MAX_TERMS {
        term = (a * &term - &term * a) * (xi / c64(k as f64, 0.0));
        sum += &term;
        if max_abs(&term) < 1e-14 * b_scale {
            return Ok(sum);
        }
    }
    Err(Error::SeriesDivergence {
        max_terms: CONJUGATION_MAX_TERMS,
    })
}

// ---------------------------------------------------------------------------
// General matrix exponential (Pade 13 with scaling and squaring)
// ---------------------------------------------------------------------------

const PADE13_THETA: f64 = 5.371920351148152;
const PADE13_B: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn one_norm(m: &CMat) -> f64 {
    let mut best = 0.0f64;
    for j in 0..m.ncols() {
        let s: f64 = m.column(j).iter().map(|z| z.norm()).sum();
        best = best.max(s);
    }
    best
}

/// exp(A) for a general square complex matrix. Used for the vectorized
/// Liouvillian, which is not normal when H and the V_i fail to commute.
pub fn expm(a: &CMat) -> Result<CMat> {
    let dim = check_square(a)?;
    if !all_finite(a) {
        return Err(Error::NonFinite);
    }
    let norm = one_norm(a);
    let squarings = if norm > PADE13_THETA {
        (norm / PADE13_THETA).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a / c64(2f64.powi(squarings as i32), 0.0);

    let id = identity(dim);
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let b = &PADE13_B;
    let u_inner = &a6 * (&a6 * c64(b[13], 0.0) + &a4 * c64(b[11], 0.0) + &a2 * c64(b[9], 0.0))
        + &a6 * c64(b[7], 0.0)
        + &a4 * c64(b[5], 0.0)
        + &a2 * c64(b[3], 0.0)
        + &id * c64(b[1], 0.0);
    let u = &scaled * u_inner;
    let v = &a6 * (&a6 * c64(b[12], 0.0) + &a4 * c64(b[10], 0.0) + &a2 * c64(b[8], 0.0))
        + &a6 * c64(b[6], 0.0)
        + &a4 * c64(b[4], 0.0)
        + &a2 * c64(b[2], 0.0)
        + &id * c64(b[0], 0.0);

    let lhs = &v - &u;
    let rhs = &v + &u;
    let lu = nalgebra::linalg::LU::new(lhs);
    let mut result = lu.solve(&rhs).ok_or(Error::EigenFailure {
        dim,
        scale: norm,
    })?;
    for _ in 0..squarings {
        result = &result * &result;
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// Vectorization (column stacking)
// ---------------------------------------------------------------------------

/// vec(M) with columns stacked top to bottom.
pub fn vec_column_stack(m: &CMat) -> CVec {
    CVec::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_column_stack`] for a dim×dim matrix.
pub fn unvec(dim: usize, v: &CVec) -> Result<CMat> {
    if v.len() != dim * dim {
        return Err(Error::DimensionMismatch {
            left: v.len(),
            right: dim * dim,
        });
    }
    Ok(CMat::from_column_slice(dim, dim, v.as_slice()))
}

/// Matrix of ρ ↦ [op, ρ] under column stacking: I ⊗ op − op^T ⊗ I.
pub fn commutator_superoperator(op: &CMat) -> Result<CMat> {
    let dim = check_square(op)?;
    let id = identity(dim);
    Ok(id.kronecker(op) - op.transpose().kronecker(&id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    pub(crate) fn random_hermitian(dim: usize, seed: u64) -> HermitianOperator {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut m = CMat::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                m[(i, j)] = c64(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            }
        }
        let sym = (&m + m.adjoint()) * c64(0.5, 0.0);
        HermitianOperator::new(sym).unwrap()
    }

    #[test]
    fn commutator_of_operator_with_itself_is_zero() {
        let a = random_hermitian(4, 7).into_matrix();
        let c = commutator(&a, &a).unwrap();
        assert!(max_abs(&c) < 1e-14);
    }

    #[test]
    fn pauli_commutator_is_2i_sigma_y() {
        let c = commutator(&pauli_z(), &pauli_x()).unwrap();
        let expected = pauli_y() * c64(0.0, 2.0);
        assert!(max_abs(&(c - expected)) < 1e-15);
    }

    #[test]
    fn commutator_with_own_square_vanishes() {
        let h = random_hermitian(6, 3).into_matrix();
        let h2 = &h * &h;
        let c = commutator(&h, &h2).unwrap();
        assert!(max_abs(&c) < 1e-12 * max_abs(&h2));
    }

    #[test]
    fn commutator_rejects_dimension_mismatch() {
        let a = identity(2);
        let b = identity(3);
        assert!(matches!(
            commutator(&a, &b),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn double_commutator_on_coherence_scales_with_gap_squared() {
        // In the eigenbasis of V, [V,[V,|j⟩⟨k|]] = (v_j - v_k)² |j⟩⟨k|.
        let v = HermitianOperator::new(pauli_z()).unwrap();
        let rho = outer(&basis_ket(2, 0), &basis_ket(2, 1));
        let out = double_commutator_apply(&v, &rho).unwrap();
        assert!(max_abs(&(out - rho * c64(4.0, 0.0))) < 1e-14);
    }

    #[test]
    fn double_commutator_on_population_vanishes() {
        let v = HermitianOperator::new(pauli_z()).unwrap();
        let rho = outer(&basis_ket(2, 0), &basis_ket(2, 0));
        let out = double_commutator_apply(&v, &rho).unwrap();
        assert!(max_abs(&out) < 1e-14);
    }

    #[test]
    fn double_commutator_preserves_hermiticity_and_kills_trace() {
        for seed in 0..5u64 {
            let v = random_hermitian(5, 100 + seed);
            let rho = random_hermitian(5, 200 + seed).into_matrix();
            let out = double_commutator_apply(&v, &rho).unwrap();
            assert!(hermiticity_deviation(&out) < 1e-12 * max_abs(&out));
            assert!(trace(&out).norm() < 1e-12 * max_abs(&out).max(1.0));
        }
    }

    #[test]
    fn eigendecompose_sigma_z() {
        let h = HermitianOperator::new(pauli_z()).unwrap();
        let d = eigendecompose(&h).unwrap();
        assert_eq!(d.eigenvalues.len(), 2);
        assert_abs_diff_eq!(d.eigenvalues[0], -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(d.eigenvalues[1], 1.0, epsilon = 1e-14);
        let p_plus = outer(&basis_ket(2, 0), &basis_ket(2, 0));
        assert!(max_abs(&(&d.projectors[1] - p_plus)) < 1e-13);
    }

    #[test]
    fn eigendecompose_identity_merges_into_single_projector() {
        let h = HermitianOperator::new(identity(5)).unwrap();
        let d = eigendecompose(&h).unwrap();
        assert_eq!(d.eigenvalues.len(), 1);
        assert_abs_diff_eq!(d.eigenvalues[0], 1.0, epsilon = 1e-14);
        assert!(max_abs(&(&d.projectors[0] - identity(5))) < 1e-12);
    }

    #[test]
    fn eigendecompose_invariants_on_random_hermitian() {
        for &dim in &[3usize, 8, 16, 64] {
            let h = random_hermitian(dim, dim as u64);
            let d = eigendecompose(&h).unwrap();
            let scale = max_abs(h.matrix());
            // reconstruction
            assert!(max_abs(&(d.reconstruct() - h.matrix())) < 1e-10 * scale.max(1.0));
            // completeness
            let sum: CMat = d
                .projectors
                .iter()
                .fold(CMat::zeros(dim, dim), |acc, p| acc + p);
            assert!(max_abs(&(sum - identity(dim))) < 1e-10);
            // idempotency, hermiticity, mutual orthogonality
            for (i, p) in d.projectors.iter().enumerate() {
                assert!(max_abs(&(p * p - p)) < 1e-10);
                assert!(hermiticity_deviation(p) < 1e-12);
                for q in d.projectors.iter().skip(i + 1) {
                    assert!(max_abs(&(p * q)) < 1e-10);
                }
            }
        }
    }

    #[test]
    fn expm_hermitian_at_zero_is_identity() {
        let h = random_hermitian(4, 11);
        let u = expm_hermitian_generator(&h, 0.0).unwrap();
        assert!(max_abs(&(u - identity(4))) < 1e-14);
    }

    #[test]
    fn expm_hermitian_sigma_z_quarter_turn() {
        let h = HermitianOperator::new(pauli_z()).unwrap();
        let u = expm_hermitian_generator(&h, std::f64::consts::PI).unwrap();
        let expected = CMat::from_row_slice(
            2,
            2,
            &[c64(-1.0, 0.0), c64(0.0, 0.0), c64(0.0, 0.0), c64(-1.0, 0.0)],
        );
        // exp(-iπσ_z) = diag(e^{-iπ}, e^{iπ}) = -I
        assert!(max_abs(&(u - expected)) < 1e-13);
    }

    #[test]
    fn expm_hermitian_inverse_pair() {
        let h = random_hermitian(6, 21);
        let u = expm_hermitian_generator(&h, 0.7).unwrap();
        let v = expm_hermitian_generator(&h, -0.7).unwrap();
        assert!(max_abs(&(u * v - identity(6))) < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn prop_expm_hermitian_is_unitary(seed in 0u64..1u64 << 48, s in -10.0f64..10.0) {
            let h = random_hermitian(5, seed);
            let u = expm_hermitian_generator(&h, s).unwrap();
            let residual = max_abs(&(u.adjoint() * &u - identity(5)));
            prop_assert!(residual < 1e-12);
        }
    }

    #[test]
    fn louisell_conjugate_at_zero_returns_b() {
        let a = random_hermitian(4, 31).into_matrix();
        let b = random_hermitian(4, 32).into_matrix();
        let out = louisell_conjugate(&a, &b, c64(0.0, 0.0)).unwrap();
        assert!(max_abs(&(out - b)) < 1e-15);
    }

    #[test]
    fn louisell_conjugate_matches_direct_conjugation_pauli() {
        // A = σ_z, B = σ_x, ξ = iπ/2.
        let a = pauli_z();
        let b = pauli_x();
        let xi = c64(0.0, std::f64::consts::FRAC_PI_2);
        let series = louisell_conjugate(&a, &b, xi).unwrap();
        let basis = eigen_basis(&HermitianOperator::new(a.clone()).unwrap()).unwrap();
        let e_plus = basis.scalar_exponential(xi);
        let e_minus = basis.scalar_exponential(-xi);
        let direct = &e_plus * &b * &e_minus;
        assert!(max_abs(&(series - direct)) < 1e-10);
    }

    #[test]
    fn louisell_conjugate_matches_direct_conjugation_random_batch() {
        // 100 random 4×4 Hermitian pairs, ξ ∈ [-0.5, 0.5].
        let mut rng = ChaCha12Rng::seed_from_u64(404);
        for k in 0..100u64 {
            let a = random_hermitian(4, 1000 + k);
            let b = random_hermitian(4, 2000 + k);
            let xi = c64(rng.random_range(-0.5..0.5), 0.0);
            let series = louisell_conjugate(a.matrix(), b.matrix(), xi).unwrap();
            let basis = eigen_basis(&a).unwrap();
            let direct =
                basis.scalar_exponential(xi) * b.matrix() * basis.scalar_exponential(-xi);
            assert!(max_abs(&(series - direct)) < 1e-9);
        }
    }

    #[test]
    fn expm_matches_spectral_exponential_on_skew_hermitian() {
        let h = random_hermitian(5, 77);
        let basis = eigen_basis(&h).unwrap();
        let direct = basis.phase_exponential(1.3);
        let generator = h.matrix() * c64(0.0, -1.3);
        let pade = expm(&generator).unwrap();
        assert!(max_abs(&(pade - direct)) < 1e-12);
    }

    #[test]
    fn expm_handles_large_norm_via_squaring() {
        let h = random_hermitian(4, 78);
        let basis = eigen_basis(&h).unwrap();
        let direct = basis.phase_exponential(40.0);
        let generator = h.matrix() * c64(0.0, -40.0);
        let pade = expm(&generator).unwrap();
        assert!(max_abs(&(pade - direct)) < 1e-10);
    }

    #[test]
    fn vec_unvec_roundtrip_and_ordering() {
        let m = CMat::from_row_slice(
            2,
            2,
            &[c64(1.0, 0.0), c64(2.0, 0.0), c64(3.0, 0.0), c64(4.0, 0.0)],
        );
        let v = vec_column_stack(&m);
        // column stacking: (1,1) entry then (2,1), then second column
        assert_eq!(v[0], c64(1.0, 0.0));
        assert_eq!(v[1], c64(3.0, 0.0));
        assert_eq!(v[2], c64(2.0, 0.0));
        assert_eq!(v[3], c64(4.0, 0.0));
        let back = unvec(2, &v).unwrap();
        assert!(max_abs(&(back - m)) < 1e-15);
    }

    #[test]
    fn commutator_superoperator_matches_direct_commutator() {
        let op = random_hermitian(3, 91).into_matrix();
        let x = random_hermitian(3, 92).into_matrix();
        let sup = commutator_superoperator(&op).unwrap();
        let via_sup = unvec(3, &(&sup * vec_column_stack(&x))).unwrap();
        let direct = commutator(&op, &x).unwrap();
        assert!(max_abs(&(via_sup - direct)) < 1e-13);
    }

    #[test]
    fn hermitian_operator_rejects_non_hermitian() {
        let mut m = pauli_x();
        m[(0, 1)] += c64(1e-6, 0.0);
        assert!(matches!(
            HermitianOperator::new(m),
            Err(Error::NotHermitian { .. })
        ));
    }

    #[test]
    fn density_matrix_validates_trace_and_positivity() {
        let ok = DensityMatrix::new(identity(2) * c64(0.5, 0.0)).unwrap();
        assert_abs_diff_eq!(ok.purity(), 0.5, epsilon = 1e-14);

        let bad_trace = identity(2);
        assert!(matches!(
            DensityMatrix::new(bad_trace),
            Err(Error::TraceNotOne { .. })
        ));

        let mut negative = CMat::zeros(2, 2);
        negative[(0, 0)] = c64(1.5, 0.0);
        negative[(1, 1)] = c64(-0.5, 0.0);
        assert!(matches!(
            DensityMatrix::new(negative),
            Err(Error::NotPositive { .. })
        ));
    }

    #[test]
    fn density_matrix_accepts_pure_states() {
        let psi = CVec::from_vec(vec![c64(1.0, 0.0), c64(0.0, 1.0)]);
        let rho = DensityMatrix::pure(&psi).unwrap();
        assert_abs_diff_eq!(rho.purity(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(trace(rho.matrix()).re, 1.0, epsilon = 1e-12);
    }
}
