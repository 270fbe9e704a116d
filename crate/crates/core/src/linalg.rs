//! Dense symmetric linear algebra.
//!
//! Everything here works on small dense matrices (order up to a few
//! hundred). Eigendecompositions use the cyclic Jacobi method, which is
//! slow asymptotically but accurate to a few ulps on the spectra the
//! weight-design metrics are computed from.

use std::ops::Index;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

/// Relative tolerance of the PSD test: `A` counts as PSD iff
/// `λ_min(A) >= -PSD_REL_TOL * max(1, λ_max(A))`.
pub const PSD_REL_TOL: f64 = 1e-8;

const JACOBI_MAX_SWEEPS: usize = 100;

/// A real symmetric matrix. Symmetry is exact: the stored entries satisfy
/// `a[(i, j)] == a[(j, i)]` bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    m: DMatrix<f64>,
}

impl SymMatrix {
    /// Builds a matrix of order `n` from `f(i, j)` evaluated on the upper
    /// triangle (`i <= j`) and mirrored.
    ///
    /// Panics if `n == 0`.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(n >= 1, "symmetric matrix order must be positive");
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..=j {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Self { m }
    }

    /// Wraps a square matrix that is symmetric up to rounding
    /// (`|a_ij - a_ji| <= 1e-10 * max(1, max|a|)`); the stored matrix is the
    /// exact average `(A + Aᵀ) / 2`.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() == 0 || m.nrows() != m.ncols() {
            return Err(invalid(format!(
                "expected a non-empty square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(invalid("matrix has non-finite entries"));
        }
        let scale = m.amax().max(1.0);
        let n = m.nrows();
        for j in 0..n {
            for i in 0..j {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                    return Err(invalid(format!("matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self::symmetrize(m))
    }

    /// Stores `(A + Aᵀ) / 2` without checking how asymmetric `A` was.
    pub fn symmetrize(m: DMatrix<f64>) -> Self {
        assert!(m.nrows() >= 1 && m.nrows() == m.ncols());
        let n = m.nrows();
        Self::from_fn(n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn zeros(n: usize) -> Self {
        Self::from_fn(n, |_, _| 0.0)
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        Self::from_fn(d.len(), |i, j| if i == j { d[i] } else { 0.0 })
    }

    pub fn order(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.m.norm()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { m: &self.m * s }
    }

    /// `Bᵀ A B`.
    pub fn congruence(&self, b: &DMatrix<f64>) -> Self {
        Self::symmetrize(b.transpose() * &self.m * b)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let x = DVector::from_column_slice(v);
        (&self.m * x).as_slice().to_vec()
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().all(|v| v.is_finite())
    }

    pub fn eig(&self) -> Result<EigDecomposition> {
        sym_eig(self)
    }
}

impl Index<(usize, usize)> for SymMatrix {
    type Output = f64;

    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.m[idx]
    }
}

/// Eigenvalues in ascending order with matching orthonormal eigenvectors
/// (column `i` of `vectors` belongs to `values[i]`).
#[derive(Clone, Debug)]
pub struct EigDecomposition {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigDecomposition {
    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// `Q Λ Qᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let q = &self.vectors;
        let lam = DMatrix::from_diagonal(&DVector::from_column_slice(&self.values));
        q * lam * q.transpose()
    }

    /// `Q f(Λ) Qᵀ`.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for (j, &v) in self.values.iter().enumerate() {
            let fv = f(v);
            for i in 0..n {
                scaled[(i, j)] *= fv;
            }
        }
        SymMatrix::symmetrize(scaled * self.vectors.transpose())
    }
}

/// Full eigendecomposition by the cyclic Jacobi method.
pub fn sym_eig(a: &SymMatrix) -> Result<EigDecomposition> {
    if !a.is_finite() {
        return Err(invalid("eigendecomposition of a matrix with non-finite entries"));
    }
    let n = a.order();
    let mut m = a.as_matrix().clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = m.norm();
    let mut converged = scale == 0.0 || n == 1;

    let mut sweep = 0;
    while !converged {
        if sweep == JACOBI_MAX_SWEEPS {
            return Err(Error::NumericalFailure(format!(
                "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps (n = {n})"
            )));
        }
        let ms = m.as_mut_slice();
        let vs = v.as_mut_slice();
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = ms[p + q * n];
                if apq == 0.0 {
                    continue;
                }
                let app = ms[p + p * n];
                let aqq = ms[q + q * n];
                // Off-diagonal entries below rounding level of both pivots are dropped.
                if sweep > 3 && app.abs() + 1e3 * apq.abs() == app.abs() && aqq.abs() + 1e3 * apq.abs() == aqq.abs() {
                    ms[p + q * n] = 0.0;
                    ms[q + p * n] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);
                ms[p + p * n] = app - t * apq;
                ms[q + q * n] = aqq + t * apq;
                ms[p + q * n] = 0.0;
                ms[q + p * n] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let g = ms[r + p * n];
                    let h = ms[r + q * n];
                    let rp = g - s * (h + g * tau);
                    let rq = h + s * (g - h * tau);
                    ms[r + p * n] = rp;
                    ms[p + r * n] = rp;
                    ms[r + q * n] = rq;
                    ms[q + r * n] = rq;
                }
                for r in 0..n {
                    let g = vs[r + p * n];
                    let h = vs[r + q * n];
                    vs[r + p * n] = g - s * (h + g * tau);
                    vs[r + q * n] = h + s * (g - h * tau);
                }
            }
        }
        sweep += 1;
        let mut off = 0.0;
        for q in 1..n {
            for p in 0..q {
                off += ms[p + q * n] * ms[p + q * n];
            }
        }
        converged = off.sqrt() <= 1e-15 * scale;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &v.column(src));
    }
    Ok(EigDecomposition { values, vectors })
}

/// PSD test with the crate-wide tolerance [`PSD_REL_TOL`].
pub fn is_psd(a: &SymMatrix) -> Result<bool> {
    let eig = sym_eig(a)?;
    Ok(eig.min() >= -PSD_REL_TOL * eig.max().max(1.0))
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix; eigenvalues with
/// `|λ| <= rel_tol * max|λ|` are treated as zero.
pub fn pseudo_inverse(a: &SymMatrix, rel_tol: f64) -> Result<SymMatrix> {
    let eig = sym_eig(a)?;
    let top = eig.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let cut = rel_tol * top;
    Ok(eig.map_spectrum(|v| if v.abs() <= cut { 0.0 } else { 1.0 / v }))
}

/// The orthogonal change of coordinates whose last column is `1/√n · 1`,
/// used to project the all-ones direction out of `L H L`.
#[derive(Clone, Debug)]
pub struct ReductionTransform {
    n: usize,
    t: DMatrix<f64>,
}

impl ReductionTransform {
    pub fn n(&self) -> usize {
        self.n
    }

    /// The `n x n` orthogonal matrix `T`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.t
    }

    /// `ρ = 1 / √(n (n + 1 + 2√n))`, the column scale of the first `n - 1` columns.
    pub fn rho(&self) -> f64 {
        column_scale(self.n)
    }

    /// The selector `J = [I_{n-1} 0]`.
    pub fn selector(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n - 1, self.n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// `J Tᵀ`, an `(n-1) x n` matrix with orthonormal rows spanning `1⊥`.
    pub fn reduced_basis(&self) -> DMatrix<f64> {
        self.t.columns(0, self.n - 1).transpose()
    }

    /// `J Tᵀ A T Jᵀ`.
    pub fn compress(&self, a: &SymMatrix) -> SymMatrix {
        let tt = self.t.columns(0, self.n - 1);
        SymMatrix::symmetrize(tt.transpose() * a.as_matrix() * tt)
    }
}

fn column_scale(n: usize) -> f64 {
    let nf = n as f64;
    1.0 / (nf * (nf + 1.0 + 2.0 * nf.sqrt())).sqrt()
}

/// Builds `T` for dimension `n >= 2`.
pub fn build_reduction_transform(n: usize) -> Result<ReductionTransform> {
    if n < 2 {
        return Err(invalid(format!("reduction transform needs n >= 2, got {n}")));
    }
    let nf = n as f64;
    let sq = nf.sqrt();
    let rho = column_scale(n);
    let t = DMatrix::from_fn(n, n, |i, j| {
        if j == n - 1 {
            1.0 / sq
        } else if i == n - 1 {
            (-1.0 - sq) * rho
        } else if i == j {
            (nf - 1.0 + sq) * rho
        } else {
            -rho
        }
    });
    Ok(ReductionTransform { n, t })
}

/// The order-`q` truncated Taylor inverse `Σ_{p=0}^{q} (I - A)^p`, evaluated
/// by the recursion `S ← I + (I - A) S` (q matrix products).
///
/// No spectral precondition is checked: for `max|1 - λ_i(A)| >= 1` the
/// series diverges and the result simply reflects that.
pub fn taylor_q_inverse(a: &SymMatrix, q: usize) -> Result<SymMatrix> {
    if !a.is_finite() {
        return Err(invalid("Taylor inverse of a matrix with non-finite entries"));
    }
    let n = a.order();
    let id = DMatrix::<f64>::identity(n, n);
    let resid = &id - a.as_matrix();
    let mut s = id.clone();
    for _ in 0..q {
        s = &id + &resid * &s;
    }
    Ok(SymMatrix::symmetrize(s))
}

/// Outcome of the two-route block definiteness test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SchurVerdict {
    /// `[[A, B], [Bᵀ, C]] ⪰ 0` decided on the assembled block matrix.
    pub block_psd: bool,
    /// `C ≻ 0` and `A - B C⁻¹ Bᵀ ⪰ 0`.
    pub complement_psd: bool,
}

impl SchurVerdict {
    pub fn agree(&self) -> bool {
        self.block_psd == self.complement_psd
    }
}

/// Decides `[[A, B], [Bᵀ, C]] ⪰ 0` both directly and via the Schur
/// complement of an invertible `C`.
pub fn schur_definiteness_check(a: &SymMatrix, b: &DMatrix<f64>, c: &SymMatrix) -> Result<SchurVerdict> {
    let (na, nc) = (a.order(), c.order());
    if b.nrows() != na || b.ncols() != nc {
        return Err(invalid(format!(
            "off-diagonal block is {}x{}, expected {na}x{nc}",
            b.nrows(),
            b.ncols()
        )));
    }
    let c_eig = sym_eig(c)?;
    let c_top = c_eig.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if c_eig.values.iter().any(|v| v.abs() <= 1e-12 * c_top.max(1.0)) {
        return Err(invalid("lower-right block is singular"));
    }

    let block = SymMatrix::from_fn(na + nc, |i, j| match (i < na, j < na) {
        (true, true) => a[(i, j)],
        (true, false) => b[(i, j - na)],
        (false, true) => b[(j, i - na)],
        (false, false) => c[(i - na, j - na)],
    });
    let block_psd = is_psd(&block)?;

    let c_inv = c_eig.map_spectrum(|v| 1.0 / v);
    let complement = SymMatrix::symmetrize(a.as_matrix() - b * c_inv.as_matrix() * b.transpose());
    let complement_psd = c_eig.min() > 0.0 && is_psd(&complement)?;

    Ok(SchurVerdict { block_psd, complement_psd })
}

/// Lower Cholesky factor of a symmetric positive definite matrix, computed
/// with a right-looking blocked algorithm so that large factorizations run
/// at matrix-multiply speed.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

const CHOL_BLOCK: usize = 64;

impl Cholesky {
    /// Returns `None` if `a` is not numerically positive definite.
    pub fn new(mut a: DMatrix<f64>) -> Option<Self> {
        let n = a.nrows();
        debug_assert_eq!(n, a.ncols());
        let mut k = 0;
        while k < n {
            let kb = CHOL_BLOCK.min(n - k);
            factor_unblocked(&mut a, k, kb)?;
            let rest = n - k - kb;
            if rest > 0 {
                let lkk = a.view((k, k), (kb, kb)).clone_owned();
                // Panel: P ← P L_kk⁻ᵀ, computed as Pᵀ ← L_kk⁻¹ Pᵀ.
                let mut pt = a.view((k + kb, k), (rest, kb)).transpose();
                if !lkk.solve_lower_triangular_mut(&mut pt) {
                    return None;
                }
                let panel = pt.transpose();
                a.view_mut((k + kb, k), (rest, kb)).copy_from(&panel);
                let mut trail = a.view_mut((k + kb, k + kb), (rest, rest));
                trail.gemm(-1.0, &panel, &pt, 1.0);
            }
            k += kb;
        }
        for j in 1..n {
            for i in 0..j {
                a[(i, j)] = 0.0;
            }
        }
        Some(Self { l: a })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_mut(&mut x);
        self.l.tr_solve_lower_triangular_mut(&mut x);
        x
    }

    /// `L⁻¹`.
    pub fn l_inverse(&self) -> DMatrix<f64> {
        let n = self.l.nrows();
        let mut inv = DMatrix::identity(n, n);
        self.l.solve_lower_triangular_mut(&mut inv);
        inv
    }

    /// `A⁻¹ = L⁻ᵀ L⁻¹`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let li = self.l_inverse();
        li.transpose() * li
    }
}

fn factor_unblocked(a: &mut DMatrix<f64>, k: usize, kb: usize) -> Option<()> {
    for j in k..k + kb {
        let mut d = a[(j, j)];
        for p in k..j {
            d -= a[(j, p)] * a[(j, p)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        a[(j, j)] = djj;
        for i in j + 1..k + kb {
            let mut s = a[(i, j)];
            for p in k..j {
                s -= a[(i, p)] * a[(j, p)];
            }
            a[(i, j)] = s / djj;
        }
    }
    Some(())
}
