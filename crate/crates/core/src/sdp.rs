//! Small dense semidefinite programs:
//!
//! ```text
//!   minimize    cᵀy
//!   subject to  F0_b + Σ_i y_i F_ib ⪰ 0     for every block b
//!               g0_l + Σ_i G_li y_i ≥ 0      for every linear row l
//! ```
//!
//! Solved by an infeasible primal-dual interior-point method with the HKM
//! search direction and Mehrotra predictor-corrector steps.
//!
//! Coefficient matrices are either dense or given as sparse symmetric
//! triplets in a per-block basis `W`, meaning `F_i = W Ā_i Wᵀ`. The
//! factored form keeps the Schur complement assembly cheap when there are
//! hundreds of variables that each touch a handful of entries.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{Cholesky, SymMatrix};

/// Coefficient of one variable inside one block.
#[derive(Clone, Debug, PartialEq)]
pub enum Coefficient {
    /// Full `size x size` symmetric matrix in block coordinates.
    Dense(DMatrix<f64>),
    /// `(a, b, v)` with `a <= b`, mirrored to `(b, a, v)`; indices refer to
    /// the block basis (or to block coordinates when there is no basis).
    Factored(Vec<(usize, usize, f64)>),
}

/// Affine constraint `F0 + Σ y_i F_i ⪰ 0`.
#[derive(Clone, Debug)]
pub struct LmiBlock {
    size: usize,
    constant: DMatrix<f64>,
    basis: Option<DMatrix<f64>>,
    terms: Vec<(usize, Coefficient)>,
}

impl LmiBlock {
    pub fn new(constant: SymMatrix) -> Self {
        Self { size: constant.order(), constant: constant.into_matrix(), basis: None, terms: Vec::new() }
    }

    /// Sets the `size x p` basis used by factored coefficients.
    pub fn with_basis(mut self, w: DMatrix<f64>) -> Result<Self> {
        if w.nrows() != self.size || w.ncols() == 0 {
            return Err(invalid(format!("basis has {} rows, block has order {}", w.nrows(), self.size)));
        }
        if !self.terms.iter().all(|(_, c)| matches!(c, Coefficient::Dense(_))) {
            return Err(invalid("basis must be set before factored terms are added"));
        }
        self.basis = Some(w);
        Ok(self)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn basis_dim(&self) -> usize {
        self.basis.as_ref().map_or(self.size, |w| w.ncols())
    }

    pub fn add_dense(&mut self, var: usize, f: &SymMatrix) -> Result<()> {
        if f.order() != self.size {
            return Err(invalid(format!("coefficient of order {} in block of order {}", f.order(), self.size)));
        }
        self.terms.push((var, Coefficient::Dense(f.as_matrix().clone())));
        Ok(())
    }

    pub fn add_factored(&mut self, var: usize, entries: Vec<(usize, usize, f64)>) -> Result<()> {
        let p = self.basis_dim();
        for &(a, b, v) in &entries {
            if a > b || b >= p || !v.is_finite() {
                return Err(invalid(format!("bad factored entry ({a}, {b}, {v}) for basis of dimension {p}")));
            }
        }
        self.terms.push((var, Coefficient::Factored(entries)));
        Ok(())
    }

    /// `F0 + Σ y_i F_i`.
    pub fn evaluate(&self, y: &[f64]) -> SymMatrix {
        SymMatrix::symmetrize(&self.constant + self.linear_part(y))
    }

    /// `Σ y_i F_i`.
    fn linear_part(&self, y: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.size, self.size);
        let p = self.basis_dim();
        let mut inner = DMatrix::zeros(p, p);
        let mut any_factored = false;
        for (var, c) in &self.terms {
            let w = y[*var];
            if w == 0.0 {
                continue;
            }
            match c {
                Coefficient::Dense(f) => out += f * w,
                Coefficient::Factored(e) => {
                    any_factored = true;
                    for &(a, b, v) in e {
                        inner[(a, b)] += w * v;
                        if a != b {
                            inner[(b, a)] += w * v;
                        }
                    }
                }
            }
        }
        if any_factored {
            match &self.basis {
                Some(wm) => out += wm * inner * wm.transpose(),
                None => out += inner,
            }
        }
        out
    }

    /// `g_i += tr(F_i M)` for every term.
    fn adjoint_into(&self, m: &DMatrix<f64>, g: &mut [f64]) {
        let projected = self.basis.as_ref().map(|w| w.transpose() * m * w);
        let gm = projected.as_ref().unwrap_or(m);
        for (var, c) in &self.terms {
            g[*var] += match c {
                Coefficient::Dense(f) => f.dot(m),
                Coefficient::Factored(e) => e
                    .iter()
                    .map(|&(a, b, v)| if a == b { v * gm[(a, a)] } else { v * (gm[(a, b)] + gm[(b, a)]) })
                    .sum(),
            };
        }
    }
}

/// `constant + Σ coeffs ≥ 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearConstraint {
    pub constant: f64,
    pub coeffs: Vec<(usize, f64)>,
}

impl LinearConstraint {
    fn value(&self, y: &[f64]) -> f64 {
        self.constant + self.coeffs.iter().map(|&(i, g)| g * y[i]).sum::<f64>()
    }
}

#[derive(Clone, Debug)]
pub struct SdpProblem {
    num_vars: usize,
    objective: Vec<f64>,
    blocks: Vec<LmiBlock>,
    linear: Vec<LinearConstraint>,
}

impl SdpProblem {
    pub fn new(num_vars: usize) -> Self {
        Self { num_vars, objective: vec![0.0; num_vars], blocks: Vec::new(), linear: Vec::new() }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn objective(&self) -> &[f64] {
        &self.objective
    }

    pub fn blocks(&self) -> &[LmiBlock] {
        &self.blocks
    }

    pub fn linear_constraints(&self) -> &[LinearConstraint] {
        &self.linear
    }

    pub fn set_objective(&mut self, c: Vec<f64>) -> Result<()> {
        if c.len() != self.num_vars || c.iter().any(|v| !v.is_finite()) {
            return Err(invalid("objective length or values invalid"));
        }
        self.objective = c;
        Ok(())
    }

    pub fn set_objective_coeff(&mut self, var: usize, v: f64) -> Result<()> {
        self.check_var(var)?;
        self.objective[var] = v;
        Ok(())
    }

    pub fn add_block(&mut self, block: LmiBlock) -> Result<()> {
        for (var, _) in &block.terms {
            self.check_var(*var)?;
        }
        if block.constant.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite block constant"));
        }
        self.blocks.push(block);
        Ok(())
    }

    pub fn add_linear(&mut self, c: LinearConstraint) -> Result<()> {
        for &(var, g) in &c.coeffs {
            self.check_var(var)?;
            if !g.is_finite() {
                return Err(invalid("non-finite linear coefficient"));
            }
        }
        self.linear.push(c);
        Ok(())
    }

    /// `y_var >= lb`.
    pub fn add_lower_bound(&mut self, var: usize, lb: f64) -> Result<()> {
        self.add_linear(LinearConstraint { constant: -lb, coeffs: vec![(var, 1.0)] })
    }

    /// `y_var <= ub`.
    pub fn add_upper_bound(&mut self, var: usize, ub: f64) -> Result<()> {
        self.add_linear(LinearConstraint { constant: ub, coeffs: vec![(var, -1.0)] })
    }

    fn check_var(&self, var: usize) -> Result<()> {
        if var >= self.num_vars {
            return Err(invalid(format!("variable {var} out of range for {} variables", self.num_vars)));
        }
        Ok(())
    }

    /// Smallest eigenvalue over all blocks and smallest linear slack at `y`,
    /// each computed from scratch.
    pub fn min_constraint_value(&self, y: &[f64]) -> Result<f64> {
        let mut worst = f64::INFINITY;
        for b in &self.blocks {
            worst = worst.min(b.evaluate(y).eig()?.min());
        }
        for l in &self.linear {
            worst = worst.min(l.value(y));
        }
        Ok(worst)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdpStatus {
    Optimal,
    MaxIters,
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct SdpOptions {
    pub max_iters: usize,
    /// Target for relative gap, primal and dual infeasibility.
    pub tol: f64,
    /// Looser target accepted when progress stalls.
    pub acceptable_tol: f64,
    pub step_fraction: f64,
    /// Write one JSON object per iteration to this file.
    pub debug_dump: Option<PathBuf>,
}

impl Default for SdpOptions {
    fn default() -> Self {
        Self { max_iters: 100, tol: 1e-8, acceptable_tol: 1e-6, step_fraction: 0.95, debug_dump: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdpSolution {
    pub y: Vec<f64>,
    pub objective_value: f64,
    pub dual_objective: f64,
    pub status: SdpStatus,
    pub iterations: usize,
    pub relative_gap: f64,
    pub primal_infeasibility: f64,
    pub dual_infeasibility: f64,
    /// Most negative eigenvalue over all blocks at `y` (zero when all blocks are PSD).
    pub max_block_violation: f64,
}

#[derive(Serialize)]
struct DumpLine {
    iter: usize,
    pobj: f64,
    dobj: f64,
    relgap: f64,
    pinf: f64,
    dinf: f64,
    mu: f64,
    step_primal: f64,
    step_dual: f64,
}

/// Per-block cached factor data for one iteration.
struct BlockIter {
    s_inv: DMatrix<f64>,
    /// `F0 + F(y) - S`.
    p_res: DMatrix<f64>,
}

/// Factored coefficients of one block split into signed rank-one pieces,
/// `Ā_t = Σ_{r ∈ t} σ_r u_r u_rᵀ`.
struct LowRank {
    /// `p x R`, one column per piece.
    u: DMatrix<f64>,
    sigma: Vec<f64>,
    /// Variable index owning each piece.
    var: Vec<usize>,
}

impl LowRank {
    fn new(block: &LmiBlock) -> Self {
        let p = block.basis_dim();
        let mut cols: Vec<DVector<f64>> = Vec::new();
        let mut sigma = Vec::new();
        let mut var = Vec::new();
        for (v, c) in &block.terms {
            let Coefficient::Factored(e) = c else { continue };
            let mut support: Vec<usize> = e.iter().flat_map(|&(a, b, _)| [a, b]).collect();
            support.sort_unstable();
            support.dedup();
            let pos = |i: usize| support.binary_search(&i).expect("index in support");
            let k = support.len();
            let mut local = DMatrix::<f64>::zeros(k, k);
            for &(a, b, w) in e {
                local[(pos(a), pos(b))] += w;
                if a != b {
                    local[(pos(b), pos(a))] += w;
                }
            }
            let eig = local.symmetric_eigen();
            let top = eig.eigenvalues.iter().fold(0.0f64, |m, x: &f64| m.max(x.abs()));
            for (r, &lambda) in eig.eigenvalues.iter().enumerate() {
                if lambda.abs() <= 1e-14 * top {
                    continue;
                }
                let mut col = DVector::zeros(p);
                for (slot, &i) in support.iter().enumerate() {
                    col[i] = eig.eigenvectors[(slot, r)];
                }
                cols.push(col);
                sigma.push(lambda);
                var.push(*v);
            }
        }
        let u = if cols.is_empty() { DMatrix::zeros(p, 0) } else { DMatrix::from_columns(&cols) };
        Self { u, sigma, var }
    }
}

struct State {
    y: Vec<f64>,
    s: Vec<DMatrix<f64>>,
    z: Vec<DMatrix<f64>>,
    ls: Vec<f64>,
    lz: Vec<f64>,
}

struct Direction {
    dy: Vec<f64>,
    ds: Vec<DMatrix<f64>>,
    dz: Vec<DMatrix<f64>>,
    dls: Vec<f64>,
    dlz: Vec<f64>,
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.inverse())
}

/// Largest `t` with `x + t dx ⪰ 0`, given `x ≻ 0`.
fn max_step_psd(x: &DMatrix<f64>, dx: &DMatrix<f64>) -> f64 {
    let Some(c) = x.clone().cholesky() else { return 0.0 };
    let l = c.l();
    let n = x.nrows();
    let linv = l.solve_lower_triangular(&DMatrix::identity(n, n)).unwrap_or_else(|| DMatrix::identity(n, n));
    let m = sym(&linv * dx * linv.transpose());
    let lmin = m.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
    if lmin >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lmin
    }
}

/// Shrinks `t` until every `x + t dx` has a Cholesky factor.
fn backtrack(mut t: f64, x: &[DMatrix<f64>], dx: &[DMatrix<f64>]) -> (f64, Vec<DMatrix<f64>>) {
    loop {
        let cand: Vec<DMatrix<f64>> = x.iter().zip(dx).map(|(x, d)| sym(x + d * t)).collect();
        if t < 1e-12 || cand.iter().all(|c| c.clone().cholesky().is_some()) {
            return if t < 1e-12 { (0.0, x.to_vec()) } else { (t, cand) };
        }
        t *= 0.8;
    }
}

fn max_step_lp(x: &[f64], dx: &[f64]) -> f64 {
    x.iter().zip(dx).filter(|(_, d)| **d < 0.0).map(|(x, d)| -x / d).fold(f64::INFINITY, f64::min)
}

struct Solver<'a> {
    problem: &'a SdpProblem,
    low_rank: Vec<LowRank>,
    options: &'a SdpOptions,
    dim_total: f64,
    scale_primal: f64,
    scale_dual: f64,
}

impl<'a> Solver<'a> {
    fn objective_dual(&self, st: &State) -> f64 {
        let blocks: f64 = self.problem.blocks.iter().zip(&st.z).map(|(b, z)| b.constant.dot(z)).sum();
        let lin: f64 = self.problem.linear.iter().zip(&st.lz).map(|(l, z)| l.constant * z).sum();
        -(blocks + lin)
    }

    /// `𝓕*(Z) + Gᵀz`.
    fn adjoint(&self, st: &State) -> Vec<f64> {
        let mut g = vec![0.0; self.problem.num_vars];
        for (b, z) in self.problem.blocks.iter().zip(&st.z) {
            b.adjoint_into(z, &mut g);
        }
        for (l, z) in self.problem.linear.iter().zip(&st.lz) {
            for &(i, c) in &l.coeffs {
                g[i] += c * z;
            }
        }
        g
    }

    fn mu(&self, st: &State) -> f64 {
        let blocks: f64 = st.s.iter().zip(&st.z).map(|(s, z)| s.dot(z)).sum();
        let lin: f64 = st.ls.iter().zip(&st.lz).map(|(s, z)| s * z).sum();
        (blocks + lin) / self.dim_total
    }

    fn schur(&self, st: &State, it: &[BlockIter]) -> DMatrix<f64> {
        let m = self.problem.num_vars;
        let mut bmat = DMatrix::zeros(m, m);
        for (bi, block) in self.problem.blocks.iter().enumerate() {
            let z = &st.z[bi];
            let s_inv = &it[bi].s_inv;
            let lr = &self.low_rank[bi];
            let rank = lr.sigma.len();
            // Factored pairs: σ_r σ_s (u_rᵀ WᵀZW u_s)(u_sᵀ WᵀS⁻¹W u_r).
            let wu = block.basis.as_ref().map(|w| w * &lr.u);
            let wu = wu.as_ref().unwrap_or(&lr.u);
            if rank > 0 {
                let wut = wu.transpose();
                let pz = &wut * (z * wu);
                let ps = &wut * (s_inv * wu);
                for s_ in 0..rank {
                    let vs = lr.var[s_];
                    let ss = lr.sigma[s_];
                    for r in 0..rank {
                        bmat[(lr.var[r], vs)] += lr.sigma[r] * ss * pz[(r, s_)] * ps[(s_, r)];
                    }
                }
            }
            // Dense terms against everything: with K_t = S⁻¹ F_t Z,
            // tr(F_u K_t) for dense partners and Σ σ_r u_rᵀ Wᵀ K_t W u_r for factored ones.
            let dense: Vec<(usize, &DMatrix<f64>)> = block
                .terms
                .iter()
                .filter_map(|(v, c)| match c {
                    Coefficient::Dense(f) => Some((*v, f)),
                    Coefficient::Factored(_) => None,
                })
                .collect();
            for (t, &(vt, ft)) in dense.iter().enumerate() {
                let k = s_inv * ft * z;
                for (u, &(vu, fu)) in dense.iter().enumerate().skip(t) {
                    let val = fu.dot(&k.transpose());
                    bmat[(vt, vu)] += val;
                    if u != t {
                        bmat[(vu, vt)] += val;
                    }
                }
                if rank > 0 {
                    let kwu = &k * wu;
                    for r in 0..rank {
                        let val = lr.sigma[r] * wu.column(r).dot(&kwu.column(r));
                        bmat[(vt, lr.var[r])] += val;
                        bmat[(lr.var[r], vt)] += val;
                    }
                }
            }
        }
        for (l, (s, z)) in self.problem.linear.iter().zip(st.ls.iter().zip(&st.lz)) {
            let ratio = z / s;
            for &(i, gi) in &l.coeffs {
                for &(j, gj) in &l.coeffs {
                    bmat[(i, j)] += gi * gj * ratio;
                }
            }
        }
        bmat
    }

    fn factor(&self, mut bmat: DMatrix<f64>) -> Result<Cholesky> {
        let m = bmat.nrows();
        let top = (0..m).map(|i| bmat[(i, i)].abs()).fold(0.0f64, f64::max).max(1e-300);
        let mut reg = 0.0;
        for _ in 0..12 {
            if let Some(c) = Cholesky::new(bmat.clone()) {
                return Ok(c);
            }
            let next = if reg == 0.0 { 1e-14 * top } else { reg * 100.0 };
            for i in 0..m {
                bmat[(i, i)] += next - reg;
            }
            reg = next;
        }
        Err(Error::NumericalFailure("Schur complement is not positive definite".into()))
    }

    /// Solves one Newton system. `corr` carries `(Δ_blocks, Δ_linear)`.
    #[allow(clippy::too_many_arguments)]
    fn direction(
        &self,
        st: &State,
        it: &[BlockIter],
        lin_res: &[f64],
        chol: &Cholesky,
        sigma_mu: f64,
        corr: Option<(&[DMatrix<f64>], &[f64])>,
    ) -> Direction {
        let m = self.problem.num_vars;
        let mut rhs = vec![0.0; m];
        let mut phis = Vec::with_capacity(self.problem.blocks.len());
        for (bi, block) in self.problem.blocks.iter().enumerate() {
            let n = block.size;
            let mut centre = DMatrix::identity(n, n) * sigma_mu;
            if let Some((d, _)) = corr {
                centre -= &d[bi];
            }
            let base = &centre * &it[bi].s_inv;
            let phi = sym(&base - &st.z[bi] * &it[bi].p_res * &it[bi].s_inv);
            block.adjoint_into(&phi, &mut rhs);
            phis.push(base);
        }
        let mut lin_base = Vec::with_capacity(self.problem.linear.len());
        for (li, l) in self.problem.linear.iter().enumerate() {
            let delta = corr.map_or(0.0, |(_, d)| d[li]);
            let base = (sigma_mu - delta) / st.ls[li];
            let phi = base - st.lz[li] * lin_res[li] / st.ls[li];
            for &(i, g) in &l.coeffs {
                rhs[i] += g * phi;
            }
            lin_base.push(base);
        }
        for (r, c) in rhs.iter_mut().zip(&self.problem.objective) {
            *r -= c;
        }
        let dy = chol.solve(&DVector::from_vec(rhs));
        let dy: Vec<f64> = dy.iter().copied().collect();
        let mut ds = Vec::new();
        let mut dz = Vec::new();
        for (bi, block) in self.problem.blocks.iter().enumerate() {
            let d_s = sym(&it[bi].p_res + block.linear_part(&dy));
            let d_z = sym(&phis[bi] - &st.z[bi] - &st.z[bi] * &d_s * &it[bi].s_inv);
            ds.push(d_s);
            dz.push(d_z);
        }
        let mut dls = Vec::new();
        let mut dlz = Vec::new();
        for (li, l) in self.problem.linear.iter().enumerate() {
            let d_s = lin_res[li] + l.coeffs.iter().map(|&(i, g)| g * dy[i]).sum::<f64>();
            let d_z = lin_base[li] - st.lz[li] - st.lz[li] * d_s / st.ls[li];
            dls.push(d_s);
            dlz.push(d_z);
        }
        Direction { dy, ds, dz, dls, dlz }
    }

    fn step_lengths(&self, st: &State, d: &Direction) -> (f64, f64) {
        let mut ap = max_step_lp(&st.ls, &d.dls);
        let mut ad = max_step_lp(&st.lz, &d.dlz);
        for bi in 0..st.s.len() {
            ap = ap.min(max_step_psd(&st.s[bi], &d.ds[bi]));
            ad = ad.min(max_step_psd(&st.z[bi], &d.dz[bi]));
        }
        (ap, ad)
    }

    fn initial_state(&self) -> (State, f64) {
        let p = self.problem;
        let mut s = Vec::new();
        let mut z = Vec::new();
        let mut xi_all = 10.0f64;
        for block in &p.blocks {
            let n = block.size as f64;
            let mut norms = vec![0.0; p.num_vars];
            for (var, c) in &block.terms {
                let fnorm = match c {
                    Coefficient::Dense(f) => f.norm(),
                    Coefficient::Factored(e) => e
                        .iter()
                        .map(|&(a, b, v)| if a == b { v * v } else { 2.0 * v * v })
                        .sum::<f64>()
                        .sqrt(),
                };
                norms[*var] = f64::max(norms[*var], fnorm);
            }
            let xi = norms
                .iter()
                .zip(&p.objective)
                .filter(|(f, _)| **f > 0.0)
                .map(|(f, c)| n * (1.0 + c.abs()) / (1.0 + f))
                .fold(n.sqrt().max(10.0), f64::max);
            let eta = norms.iter().copied().fold(block.constant.norm().max(n.sqrt()).max(10.0), f64::max);
            xi_all = xi_all.max(xi);
            s.push(DMatrix::identity(block.size, block.size) * eta);
            z.push(DMatrix::identity(block.size, block.size) * xi);
        }
        let nl = p.linear.len();
        let lin_scale = p.linear.iter().map(|l| l.constant.abs()).fold(10.0, f64::max);
        let st = State { y: vec![0.0; p.num_vars], s, z, ls: vec![lin_scale; nl], lz: vec![10.0; nl] };
        (st, xi_all)
    }

    fn solve(&self) -> Result<SdpSolution> {
        let p = self.problem;
        let mut dump = match &self.options.debug_dump {
            Some(path) => Some(BufWriter::new(File::create(path)?)),
            None => None,
        };
        let (mut st, xi0) = self.initial_state();
        let c_norm = p.objective.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut best: Option<(f64, SdpSolution)> = None;
        let mut last_steps = (1.0, 1.0);
        let mut stall = 0;
        for iter in 0..=self.options.max_iters {
            // Residuals at the current iterate.
            let mut it = Vec::with_capacity(p.blocks.len());
            let mut pinf_sq = 0.0;
            for (bi, block) in p.blocks.iter().enumerate() {
                let s_inv = spd_inverse(&st.s[bi])
                    .ok_or_else(|| Error::NumericalFailure("slack matrix lost definiteness".into()))?;
                let p_res = &block.constant + block.linear_part(&st.y) - &st.s[bi];
                pinf_sq += p_res.norm_squared();
                it.push(BlockIter { s_inv, p_res });
            }
            let lin_res: Vec<f64> = p.linear.iter().zip(&st.ls).map(|(l, s)| l.value(&st.y) - s).collect();
            pinf_sq += lin_res.iter().map(|r| r * r).sum::<f64>();
            let adj = self.adjoint(&st);
            let dinf = adj.iter().zip(&p.objective).map(|(a, c)| (c - a).powi(2)).sum::<f64>().sqrt() / self.scale_dual;
            let pinf = pinf_sq.sqrt() / self.scale_primal;
            let pobj: f64 = p.objective.iter().zip(&st.y).map(|(c, y)| c * y).sum();
            let dobj = self.objective_dual(&st);
            let mu = self.mu(&st);
            let relgap = (mu * self.dim_total).abs() / (1.0 + pobj.abs() + dobj.abs());
            let solution = |status| SdpSolution {
                y: st.y.clone(),
                objective_value: pobj,
                dual_objective: dobj,
                status,
                iterations: iter,
                relative_gap: relgap,
                primal_infeasibility: pinf,
                dual_infeasibility: dinf,
                max_block_violation: 0.0,
            };
            if let Some(w) = dump.as_mut() {
                let line = DumpLine {
                    iter,
                    pobj,
                    dobj,
                    relgap,
                    pinf,
                    dinf,
                    mu,
                    step_primal: last_steps.0,
                    step_dual: last_steps.1,
                };
                serde_json::to_writer(&mut *w, &line)?;
                writeln!(w)?;
            }
            let err = relgap.max(pinf).max(dinf);
            if err <= self.options.tol {
                return self.finish(solution(SdpStatus::Optimal));
            }
            if best.as_ref().is_none_or(|(e, _)| err < *e) {
                best = Some((err, solution(SdpStatus::MaxIters)));
            }
            // Farkas certificate for primal infeasibility.
            let cert = dobj;
            if cert > 1e6 * xi0 {
                let r = adj.iter().map(|v| v * v).sum::<f64>().sqrt();
                if r <= 1e-8 * cert * (1.0 + c_norm) {
                    return self.finish(solution(SdpStatus::Infeasible));
                }
            }
            if iter == self.options.max_iters || stall >= 3 {
                break;
            }

            let bmat = self.schur(&st, &it);
            let chol = self.factor(bmat)?;
            let aff = self.direction(&st, &it, &lin_res, &chol, 0.0, None);
            let (ap, ad) = self.step_lengths(&st, &aff);
            let (ap, ad) = (ap.min(1.0), ad.min(1.0));
            let mut mu_aff = 0.0;
            for bi in 0..st.s.len() {
                let s1 = &st.s[bi] + &aff.ds[bi] * ap;
                let z1 = &st.z[bi] + &aff.dz[bi] * ad;
                mu_aff += s1.dot(&z1);
            }
            for li in 0..st.ls.len() {
                mu_aff += (st.ls[li] + ap * aff.dls[li]) * (st.lz[li] + ad * aff.dlz[li]);
            }
            mu_aff /= self.dim_total;
            let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
            let corr_blocks: Vec<DMatrix<f64>> = aff.dz.iter().zip(&aff.ds).map(|(dz, ds)| dz * ds).collect();
            let corr_lin: Vec<f64> = aff.dlz.iter().zip(&aff.dls).map(|(z, s)| z * s).collect();
            let dir = self.direction(&st, &it, &lin_res, &chol, sigma * mu, Some((&corr_blocks, &corr_lin)));
            let (ap, ad) = self.step_lengths(&st, &dir);
            let gamma = self.options.step_fraction;
            let (ap, new_s) = backtrack((gamma * ap).min(1.0), &st.s, &dir.ds);
            let (ad, new_z) = backtrack((gamma * ad).min(1.0), &st.z, &dir.dz);
            last_steps = (ap, ad);
            stall = if ap < 1e-8 && ad < 1e-8 { stall + 1 } else { 0 };

            for (y, d) in st.y.iter_mut().zip(&dir.dy) {
                *y += ap * d;
            }
            st.s = new_s;
            st.z = new_z;
            for li in 0..st.ls.len() {
                st.ls[li] += ap * dir.dls[li];
                st.lz[li] += ad * dir.dlz[li];
            }
        }
        let (err, mut sol) = best.expect("at least one iterate evaluated");
        if err <= self.options.acceptable_tol {
            sol.status = SdpStatus::Optimal;
        }
        self.finish(sol)
    }

    fn finish(&self, mut sol: SdpSolution) -> Result<SdpSolution> {
        let mut worst = 0.0f64;
        for b in &self.problem.blocks {
            let m = b.evaluate(&sol.y).into_matrix();
            let lmin = m.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
            worst = worst.min(lmin);
        }
        sol.max_block_violation = worst;
        Ok(sol)
    }
}

/// Solves `problem`; see the module documentation for the form.
pub fn solve_sdp(problem: &SdpProblem, options: &SdpOptions) -> Result<SdpSolution> {
    if problem.blocks.is_empty() && problem.linear.is_empty() {
        return Err(invalid("problem has no constraints"));
    }
    if problem.num_vars == 0 {
        return Err(invalid("problem has no variables"));
    }
    let dim_total = problem.blocks.iter().map(|b| b.size).sum::<usize>() + problem.linear.len();
    let f0_norm = problem.blocks.iter().map(|b| b.constant.norm_squared()).sum::<f64>()
        + problem.linear.iter().map(|l| l.constant * l.constant).sum::<f64>();
    let c_norm = problem.objective.iter().map(|v| v * v).sum::<f64>().sqrt();
    let solver = Solver {
        problem,
        low_rank: problem.blocks.iter().map(LowRank::new).collect(),
        options,
        dim_total: dim_total as f64,
        scale_primal: 1.0 + f0_norm.sqrt(),
        scale_dual: 1.0 + c_norm,
    };
    solver.solve()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, STREAM_AUX};
    use rand::Rng;

    fn scalar(v: f64) -> SymMatrix {
        SymMatrix::from_diagonal(&[v])
    }

    #[test]
    fn one_by_one_block() {
        let mut p = SdpProblem::new(1);
        p.set_objective(vec![1.0]).unwrap();
        let mut b = LmiBlock::new(scalar(-1.0));
        b.add_dense(0, &scalar(1.0)).unwrap();
        p.add_block(b).unwrap();
        let s = solve_sdp(&p, &SdpOptions::default()).unwrap();
        assert_eq!(s.status, SdpStatus::Optimal);
        assert!((s.y[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn two_by_two_block() {
        let mut p = SdpProblem::new(1);
        p.set_objective(vec![1.0]).unwrap();
        let f0 = SymMatrix::from_fn(2, |i, j| if i == j { 0.0 } else { 1.0 });
        let mut b = LmiBlock::new(f0);
        b.add_dense(0, &SymMatrix::identity(2)).unwrap();
        p.add_block(b).unwrap();
        let s = solve_sdp(&p, &SdpOptions::default()).unwrap();
        assert_eq!(s.status, SdpStatus::Optimal);
        assert!((s.y[0] - 1.0).abs() < 1e-6);
        assert!(s.max_block_violation >= -1e-6);
    }

    #[test]
    fn separable_diagonal_block() {
        let mut p = SdpProblem::new(2);
        p.set_objective(vec![1.0, 1.0]).unwrap();
        let mut b = LmiBlock::new(SymMatrix::from_diagonal(&[-1.0, -2.0]));
        b.add_dense(0, &SymMatrix::from_diagonal(&[1.0, 0.0])).unwrap();
        b.add_dense(1, &SymMatrix::from_diagonal(&[0.0, 1.0])).unwrap();
        p.add_block(b).unwrap();
        let s = solve_sdp(&p, &SdpOptions::default()).unwrap();
        assert_eq!(s.status, SdpStatus::Optimal);
        assert!((s.y[0] - 1.0).abs() < 1e-6 && (s.y[1] - 2.0).abs() < 1e-6);
        assert!((s.objective_value - 3.0).abs() < 1e-6);
    }

    #[test]
    fn factored_matches_dense() {
        // min t  s.t.  t I - (y0 A0 + y1 A1 + C) ⪰ 0,  y0 + y1 = 1 via two bounds, y ≥ 0
        let mut rng = stream_rng(5, STREAM_AUX);
        let n = 4;
        let c = SymMatrix::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let build = |factored: bool| {
            let mut p = SdpProblem::new(3);
            p.set_objective(vec![0.0, 0.0, 1.0]).unwrap();
            let mut b = LmiBlock::new(c.scaled(-1.0));
            b.add_dense(2, &SymMatrix::identity(n)).unwrap();
            let e0 = vec![(0, 0, -1.0), (0, 1, 1.0), (1, 1, -1.0)];
            let e1 = vec![(2, 2, -2.0), (2, 3, 0.5), (3, 3, -1.0)];
            if factored {
                b.add_factored(0, e0).unwrap();
                b.add_factored(1, e1).unwrap();
            } else {
                let dense = |e: &[(usize, usize, f64)]| {
                    SymMatrix::from_fn(n, |i, j| e.iter().find(|t| t.0 == i && t.1 == j).map_or(0.0, |t| t.2))
                };
                b.add_dense(0, &dense(&e0)).unwrap();
                b.add_dense(1, &dense(&e1)).unwrap();
            }
            p.add_block(b).unwrap();
            p.add_linear(LinearConstraint { constant: -1.0, coeffs: vec![(0, 1.0), (1, 1.0)] }).unwrap();
            p.add_linear(LinearConstraint { constant: 1.0, coeffs: vec![(0, -1.0), (1, -1.0)] }).unwrap();
            p.add_lower_bound(0, 0.0).unwrap();
            p.add_lower_bound(1, 0.0).unwrap();
            solve_sdp(&p, &SdpOptions::default()).unwrap()
        };
        let a = build(true);
        let b = build(false);
        assert_eq!(a.status, SdpStatus::Optimal);
        assert_eq!(b.status, SdpStatus::Optimal);
        assert!((a.objective_value - b.objective_value).abs() < 1e-6);
    }

    #[test]
    fn basis_is_respected() {
        // Block [[y, 0], [0, y]] - I written through the basis [1; 1]/√2 for a
        // rank-one term plus a dense identity term.
        let w = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let mut b = LmiBlock::new(SymMatrix::identity(2).scaled(-1.0)).with_basis(w).unwrap();
        b.add_dense(0, &SymMatrix::identity(2)).unwrap();
        b.add_factored(1, vec![(0, 0, 1.0)]).unwrap();
        let f = b.evaluate(&[2.0, 3.0]);
        assert_eq!(f.as_matrix(), &DMatrix::from_row_slice(2, 2, &[4.0, 3.0, 3.0, 4.0]));
        assert!(b.add_factored(1, vec![(0, 1, 1.0)]).is_err());
    }

    #[test]
    fn infeasible_detected() {
        let mut p = SdpProblem::new(1);
        p.set_objective(vec![1.0]).unwrap();
        let mut b1 = LmiBlock::new(scalar(-1.0));
        b1.add_dense(0, &scalar(1.0)).unwrap();
        let mut b2 = LmiBlock::new(scalar(0.0));
        b2.add_dense(0, &scalar(-1.0)).unwrap();
        p.add_block(b1).unwrap();
        p.add_block(b2).unwrap();
        let s = solve_sdp(&p, &SdpOptions::default()).unwrap();
        assert_eq!(s.status, SdpStatus::Infeasible);
    }

    #[test]
    fn iteration_cap_reports_max_iters() {
        let mut p = SdpProblem::new(1);
        p.set_objective(vec![1.0]).unwrap();
        let f0 = SymMatrix::from_fn(2, |i, j| if i == j { 0.0 } else { 1.0 });
        let mut b = LmiBlock::new(f0);
        b.add_dense(0, &SymMatrix::identity(2)).unwrap();
        p.add_block(b).unwrap();
        let opts = SdpOptions { max_iters: 2, acceptable_tol: 1e-12, ..Default::default() };
        assert_eq!(solve_sdp(&p, &opts).unwrap().status, SdpStatus::MaxIters);
    }

    #[test]
    fn debug_dump_writes_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("iters.jsonl");
        let mut p = SdpProblem::new(1);
        p.set_objective(vec![1.0]).unwrap();
        let mut b = LmiBlock::new(scalar(-1.0));
        b.add_dense(0, &scalar(1.0)).unwrap();
        p.add_block(b).unwrap();
        let opts = SdpOptions { debug_dump: Some(path.clone()), ..Default::default() };
        let s = solve_sdp(&p, &opts).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), s.iterations + 1);
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("relgap").is_some());
        }
    }

    #[test]
    fn rejects_bad_input() {
        let mut p = SdpProblem::new(1);
        let mut b = LmiBlock::new(scalar(-1.0));
        b.add_dense(3, &scalar(1.0)).unwrap();
        assert!(p.add_block(b).is_err());
        let mut b = LmiBlock::new(scalar(-1.0));
        assert!(b.add_dense(0, &SymMatrix::identity(2)).is_err());
        assert!(p.set_objective(vec![1.0, 2.0]).is_err());
        assert!(solve_sdp(&SdpProblem::new(1), &SdpOptions::default()).is_err());
    }
}
