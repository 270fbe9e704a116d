//! Laplacian weight design for DANA and DGD.
//!
//! Every quantity is measured through the reduced Hessian
//! `M = J Tᵀ L H L T Jᵀ`, whose spectrum is the nonzero spectrum of `L H L`.
//! A design is good when that spectrum clusters around 1.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::graph::{connected, two_hop_sparsity, WeightedGraph};
use crate::linalg::{build_reduction_transform, sym_eig, SymMatrix};
use crate::sdp::{solve_sdp, LmiBlock, SdpOptions, SdpProblem, SdpSolution, SdpStatus};

/// Edge weights below this fraction of the largest weight are set to zero.
pub const WEIGHT_CLAMP_REL: f64 = 1e-7;

/// `J Tᵀ L H L T Jᵀ`.
pub fn reduced_hessian(l: &SymMatrix, h: &SymMatrix) -> Result<SymMatrix> {
    let n = l.order();
    if h.order() != n {
        return Err(invalid(format!("Laplacian is {n}x{n} but Hessian is {0}x{0}", h.order())));
    }
    let t = build_reduction_transform(n)?;
    let lm = l.as_matrix();
    let lhl = SymMatrix::symmetrize(lm * h.as_matrix() * lm);
    Ok(t.compress(&lhl))
}

fn check_costs(g: &WeightedGraph, a: &[f64]) -> Result<()> {
    if a.len() != g.n() {
        return Err(invalid(format!("{} cost curvatures for {} nodes", a.len(), g.n())));
    }
    if a.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(invalid("cost curvatures must be positive"));
    }
    Ok(())
}

/// `max_i |1 - λ_i(M)|` over the `n - 1` reduced eigenvalues.
pub fn epsilon_metric(l: &SymMatrix, a: &[f64]) -> Result<f64> {
    let m = reduced_hessian(l, &SymMatrix::from_diagonal(a))?;
    let eig = sym_eig(&m)?;
    Ok(eig.values.iter().fold(0.0f64, |acc, v| acc.max((1.0 - v).abs())))
}

/// Rescales `l0` so the reduced spectrum is symmetric about 1. Returns the
/// scaled Laplacian and the factor `β`.
pub fn post_scale(l0: &SymMatrix, a: &[f64]) -> Result<(SymMatrix, f64)> {
    let m = reduced_hessian(l0, &SymMatrix::from_diagonal(a))?;
    let eig = sym_eig(&m)?;
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 0.0) {
        return Err(invalid(format!("reduced Hessian is singular (smallest eigenvalue {lo:e})")));
    }
    let beta = (2.0 / (lo + hi)).sqrt();
    Ok((l0.scaled(beta), beta))
}

/// Best achievable metric after post-scaling, `(κ - 1) / (κ + 1)` with `κ`
/// the condition number of `M`; 1 when `M` is singular.
fn scaled_metric(m: &SymMatrix) -> Result<f64> {
    let eig = sym_eig(m)?;
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 1e-12 * hi.max(1e-300)) {
        return Ok(1.0);
    }
    Ok((hi - lo) / (hi + lo))
}

fn laplacian(n: usize, edges: &[(usize, usize)], weights: &[f64]) -> SymMatrix {
    let mut l = DMatrix::zeros(n, n);
    for (&(i, j), &w) in edges.iter().zip(weights) {
        l[(i, j)] -= w;
        l[(j, i)] -= w;
        l[(i, i)] += w;
        l[(j, j)] += w;
    }
    SymMatrix::symmetrize(l)
}

/// `blockdiag(A, B)`.
fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut(a.shape(), b.shape()).copy_from(b);
    out
}

/// Variable layout of [`build_p4`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct P4Layout {
    pub edges: usize,
}

impl P4Layout {
    pub fn eps_minus(&self) -> usize {
        self.edges
    }
    pub fn eps_plus(&self) -> usize {
        self.edges + 1
    }
    /// Epigraph variable for `max(ε₋, ε₊)`.
    pub fn epigraph(&self) -> usize {
        self.edges + 2
    }
    pub fn num_vars(&self) -> usize {
        self.edges + 3
    }
}

/// Convex surrogate of the design problem. Variables: one weight per edge of
/// `g` (in `g.edges()` order), then `ε₋`, `ε₊` and an epigraph variable `s`;
/// the objective is `s` with `s ≥ ε₋`, `s ≥ ε₊`.
///
/// Block one, `[[(1 + ε₋) I, J Tᵀ L], [L T Jᵀ, H⁻¹]] ⪰ 0`, is the Schur form
/// of `M ⪯ (1 + ε₋) I`. Block two, `[[•, ε₊/√8 I], [ε₊/√8 I, I]] ⪰ 0` with
/// `• = ½ J Tᵀ (√H L + L √H) T Jᵀ - (1 - ε₊/2) I`, is a second-order
/// inner approximation of `M ⪰ (1 - ε₊) I`. `ε₊ ≤ 1` keeps the square root
/// behind that approximation real.
pub fn build_p4(g: &WeightedGraph, a: &[f64]) -> Result<(SdpProblem, P4Layout)> {
    check_costs(g, a)?;
    if !g.is_connected() {
        return Err(invalid("topology is disconnected"));
    }
    let n = g.n();
    let layout = P4Layout { edges: g.num_edges() };
    let t = build_reduction_transform(n)?;
    let jt = t.reduced_basis();
    let r = n - 1;
    let mut p = SdpProblem::new(layout.num_vars());
    p.set_objective_coeff(layout.epigraph(), 1.0)?;

    // M ⪯ (1 + ε₋) I
    let f0 = block_diag(&DMatrix::identity(r, r), &DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(n, a.iter().map(|v| 1.0 / v))));
    let mut upper = LmiBlock::new(SymMatrix::symmetrize(f0))
        .with_basis(block_diag(&jt, &DMatrix::identity(n, n)))?;
    upper.add_dense(
        layout.eps_minus(),
        &SymMatrix::from_fn(r + n, |i, j| if i == j && i < r { 1.0 } else { 0.0 }),
    )?;
    for (e, &(i, j)) in g.edges().iter().enumerate() {
        let mut entries = Vec::with_capacity(4);
        for (u, gu) in [(i, 1.0), (j, -1.0)] {
            for (v, gv) in [(i, 1.0), (j, -1.0)] {
                entries.push((u, n + v, gu * gv));
            }
        }
        upper.add_factored(e, entries)?;
    }
    p.add_block(upper)?;

    // ½ J Tᵀ (√H L + L √H) T Jᵀ ⪰ (1 - ε₊/2 + ε₊²/8) I
    let f0 = SymMatrix::from_fn(2 * r, |i, j| match (i == j, i < r) {
        (true, true) => -1.0,
        (true, false) => 1.0,
        _ => 0.0,
    });
    let mut basis = DMatrix::zeros(2 * r, n);
    basis.view_mut((0, 0), (r, n)).copy_from(&jt);
    let mut lower = LmiBlock::new(f0).with_basis(basis)?;
    let c = 1.0 / 8f64.sqrt();
    lower.add_dense(
        layout.eps_plus(),
        &SymMatrix::from_fn(2 * r, |i, j| {
            if i == j && i < r {
                0.5
            } else if j == i + r || i == j + r {
                c
            } else {
                0.0
            }
        }),
    )?;
    for (e, &(i, j)) in g.edges().iter().enumerate() {
        let (si, sj) = (a[i].sqrt(), a[j].sqrt());
        lower.add_factored(e, vec![(i, i, si), (j, j, sj), (i.min(j), i.max(j), -(si + sj) / 2.0)])?;
    }
    p.add_block(lower)?;

    for e in 0..layout.edges {
        p.add_lower_bound(e, 0.0)?;
    }
    p.add_lower_bound(layout.eps_minus(), 0.0)?;
    p.add_lower_bound(layout.eps_plus(), 0.0)?;
    p.add_upper_bound(layout.eps_plus(), 1.0)?;
    for v in [layout.eps_minus(), layout.eps_plus()] {
        p.add_linear(crate::sdp::LinearConstraint { constant: 0.0, coeffs: vec![(layout.epigraph(), 1.0), (v, -1.0)] })?;
    }
    Ok((p, layout))
}

/// Variable layout of [`build_p5`]: one entry per off-diagonal pair of the
/// two-hop mask, then `ε`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct P5Layout {
    pub n: usize,
    pub pairs: Vec<(usize, usize)>,
}

impl P5Layout {
    pub fn eps(&self) -> usize {
        self.pairs.len()
    }

    /// `A = Σ_k w_k (e_i - e_j)(e_i - e_j)ᵀ`, so `A_ij = -w_k` and `A 1 = 0`.
    pub fn assemble(&self, y: &[f64]) -> SymMatrix {
        laplacian(self.n, &self.pairs, &y[..self.pairs.len()])
    }
}

/// Lower-bound problem: any `A` with the two-hop sparsity of `L H L`,
/// `A 1 = 0`, `A ⪰ 0`, minimizing `ε` with `-ε I ⪯ I - J Tᵀ A T Jᵀ ⪯ ε I`.
pub fn build_p5(g: &WeightedGraph) -> Result<(SdpProblem, P5Layout)> {
    let n = g.n();
    let pairs = two_hop_sparsity(g).upper_pairs();
    let layout = P5Layout { n, pairs };
    let t = build_reduction_transform(n)?;
    let jt = t.reduced_basis();
    let r = n - 1;
    let mut p = SdpProblem::new(layout.pairs.len() + 1);
    p.set_objective_coeff(layout.eps(), 1.0)?;
    let eye = SymMatrix::identity(r);
    let ggt = |i: usize, j: usize, s: f64| vec![(i, i, s), (j, j, s), (i, j, -s)];

    let mut lo = LmiBlock::new(eye.scaled(-1.0)).with_basis(jt.clone())?;
    let mut hi = LmiBlock::new(eye.clone()).with_basis(jt.clone())?;
    let mut psd = LmiBlock::new(SymMatrix::zeros(r)).with_basis(jt)?;
    lo.add_dense(layout.eps(), &eye)?;
    hi.add_dense(layout.eps(), &eye)?;
    for (k, &(i, j)) in layout.pairs.iter().enumerate() {
        lo.add_factored(k, ggt(i, j, 1.0))?;
        hi.add_factored(k, ggt(i, j, -1.0))?;
        psd.add_factored(k, ggt(i, j, 1.0))?;
    }
    p.add_block(lo)?;
    p.add_block(hi)?;
    p.add_block(psd)?;
    p.add_lower_bound(layout.eps(), 0.0)?;
    Ok((p, layout))
}

/// Zeroes weights below [`WEIGHT_CLAMP_REL`] of the largest and checks the
/// surviving edges still connect every node.
fn clamp_weights(g: &WeightedGraph, raw: &[f64]) -> Result<Vec<f64>> {
    let top = raw.iter().copied().fold(0.0f64, f64::max);
    if !(top > 0.0) {
        return Err(Error::DesignDegenerate("all edge weights vanished".into()));
    }
    let w: Vec<f64> = raw.iter().map(|&v| if v < WEIGHT_CLAMP_REL * top { 0.0 } else { v }).collect();
    let kept: Vec<(usize, usize)> = g.edges().iter().zip(&w).filter(|(_, &v)| v > 0.0).map(|(e, _)| *e).collect();
    if !connected(g.n(), &kept) {
        return Err(Error::DesignDegenerate("designed weights disconnect the graph".into()));
    }
    Ok(w)
}

fn require_solved(sol: &SdpSolution, what: &str) -> Result<()> {
    match sol.status {
        SdpStatus::Optimal => Ok(()),
        s => Err(Error::NumericalFailure(format!("{what} solve ended with status {s:?}"))),
    }
}

/// Designed first-order weighting.
#[derive(Clone, Debug)]
pub struct DgdDesign {
    pub weights: Vec<f64>,
    pub laplacian: SymMatrix,
    /// `max |1 - λ_i(J Tᵀ √H L √H T Jᵀ)|` at the optimum.
    pub eps: f64,
}

/// Weights minimizing `max |1 - λ_i(J Tᵀ √H L √H T Jᵀ)|` over nonnegative
/// edge weights; linear in `L`, hence a plain SDP.
pub fn dgd_weight_design(g: &WeightedGraph, a: &[f64]) -> Result<DgdDesign> {
    check_costs(g, a)?;
    let n = g.n();
    let m = g.num_edges();
    let t = build_reduction_transform(n)?;
    let jt = t.reduced_basis();
    let r = n - 1;
    let eps = m;
    let mut p = SdpProblem::new(m + 1);
    p.set_objective_coeff(eps, 1.0)?;
    let eye = SymMatrix::identity(r);
    let mut lo = LmiBlock::new(eye.scaled(-1.0)).with_basis(jt.clone())?;
    let mut hi = LmiBlock::new(eye.clone()).with_basis(jt)?;
    lo.add_dense(eps, &eye)?;
    hi.add_dense(eps, &eye)?;
    for (e, &(i, j)) in g.edges().iter().enumerate() {
        let entries = |s: f64| vec![(i, i, s * a[i]), (j, j, s * a[j]), (i, j, -s * (a[i] * a[j]).sqrt())];
        lo.add_factored(e, entries(1.0))?;
        hi.add_factored(e, entries(-1.0))?;
        p.add_lower_bound(e, 0.0)?;
    }
    p.add_block(lo)?;
    p.add_block(hi)?;
    p.add_lower_bound(eps, 0.0)?;
    let sol = solve_sdp(&p, &SdpOptions::default())?;
    require_solved(&sol, "first-order design")?;
    let weights = clamp_weights(g, &sol.y[..m])?;
    let lap = laplacian(n, g.edges(), &weights);
    Ok(DgdDesign { weights, laplacian: lap, eps: sol.y[eps] })
}

/// Solver-side diagnostics of one pipeline run.
#[derive(Clone, Debug, Serialize)]
pub struct DesignDiagnostics {
    pub eps_minus: f64,
    pub eps_plus: f64,
    /// `1 - λ_min(M₀)` before post-scaling, to compare against `ε₊`.
    pub realized_eps_plus: f64,
    pub p4_iterations: usize,
    pub p5_iterations: usize,
    pub p4_violation: f64,
    pub p5_violation: f64,
    /// `(1 - λ₁(M*)) + (1 - λ_{n-1}(M*))` after post-scaling.
    pub centering_residual: f64,
    pub clamped_edges: usize,
}

/// Output of [`design_pipeline`]. Serializes to
/// `{"weights", "beta", "eps_L_star", "eps_A", "gap"}`.
#[derive(Clone, Debug, Serialize)]
pub struct DesignResult {
    /// Post-scaled edge weights in `g.edges()` order; zero marks an unused edge.
    pub weights: Vec<f64>,
    pub beta: f64,
    #[serde(rename = "eps_L_star")]
    pub eps_l_star: f64,
    #[serde(rename = "eps_A")]
    pub eps_a: f64,
    pub gap: f64,
    #[serde(skip)]
    pub l_star: SymMatrix,
    #[serde(skip)]
    pub diagnostics: DesignDiagnostics,
}

impl DesignResult {
    /// Graph carrying only the edges with positive designed weight.
    pub fn graph(&self, g: &WeightedGraph) -> Result<WeightedGraph> {
        let (edges, weights): (Vec<_>, Vec<_>) =
            g.edges().iter().zip(&self.weights).filter(|(_, &w)| w > 0.0).map(|(e, w)| (*e, *w)).unzip();
        WeightedGraph::new(g.n(), edges, weights)
    }
}

/// Post-scaled solution of the surrogate problem, without the lower bound.
#[derive(Clone, Debug)]
pub struct SurrogateDesign {
    /// Post-scaled edge weights in `g.edges()` order.
    pub weights: Vec<f64>,
    pub l_star: SymMatrix,
    pub beta: f64,
    pub eps_l_star: f64,
    pub eps_minus: f64,
    pub eps_plus: f64,
    pub realized_eps_plus: f64,
    pub iterations: usize,
    pub violation: f64,
    pub centering_residual: f64,
    pub clamped_edges: usize,
}

/// Solves the surrogate problem, clamps unused edges and post-scales.
pub fn design_surrogate(g: &WeightedGraph, a: &[f64]) -> Result<SurrogateDesign> {
    let (p4, layout) = build_p4(g, a)?;
    let s4 = solve_sdp(&p4, &SdpOptions::default())?;
    require_solved(&s4, "surrogate design")?;
    let x = clamp_weights(g, &s4.y[..layout.edges])?;
    let l0 = laplacian(g.n(), g.edges(), &x);
    let h = SymMatrix::from_diagonal(a);
    let m0 = sym_eig(&reduced_hessian(&l0, &h)?)?;
    let (l_star, beta) = post_scale(&l0, a).map_err(|e| match e {
        Error::InvalidInput(msg) => Error::DesignDegenerate(msg),
        other => other,
    })?;
    let m_star = sym_eig(&reduced_hessian(&l_star, &h)?)?;
    Ok(SurrogateDesign {
        weights: x.iter().map(|w| w * beta).collect(),
        l_star,
        beta,
        eps_l_star: m_star.values.iter().fold(0.0f64, |acc, v| acc.max((1.0 - v).abs())),
        eps_minus: s4.y[layout.eps_minus()],
        eps_plus: s4.y[layout.eps_plus()],
        realized_eps_plus: 1.0 - m0.min(),
        iterations: s4.iterations,
        violation: s4.max_block_violation,
        centering_residual: (1.0 - m_star.min()) + (1.0 - m_star.max()),
        clamped_edges: x.iter().filter(|&&w| w == 0.0).count(),
    })
}

/// Optimum of the lower-bound problem.
pub fn lower_bound(g: &WeightedGraph) -> Result<SdpSolution> {
    let (p5, _) = build_p5(g)?;
    let s5 = solve_sdp(&p5, &SdpOptions::default())?;
    require_solved(&s5, "lower bound")?;
    Ok(s5)
}

/// Surrogate solve, post-scaling, metric and lower bound in one pass.
pub fn design_pipeline(g: &WeightedGraph, a: &[f64]) -> Result<DesignResult> {
    let d = design_surrogate(g, a)?;
    let s5 = lower_bound(g)?;
    let eps_a = s5.objective_value;
    let diagnostics = DesignDiagnostics {
        eps_minus: d.eps_minus,
        eps_plus: d.eps_plus,
        realized_eps_plus: d.realized_eps_plus,
        p4_iterations: d.iterations,
        p5_iterations: s5.iterations,
        p4_violation: d.violation,
        p5_violation: s5.max_block_violation,
        centering_residual: d.centering_residual,
        clamped_edges: d.clamped_edges,
    };
    Ok(DesignResult {
        weights: d.weights,
        beta: d.beta,
        eps_l_star: d.eps_l_star,
        eps_a,
        gap: d.eps_l_star - eps_a,
        l_star: d.l_star,
        diagnostics,
    })
}

/// Best point found by [`p3_grid_search`].
#[derive(Clone, Debug, PartialEq)]
pub struct P3Estimate {
    /// Signed edge weights (up to scale) of the best Laplacian found.
    pub weights: Vec<f64>,
    /// Its post-scaled metric.
    pub eps: f64,
}

/// Brute-force search of the exact bilinear design problem on very small
/// graphs: every weight vector on a `levels`-point grid of `[-1, 1]^m` with
/// `L ⪰ 0`, scored by its optimally scaled metric, followed by compass
/// search from the best few grid points.
pub fn p3_grid_search(g: &WeightedGraph, a: &[f64], levels: usize) -> Result<P3Estimate> {
    check_costs(g, a)?;
    let m = g.num_edges();
    if g.n() > 4 {
        return Err(invalid("grid verifier is limited to graphs with at most 4 nodes"));
    }
    if levels < 2 {
        return Err(invalid("grid needs at least 2 levels"));
    }
    let n = g.n();
    let h = SymMatrix::from_diagonal(a);
    let t = build_reduction_transform(n)?;
    let score = |w: &[f64]| -> Result<f64> {
        let l = laplacian(n, g.edges(), w);
        let lr = sym_eig(&t.compress(&l))?;
        if lr.min() < -1e-12 * lr.max().abs().max(1e-300) {
            return Ok(1.0);
        }
        scaled_metric(&reduced_hessian(&l, &h)?)
    };
    let grid: Vec<f64> = (0..levels).map(|k| -1.0 + 2.0 * k as f64 / (levels - 1) as f64).collect();
    let total = levels.pow(m as u32);
    let mut scored: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut w = vec![0.0; m];
    for idx in 0..total {
        let mut rest = idx;
        for slot in w.iter_mut() {
            *slot = grid[rest % levels];
            rest /= levels;
        }
        let s = score(&w)?;
        if s < 1.0 {
            scored.push((s, w.clone()));
        }
    }
    scored.sort_by(|x, y| x.0.total_cmp(&y.0));
    scored.truncate(8);
    let mut best = P3Estimate { weights: vec![1.0; m], eps: score(&vec![1.0; m])? };
    for (s0, w0) in scored {
        let mut cur = w0;
        let mut cur_s = s0;
        let mut step = 1.0 / (levels - 1) as f64;
        while step > 1e-9 {
            let mut improved = false;
            for e in 0..m {
                for dir in [1.0, -1.0] {
                    let mut cand = cur.clone();
                    cand[e] += dir * step;
                    let s = score(&cand)?;
                    if s < cur_s {
                        cur = cand;
                        cur_s = s;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        if cur_s < best.eps {
            best = P3Estimate { weights: cur, eps: cur_s };
        }
    }
    Ok(best)
}
