//! Separable quadratic resource allocation under a single balance
//! constraint:
//!
//! ```text
//!   minimize   Σ_i ½ a_i x_i² + b_i x_i
//!   subject to Σ_i x_i = d
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::SymMatrix;
use crate::rng::{stream_rng, STREAM_INITIAL, STREAM_PROBLEM};

/// Quadratic coefficients `a` (strictly positive), linear coefficients `b`
/// and total demand `d`. JSON form: `{"a": [...], "b": [...], "d": 50.0}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProblem", into = "RawProblem")]
pub struct DispatchProblem {
    a: Vec<f64>,
    b: Vec<f64>,
    d: f64,
}

#[derive(Serialize, Deserialize)]
struct RawProblem {
    a: Vec<f64>,
    b: Vec<f64>,
    d: f64,
}

impl TryFrom<RawProblem> for DispatchProblem {
    type Error = crate::Error;

    fn try_from(raw: RawProblem) -> Result<Self> {
        DispatchProblem::new(raw.a, raw.b, raw.d)
    }
}

impl From<DispatchProblem> for RawProblem {
    fn from(p: DispatchProblem) -> Self {
        RawProblem { a: p.a, b: p.b, d: p.d }
    }
}

impl DispatchProblem {
    pub fn new(a: Vec<f64>, b: Vec<f64>, d: f64) -> Result<Self> {
        if a.is_empty() {
            return Err(invalid("problem needs at least one agent"));
        }
        if a.len() != b.len() {
            return Err(invalid(format!("{} quadratic but {} linear coefficients", a.len(), b.len())));
        }
        if let Some(bad) = a.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
            return Err(invalid(format!("quadratic coefficients must be positive, found {bad}")));
        }
        if b.iter().any(|v| !v.is_finite()) || !d.is_finite() {
            return Err(invalid("non-finite coefficient or demand"));
        }
        Ok(Self { a, b, d })
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn demand(&self) -> f64 {
        self.d
    }

    /// `δ = min a_i`.
    pub fn delta(&self) -> f64 {
        self.a.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `γ = max a_i`.
    pub fn gamma(&self) -> f64 {
        self.a.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `H = diag(a)`.
    pub fn hessian(&self) -> SymMatrix {
        SymMatrix::from_diagonal(&self.a)
    }

    /// `H x + b`.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.a).zip(&self.b).map(|((x, a), b)| a * x + b).collect()
    }

    /// Same coefficients with a different demand.
    pub fn with_demand(&self, d: f64) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), d)
    }
}

/// Draws `a_i ~ U[a_range]`, `b_i ~ U[b_range]` i.i.d.
pub fn random_problem(n: usize, a_range: (f64, f64), b_range: (f64, f64), d: f64, seed: u64) -> Result<DispatchProblem> {
    if a_range.0 <= 0.0 || a_range.1 < a_range.0 {
        return Err(invalid(format!(
            "quadratic coefficient range must satisfy 0 < lo <= hi, got [{}, {}]",
            a_range.0, a_range.1
        )));
    }
    if b_range.1 < b_range.0 {
        return Err(invalid("linear coefficient range has lo > hi"));
    }
    let mut rng = stream_rng(seed, STREAM_PROBLEM);
    let a = (0..n).map(|_| uniform(&mut rng, a_range)).collect();
    let b = (0..n).map(|_| uniform(&mut rng, b_range)).collect();
    DispatchProblem::new(a, b, d)
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// How [`feasible_initial`] spreads the demand.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// `d / n` everywhere.
    #[default]
    Uniform,
    /// All demand on agent 0.
    Concentrated,
    /// Uniform draws on `[0, 2d/n]`, shifted back onto the constraint.
    Random { seed: u64 },
}

/// A starting point with `Σ x_i = d`; the last component absorbs rounding.
pub fn feasible_initial(p: &DispatchProblem, mode: InitMode) -> Vec<f64> {
    let n = p.n();
    let d = p.demand();
    let mut x = match mode {
        InitMode::Uniform => vec![d / n as f64; n],
        InitMode::Concentrated => {
            let mut x = vec![0.0; n];
            x[0] = d;
            x
        }
        InitMode::Random { seed } => {
            let mut rng = stream_rng(seed, STREAM_INITIAL);
            let span = 2.0 * d.abs().max(1.0) / n as f64;
            let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..span)).collect();
            let shift = (d - x.iter().sum::<f64>()) / n as f64;
            x.iter_mut().for_each(|v| *v += shift);
            x
        }
    };
    if n > 1 {
        let head: f64 = x[..n - 1].iter().sum();
        x[n - 1] = d - head;
    }
    x
}

/// Optimal allocation `x*`, multiplier `λ*` and cost `f*`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub x_star: Vec<f64>,
    pub lambda_star: f64,
    pub f_star: f64,
}

/// Closed-form solution of
/// `[[H, 1], [1ᵀ, 0]] (x, λ) = (-b, d)`:
/// `λ* = -(d + Σ b_i/a_i) / Σ 1/a_i`, `x*_i = -(b_i + λ*) / a_i`.
pub fn kkt_solve(p: &DispatchProblem) -> Solution {
    let inv_sum: f64 = p.a.iter().map(|a| 1.0 / a).sum();
    let ba_sum: f64 = p.a.iter().zip(&p.b).map(|(a, b)| b / a).sum();
    let lambda_star = -(p.d + ba_sum) / inv_sum;
    let x_star: Vec<f64> = p.a.iter().zip(&p.b).map(|(a, b)| -(b + lambda_star) / a).collect();
    let f_star = cost(p, &x_star);
    Solution { x_star, lambda_star, f_star }
}

/// `f(x) = ½ xᵀ H x + bᵀ x`.
pub fn cost(p: &DispatchProblem, x: &[f64]) -> f64 {
    assert_eq!(x.len(), p.n(), "allocation length does not match problem size");
    x.iter()
        .zip(&p.a)
        .zip(&p.b)
        .map(|((x, a), b)| 0.5 * a * x * x + b * x)
        .sum()
}
