//! DANA and DGD iterations for [`DispatchProblem`], with per-iteration traces.
//!
//! Two executions of DANA are provided: a dense reference working on the full
//! Laplacian, and a synchronous per-agent simulation where every scalar an
//! agent uses arrives through an explicit mailbox from a one-hop neighbor.
//!
//! Message counting: one scalar delivered to one agent is one message. Per
//! outer iteration, DANA spends `2|E|` on the `x` exchange, `4|E|` per inner
//! term (the two-hop `y` exchange is realized as two relayed one-hop rounds)
//! and `2|E|` on the `z` exchange, so `(4 + 4q)|E|` in total. DGD spends `2|E|`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dispatch::{cost, kkt_solve, DispatchProblem};
use crate::error::{invalid, Error, Result};
use crate::graph::{laplacian_from_weights, WeightedGraph};
use crate::linalg::{pseudo_inverse, SymMatrix};

/// Relative cutoff used when pseudo-inverting a Laplacian.
const PINV_TOL: f64 = 1e-10;
/// Divergence guard: abort once the gap exceeds this multiple of the initial gap.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Algorithm {
    Dana { q: usize },
    Dgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub algorithm: Algorithm,
    pub alpha: f64,
    pub max_outer: usize,
    /// Stop once `|f(x^k) - f*|` is at or below this value.
    pub tol: Option<f64>,
}

impl SolverConfig {
    pub fn dana(q: usize, max_outer: usize) -> Self {
        Self { algorithm: Algorithm::Dana { q }, alpha: 1.0, max_outer, tol: None }
    }

    pub fn dgd(max_outer: usize) -> Self {
        Self { algorithm: Algorithm::Dgd, alpha: 1.0, max_outer, tol: None }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = Some(tol);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(invalid(format!("step size must be positive, got {}", self.alpha)));
        }
        if self.max_outer == 0 {
            return Err(invalid("max_outer must be at least 1"));
        }
        if let Some(t) = self.tol {
            if !(t > 0.0) {
                return Err(invalid(format!("tolerance must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// One row of a trace, taken before the `k`-th update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: usize,
    pub f_gap: f64,
    pub x_err: f64,
    pub feas_residual: f64,
    pub lyapunov: f64,
    /// Cumulative scalar deliveries up to this iterate.
    pub messages: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Converged,
    MaxIterations,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    pub x_final: Vec<f64>,
    pub outcome: Outcome,
}

impl RunTrace {
    /// First `k` with `|f(x^k) - f*| <= gap`.
    pub fn iterations_to(&self, gap: f64) -> Option<usize> {
        self.records.iter().find(|r| r.f_gap.abs() <= gap).map(|r| r.k)
    }

    pub fn last(&self) -> &TraceRecord {
        self.records.last().expect("trace always holds the initial iterate")
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "k,f_gap,x_err,feas_residual,lyapunov,messages")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                r.k, r.f_gap, r.x_err, r.feas_residual, r.lyapunov, r.messages
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }
}

/// Measures iterates against the KKT solution.
struct Observer<'a> {
    p: &'a DispatchProblem,
    x_star: Vec<f64>,
    f_star: f64,
    l_pinv: SymMatrix,
}

impl<'a> Observer<'a> {
    fn new(p: &'a DispatchProblem, l: &SymMatrix) -> Result<Self> {
        let s = kkt_solve(p);
        Ok(Self { p, x_star: s.x_star, f_star: s.f_star, l_pinv: pseudo_inverse(l, PINV_TOL)? })
    }

    fn record(&self, k: usize, x: &[f64], messages: u64) -> TraceRecord {
        let diff: Vec<f64> = x.iter().zip(&self.x_star).map(|(a, b)| a - b).collect();
        let u = self.l_pinv.mul_vec(&diff);
        TraceRecord {
            k,
            f_gap: cost(self.p, x) - self.f_star,
            x_err: diff.iter().map(|v| v * v).sum::<f64>().sqrt(),
            feas_residual: x.iter().sum::<f64>() - self.p.demand(),
            lyapunov: u.iter().map(|v| v * v).sum(),
            messages,
        }
    }
}

/// Runs `step` until the tolerance, the iteration cap or the divergence guard.
fn drive(
    obs: &Observer,
    config: &SolverConfig,
    x0: Vec<f64>,
    messages_per_step: u64,
    mut step: impl FnMut(&[f64]) -> Vec<f64>,
) -> Result<RunTrace> {
    let mut x = x0;
    let first = obs.record(0, &x, 0);
    let floor = f64::EPSILON * obs.f_star.abs().max(1.0);
    let limit = DIVERGENCE_FACTOR * first.f_gap.abs().max(floor);
    let mut records = vec![first];
    let mut outcome = Outcome::MaxIterations;
    let done = |r: &TraceRecord| config.tol.is_some_and(|t| r.f_gap.abs() <= t);
    if done(&first) {
        outcome = Outcome::Converged;
    } else {
        for k in 1..=config.max_outer {
            x = step(&x);
            let r = obs.record(k, &x, k as u64 * messages_per_step);
            records.push(r);
            if !r.f_gap.is_finite() || r.f_gap.abs() > limit {
                outcome = Outcome::Diverged;
                break;
            }
            if done(&r) {
                outcome = Outcome::Converged;
                break;
            }
        }
    }
    let trace = RunTrace { records, x_final: x, outcome };
    if outcome == Outcome::Diverged {
        return Err(Error::DivergenceDetected(Box::new(trace)));
    }
    Ok(trace)
}

fn check_dims(x: &[f64], l: &SymMatrix, p: &DispatchProblem) -> Result<()> {
    if x.len() != p.n() || l.order() != p.n() {
        return Err(invalid(format!(
            "dimension mismatch: x has {}, L is {}x{}, problem has {} agents",
            x.len(),
            l.order(),
            l.order(),
            p.n()
        )));
    }
    Ok(())
}

/// Number of nonzero off-diagonal pairs of `l`.
fn edge_count(l: &SymMatrix) -> u64 {
    let n = l.order();
    let m = l.as_matrix();
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| m[(i, j)] != 0.0).count() as u64
}

pub fn dana_messages_per_iteration(edges: u64, q: usize) -> u64 {
    (4 + 4 * q as u64) * edges
}

pub fn dgd_messages_per_iteration(edges: u64) -> u64 {
    2 * edges
}

fn dense_step(x: &[f64], lmat: &DMatrix<f64>, p: &DispatchProblem, q: usize, alpha: f64) -> Vec<f64> {
    let h = DVector::from_column_slice(p.a());
    let g = DVector::from_iterator(x.len(), x.iter().zip(p.a()).zip(p.b()).map(|((x, a), b)| a * x + b));
    let mut y = lmat * g;
    let mut acc = y.clone();
    for _ in 0..q {
        let s = lmat * &y;
        y -= lmat * s.component_mul(&h);
        acc += &y;
    }
    let step = lmat * acc;
    x.iter().zip(step.iter()).map(|(x, s)| x - alpha * s).collect()
}

/// One DANA update `x + α L z̃` with the order-`q` truncated series,
/// evaluated by repeated application of `I - L H L`.
pub fn dana_step_dense(x: &[f64], l: &SymMatrix, p: &DispatchProblem, q: usize, alpha: f64) -> Result<Vec<f64>> {
    check_dims(x, l, p)?;
    Ok(dense_step(x, l.as_matrix(), p, q, alpha))
}

/// Outer DANA loop on the dense Laplacian.
pub fn dana_run_dense(p: &DispatchProblem, l: &SymMatrix, config: &SolverConfig, x0: &[f64]) -> Result<RunTrace> {
    config.validate()?;
    check_dims(x0, l, p)?;
    let Algorithm::Dana { q } = config.algorithm else {
        return Err(invalid("dana_run_dense needs a DANA configuration"));
    };
    let obs = Observer::new(p, l)?;
    let per_step = dana_messages_per_iteration(edge_count(l), q);
    let lmat = l.as_matrix();
    drive(&obs, config, x0.to_vec(), per_step, |x| dense_step(x, lmat, p, q, config.alpha))
}

/// Distributed gradient descent `x⁺ = x - α L (H x + b)`.
pub fn dgd_run(p: &DispatchProblem, l: &SymMatrix, alpha: f64, max_outer: usize, tol: Option<f64>, x0: &[f64]) -> Result<RunTrace> {
    let config = SolverConfig { algorithm: Algorithm::Dgd, alpha, max_outer, tol };
    config.validate()?;
    check_dims(x0, l, p)?;
    let obs = Observer::new(p, l)?;
    let per_step = dgd_messages_per_iteration(edge_count(l));
    let lmat = l.as_matrix();
    drive(&obs, &config, x0.to_vec(), per_step, |x| {
        let g = DVector::from_vec(p.gradient(x));
        let s = lmat * g;
        x.iter().zip(s.iter()).map(|(x, s)| x - alpha * s).collect()
    })
}

/// Dispatches on `config.algorithm` using the dense executions.
pub fn run(p: &DispatchProblem, l: &SymMatrix, config: &SolverConfig, x0: &[f64]) -> Result<RunTrace> {
    match config.algorithm {
        Algorithm::Dana { .. } => dana_run_dense(p, l, config, x0),
        Algorithm::Dgd => dgd_run(p, l, config.alpha, config.max_outer, config.tol, x0),
    }
}

/// `(x - x*)ᵀ L† L† (x - x*)`.
pub fn lyapunov_value(x: &[f64], x_star: &[f64], l: &SymMatrix) -> Result<f64> {
    if x.len() != x_star.len() || l.order() != x.len() {
        return Err(invalid("dimension mismatch in lyapunov_value"));
    }
    let pinv = pseudo_inverse(l, PINV_TOL)?;
    let diff: Vec<f64> = x.iter().zip(x_star).map(|(a, b)| a - b).collect();
    Ok(pinv.mul_vec(&diff).iter().map(|v| v * v).sum())
}

/// Runs `k_a` steps at order `q_a` and `k_b` steps at order `q_b` with unit
/// step size and compares the final iterates.
pub fn loop_conversion_check(
    p: &DispatchProblem,
    l: &SymMatrix,
    x0: &[f64],
    (k_a, q_a): (usize, usize),
    (k_b, q_b): (usize, usize),
) -> Result<bool> {
    if k_a * (q_a + 1) != k_b * (q_b + 1) {
        return Err(invalid(format!(
            "loop products differ: {}*({}+1) != {}*({}+1)",
            k_a, q_a, k_b, q_b
        )));
    }
    check_dims(x0, l, p)?;
    let iterate = |k: usize, q: usize| {
        let mut x = x0.to_vec();
        for _ in 0..k {
            x = dana_step_dense(&x, l, p, q, 1.0)?;
        }
        Ok::<_, Error>(x)
    };
    let xa = iterate(k_a, q_a)?;
    let xb = iterate(k_b, q_b)?;
    let scale = kkt_solve(p).x_star.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let diff = xa.iter().zip(&xb).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(diff <= 1e-8 * scale)
}

// ---------------------------------------------------------------------------
// Message-passing simulation

/// Local memory of one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentState {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    /// Relay value `(L y)_i` used to realize the two-hop exchange.
    pub s: f64,
    /// Nonzero entries of row `i` of `L`, including the diagonal.
    pub l_row: Vec<(usize, f64)>,
    /// `(a_j, b_j)` for every `j` in `l_row`, in the same order.
    pub local_costs: Vec<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AcquireX,
    AcquireY,
    AcquireRelay,
    AcquireZ,
}

/// One scalar handed from `from` to `to`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub k: usize,
    pub phase: Phase,
    pub from: usize,
    pub to: usize,
}

#[derive(Clone, Debug, Default)]
pub struct MessagePassingOptions {
    /// Order in which agents run their compute step inside each phase;
    /// identity when `None`.
    pub agent_order: Option<Vec<usize>>,
    /// Keep every delivery for topology checks.
    pub record_deliveries: bool,
}

struct Network {
    agents: Vec<AgentState>,
    order: Vec<usize>,
    log: Option<Vec<Delivery>>,
    delivered: u64,
}

impl Network {
    /// Every agent sends `value(sender)` to each neighbor; returns the
    /// inbox of every agent as `(sender, value)` pairs.
    fn exchange(&mut self, k: usize, phase: Phase, value: impl Fn(&AgentState) -> f64) -> Vec<Vec<(usize, f64)>> {
        let n = self.agents.len();
        let mut inbox = vec![Vec::new(); n];
        for sender in &self.agents {
            let v = value(sender);
            for &(j, _) in &sender.l_row {
                if j == sender.id {
                    continue;
                }
                inbox[j].push((sender.id, v));
                self.delivered += 1;
                if let Some(log) = self.log.as_mut() {
                    log.push(Delivery { k, phase, from: sender.id, to: j });
                }
            }
        }
        inbox
    }

    /// `Σ_j L_ij v_j` from own value and the inbox.
    fn row_dot(agent: &AgentState, own: f64, inbox: &[(usize, f64)], weight: impl Fn(usize) -> f64) -> f64 {
        agent
            .l_row
            .iter()
            .enumerate()
            .map(|(slot, &(j, lij))| {
                let v = if j == agent.id {
                    own
                } else {
                    inbox.iter().find(|(from, _)| *from == j).map(|&(_, v)| v).expect("neighbor value delivered")
                };
                lij * weight(slot) * v
            })
            .sum()
    }

    fn outer_step(&mut self, k: usize, q: usize, alpha: f64) {
        // x exchange; y_i = L_i b + (L H)_i x
        let inbox = self.exchange(k, Phase::AcquireX, |a| a.x);
        for &i in &self.order {
            let a = &mut self.agents[i];
            let own = a.x;
            let y = a
                .l_row
                .iter()
                .zip(&a.local_costs)
                .map(|(&(j, lij), &(aj, bj))| {
                    let xj = if j == a.id { own } else { inbox[i].iter().find(|(f, _)| *f == j).expect("neighbor x").1 };
                    lij * (aj * xj + bj)
                })
                .sum();
            a.y = y;
            a.z = -y;
        }
        for _ in 0..q {
            // two-hop y exchange, relayed: s = L y, then w = y - L H s
            let inbox = self.exchange(k, Phase::AcquireY, |a| a.y);
            for &i in &self.order {
                let a = &self.agents[i];
                let s = Self::row_dot(a, a.y, &inbox[i], |_| 1.0);
                self.agents[i].s = s;
            }
            let inbox = self.exchange(k, Phase::AcquireRelay, |a| a.s);
            for &i in &self.order {
                let a = &self.agents[i];
                let lhs = Self::row_dot(a, a.s, &inbox[i], |slot| a.local_costs[slot].0);
                self.agents[i].w = a.y - lhs;
            }
            for &i in &self.order {
                let a = &mut self.agents[i];
                a.y = a.w;
                a.z -= a.y;
            }
        }
        let inbox = self.exchange(k, Phase::AcquireZ, |a| a.z);
        for &i in &self.order {
            let a = &self.agents[i];
            let lz = Self::row_dot(a, a.z, &inbox[i], |_| 1.0);
            self.agents[i].x = a.x + alpha * lz;
        }
    }

    fn x(&self) -> Vec<f64> {
        self.agents.iter().map(|a| a.x).collect()
    }
}

/// Per-agent DANA on the weighted graph `g` (its Laplacian is the `L` of
/// the dense execution).
pub fn dana_run_message_passing(p: &DispatchProblem, g: &WeightedGraph, config: &SolverConfig, x0: &[f64]) -> Result<RunTrace> {
    dana_run_message_passing_with(p, g, config, x0, &MessagePassingOptions::default()).map(|(t, _)| t)
}

/// As [`dana_run_message_passing`], also returning the delivery log when
/// requested. On divergence the error carries the trace and the log is lost.
pub fn dana_run_message_passing_with(
    p: &DispatchProblem,
    g: &WeightedGraph,
    config: &SolverConfig,
    x0: &[f64],
    options: &MessagePassingOptions,
) -> Result<(RunTrace, Vec<Delivery>)> {
    config.validate()?;
    let Algorithm::Dana { q } = config.algorithm else {
        return Err(invalid("message passing simulates DANA only"));
    };
    let l = laplacian_from_weights(g);
    check_dims(x0, &l, p)?;
    let n = g.n();
    let order = match &options.agent_order {
        Some(o) => {
            let mut sorted = o.clone();
            sorted.sort_unstable();
            if sorted != (0..n).collect::<Vec<_>>() {
                return Err(invalid("agent order must be a permutation of 0..n"));
            }
            o.clone()
        }
        None => (0..n).collect(),
    };
    let lm = l.as_matrix();
    let agents = (0..n)
        .map(|i| {
            let l_row: Vec<(usize, f64)> = (0..n).filter(|&j| lm[(i, j)] != 0.0).map(|j| (j, lm[(i, j)])).collect();
            let local_costs = l_row.iter().map(|&(j, _)| (p.a()[j], p.b()[j])).collect();
            AgentState { id: i, x: x0[i], y: 0.0, z: 0.0, w: 0.0, s: 0.0, l_row, local_costs }
        })
        .collect();
    let mut net = Network {
        agents,
        order,
        log: options.record_deliveries.then(Vec::new),
        delivered: 0,
    };
    let obs = Observer::new(p, &l)?;
    let per_step = dana_messages_per_iteration(g.num_edges() as u64, q);
    let mut k = 0;
    let trace = drive(&obs, config, x0.to_vec(), per_step, |_| {
        k += 1;
        net.outer_step(k, q, config.alpha);
        net.x()
    })?;
    debug_assert_eq!(net.delivered, per_step * (trace.records.len() as u64 - 1));
    Ok((trace, net.log.unwrap_or_default()))
}
