//! Experiment orchestration behind the `dana` command line tool.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::design::{
    design_pipeline, design_surrogate, dgd_weight_design, reduced_hessian, DesignResult,
};
use crate::dispatch::{feasible_initial, kkt_solve, random_problem, DispatchProblem, InitMode};
use crate::error::{Error, Result};
use crate::graph::{connected, random_connected_graph, unit_laplacian, WeightedGraph};
use crate::linalg::{schur_definiteness_check, sym_eig, taylor_q_inverse, SymMatrix};
use crate::rng::{stream_rng, trial_seed, STREAM_AUX};
use crate::solver::{
    dana_run_dense, dana_run_message_passing, dgd_run, loop_conversion_check, Algorithm, Outcome,
    RunTrace, SolverConfig,
};

/// Failure classes of the command line tool, each with its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable or invalid configuration and input files (exit 2).
    Input(String),
    /// Valid input the methods cannot handle (exit 3).
    Domain(String),
    /// A verified property failed (exit 4).
    Property(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Domain(_) => 3,
            CliError::Property(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Domain(m) => write!(f, "domain error: {m}"),
            CliError::Property(m) => write!(f, "property failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidInput(_) | Error::Json(_) | Error::Io(_) => CliError::Input(e.to_string()),
            Error::NumericalFailure(_) | Error::DesignDegenerate(_) | Error::DivergenceDetected(_) => {
                CliError::Domain(e.to_string())
            }
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `D - A` with the same post-scaling as the designed Laplacian.
    Unweighted,
    DgdDesigned,
    DanaDesigned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSpec {
    pub name: String,
    #[serde(flatten)]
    pub algorithm: Algorithm,
    #[serde(default = "one")]
    pub alpha: f64,
    pub weighting: Weighting,
}

fn one() -> f64 {
    1.0
}

impl AlgorithmSpec {
    pub fn dana(q: usize) -> Self {
        Self { name: format!("dana_q{q}"), algorithm: Algorithm::Dana { q }, alpha: 1.0, weighting: Weighting::DanaDesigned }
    }

    pub fn dgd(weighting: Weighting) -> Self {
        let name = match weighting {
            Weighting::Unweighted => "dgd_unweighted",
            Weighting::DgdDesigned => "dgd_designed",
            Weighting::DanaDesigned => "dgd_dana_weights",
        };
        Self { name: name.into(), algorithm: Algorithm::Dgd, alpha: 1.0, weighting }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n: usize,
    /// Edge count.
    pub m: usize,
    pub a_range: (f64, f64),
    pub b_range: (f64, f64),
    pub d: f64,
    pub init: InitMode,
    pub algorithms: Vec<AlgorithmSpec>,
    pub max_outer: usize,
    pub tol: f64,
    pub trials: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n: 50,
            m: 150,
            a_range: (0.8, 1.2),
            b_range: (0.0, 1.0),
            d: 50.0,
            init: InitMode::Uniform,
            algorithms: vec![
                AlgorithmSpec::dana(0),
                AlgorithmSpec::dana(1),
                AlgorithmSpec::dana(2),
                AlgorithmSpec::dana(4),
                AlgorithmSpec::dgd(Weighting::Unweighted),
                AlgorithmSpec::dgd(Weighting::DgdDesigned),
            ],
            max_outer: 5000,
            tol: 1e-6,
            trials: 1,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Input(m));
        if self.n < 2 {
            return bad(format!("n must be at least 2, got {}", self.n));
        }
        let max_edges = self.n * (self.n - 1) / 2;
        if self.m < self.n - 1 || self.m > max_edges {
            return bad(format!("edge count {} outside [{}, {}]", self.m, self.n - 1, max_edges));
        }
        if !(self.a_range.0 > 0.0) || self.a_range.1 < self.a_range.0 {
            return bad(format!("a_range must satisfy 0 < lo <= hi, got {:?}", self.a_range));
        }
        if self.b_range.1 < self.b_range.0 {
            return bad(format!("b_range has lo > hi: {:?}", self.b_range));
        }
        if !self.d.is_finite() {
            return bad("demand must be finite".into());
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.max_outer == 0 {
            return bad("max_outer must be at least 1".into());
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        let mut names: Vec<&str> = self.algorithms.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("algorithm names must be unique".into());
        }
        for a in &self.algorithms {
            if a.name.is_empty() || !a.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return bad(format!("algorithm name {:?} is not a plain file stem", a.name));
            }
            if !(a.alpha > 0.0) || !a.alpha.is_finite() {
                return bad(format!("{}: step size must be positive", a.name));
            }
        }
        Ok(())
    }

    /// Replaces every DANA entry by one per value of `qs`.
    pub fn set_dana_orders(&mut self, qs: &[usize]) {
        let mut algos: Vec<AlgorithmSpec> = qs.iter().map(|&q| AlgorithmSpec::dana(q)).collect();
        algos.extend(self.algorithms.iter().filter(|a| a.algorithm == Algorithm::Dgd).cloned());
        self.algorithms = algos;
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        for a in &mut self.algorithms {
            a.alpha = alpha;
        }
    }

    /// Graph and cost data for trial `index`.
    pub fn instance(&self, index: usize) -> Result<Instance> {
        let seed = trial_seed(self.seed, index as u64);
        let graph = random_connected_graph(self.n, self.m, seed)?;
        let problem = random_problem(self.n, self.a_range, self.b_range, self.d, seed)?;
        Ok(Instance { seed, graph, problem })
    }
}

#[derive(Clone, Debug)]
pub struct Instance {
    pub seed: u64,
    pub graph: WeightedGraph,
    pub problem: DispatchProblem,
}

/// Laplacians for each weighting, computed on first use.
struct LaplacianCache<'a> {
    inst: &'a Instance,
    dana: Option<SymMatrix>,
    dgd: Option<SymMatrix>,
}

impl<'a> LaplacianCache<'a> {
    fn get(&mut self, w: Weighting) -> Result<SymMatrix> {
        let a = self.inst.problem.a();
        match w {
            Weighting::Unweighted => {
                Ok(crate::design::post_scale(&unit_laplacian(&self.inst.graph), a)?.0)
            }
            Weighting::DanaDesigned => {
                if self.dana.is_none() {
                    self.dana = Some(design_surrogate(&self.inst.graph, a)?.l_star);
                }
                Ok(self.dana.clone().expect("just computed"))
            }
            Weighting::DgdDesigned => {
                if self.dgd.is_none() {
                    self.dgd = Some(dgd_weight_design(&self.inst.graph, a)?.laplacian);
                }
                Ok(self.dgd.clone().expect("just computed"))
            }
        }
    }
}

/// Trace of one algorithm variant on one instance.
#[derive(Clone, Debug)]
pub struct VariantRun {
    pub name: String,
    pub trace: RunTrace,
}

impl VariantRun {
    pub fn iterations_to(&self, gap: f64) -> Option<usize> {
        self.trace.iterations_to(gap)
    }
}

/// Runs every configured algorithm on `inst`. Divergence is not an error:
/// the partial trace is kept with outcome [`Outcome::Diverged`].
pub fn run_variants(config: &ExperimentConfig, inst: &Instance) -> Result<Vec<VariantRun>> {
    let mut cache = LaplacianCache { inst, dana: None, dgd: None };
    let x0 = feasible_initial(&inst.problem, config.init);
    let mut out = Vec::new();
    for algo in &config.algorithms {
        let l = cache.get(algo.weighting)?;
        let sc = SolverConfig { algorithm: algo.algorithm, alpha: algo.alpha, max_outer: config.max_outer, tol: Some(config.tol) };
        let result = match algo.algorithm {
            Algorithm::Dana { .. } => dana_run_dense(&inst.problem, &l, &sc, &x0),
            Algorithm::Dgd => dgd_run(&inst.problem, &l, algo.alpha, config.max_outer, Some(config.tol), &x0),
        };
        let trace = match result {
            Ok(t) => t,
            Err(Error::DivergenceDetected(t)) => *t,
            Err(e) => return Err(e),
        };
        out.push(VariantRun { name: algo.name.clone(), trace });
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects output files and their hashes; writes `manifest.json` last.
struct OutputDir {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl OutputDir {
    fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), entries: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.root.join(name), bytes)?;
        self.entries.push(ManifestEntry { file: name.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    fn finish<T: Serialize>(self, body: &T) -> Result<PathBuf> {
        #[derive(Serialize)]
        struct Manifest<'a, T> {
            #[serde(flatten)]
            body: &'a T,
            outputs: &'a [ManifestEntry],
        }
        let path = self.root.join("manifest.json");
        let text = serde_json::to_string_pretty(&Manifest { body, outputs: &self.entries })?;
        fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub trial: usize,
    pub outcome: Outcome,
    pub iterations: usize,
    pub iterations_to_tol: Option<usize>,
    pub final_gap: f64,
    pub messages: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationStats {
    pub name: String,
    /// Trials that reached the tolerance.
    pub reached: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub f_star: Vec<f64>,
    pub variants: Vec<VariantSummary>,
    pub iteration_stats: Vec<IterationStats>,
}

/// Sample mean and `(n - 1)`-denominator standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Convergence traces for every configured variant and trial.
pub fn cmd_run(config: &ExperimentConfig) -> CliResult<RunReport> {
    config.validate()?;
    let runs: Vec<(f64, Vec<VariantRun>)> = (0..config.trials)
        .into_par_iter()
        .map(|k| {
            let inst = config.instance(k)?;
            let f_star = kkt_solve(&inst.problem).f_star;
            Ok((f_star, run_variants(config, &inst)?))
        })
        .collect::<Result<_>>()?;
    let mut out = OutputDir::create(&config.output_dir).map_err(CliError::from)?;
    let mut variants = Vec::new();
    for (k, (_, runs)) in runs.iter().enumerate() {
        for r in runs {
            let file = if config.trials == 1 { format!("{}.csv", r.name) } else { format!("{}_trial{k}.csv", r.name) };
            out.write(&file, r.trace.to_csv().as_bytes())?;
            variants.push(VariantSummary {
                name: r.name.clone(),
                trial: k,
                outcome: r.trace.outcome,
                iterations: r.trace.last().k,
                iterations_to_tol: r.iterations_to(config.tol),
                final_gap: r.trace.last().f_gap,
                messages: r.trace.last().messages,
            });
        }
    }
    let iteration_stats = config
        .algorithms
        .iter()
        .map(|a| {
            let its: Vec<f64> = variants
                .iter()
                .filter(|v| v.name == a.name)
                .filter_map(|v| v.iterations_to_tol.map(|i| i as f64))
                .collect();
            let (mean, std) = if its.is_empty() { (None, None) } else {
                let (m, s) = mean_std(&its);
                (Some(m), Some(s))
            };
            IterationStats { name: a.name.clone(), reached: its.len(), mean, std }
        })
        .collect();
    let report = RunReport { config: config.clone(), f_star: runs.iter().map(|r| r.0).collect(), variants, iteration_stats };
    out.finish(&report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub seed: u64,
    pub eps_l_star: f64,
    pub eps_a: f64,
    pub gap: f64,
    pub beta: f64,
    pub centering_residual: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchSummary {
    pub n: usize,
    pub m: usize,
    pub a_range: (f64, f64),
    pub trials: usize,
    /// Trials dropped because the design degenerated.
    pub excluded: usize,
    pub mean_eps_l_star: f64,
    pub std_eps_l_star: f64,
    pub mean_eps_a: f64,
    pub std_eps_a: f64,
    pub mean_gap: f64,
    pub std_gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Table1Report {
    pub config: ExperimentConfig,
    pub summary: BatchSummary,
    pub rows: Vec<TrialRow>,
    pub excluded_trials: Vec<usize>,
}

/// Design statistics over `trials` seeded instances, without writing files.
pub fn table1_batch(config: &ExperimentConfig) -> CliResult<(BatchSummary, Vec<TrialRow>, Vec<usize>)> {
    config.validate()?;
    if config.trials < 2 {
        return Err(CliError::Input("table1 needs at least 2 trials".into()));
    }
    let results: Vec<(usize, u64, Result<DesignResult>)> = (0..config.trials)
        .into_par_iter()
        .map(|k| match config.instance(k) {
            Ok(inst) => (k, inst.seed, design_pipeline(&inst.graph, inst.problem.a())),
            Err(e) => (k, 0, Err(e)),
        })
        .collect();
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for (k, seed, r) in results {
        match r {
            Ok(d) => rows.push(TrialRow {
                trial: k,
                seed,
                eps_l_star: d.eps_l_star,
                eps_a: d.eps_a,
                gap: d.gap,
                beta: d.beta,
                centering_residual: d.diagnostics.centering_residual,
            }),
            Err(Error::DesignDegenerate(_)) => excluded.push(k),
            Err(e) => return Err(e.into()),
        }
    }
    if rows.len() < 2 {
        return Err(CliError::Domain(format!("only {} usable trials", rows.len())));
    }
    let col = |f: fn(&TrialRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let (mean_eps_l_star, std_eps_l_star) = mean_std(&col(|r| r.eps_l_star));
    let (mean_eps_a, std_eps_a) = mean_std(&col(|r| r.eps_a));
    let (mean_gap, std_gap) = mean_std(&col(|r| r.gap));
    let summary = BatchSummary {
        n: config.n,
        m: config.m,
        a_range: config.a_range,
        trials: rows.len(),
        excluded: excluded.len(),
        mean_eps_l_star,
        std_eps_l_star,
        mean_eps_a,
        std_eps_a,
        mean_gap,
        std_gap,
    };
    Ok((summary, rows, excluded))
}

/// Table-style design statistics with per-trial and summary CSVs.
pub fn cmd_table1(config: &ExperimentConfig) -> CliResult<Table1Report> {
    let (summary, rows, excluded_trials) = table1_batch(config)?;
    let mut out = OutputDir::create(&config.output_dir)?;
    let mut trials_csv = String::from("trial,seed,eps_L_star,eps_A,gap,beta,centering_residual\n");
    for r in &rows {
        trials_csv.push_str(&format!(
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            r.trial, r.seed, r.eps_l_star, r.eps_a, r.gap, r.beta, r.centering_residual
        ));
    }
    out.write("table1_trials.csv", trials_csv.as_bytes())?;
    let s = &summary;
    let summary_csv = format!(
        "n,m,a_lo,a_hi,trials,excluded,mu_eps_L_star,sigma_eps_L_star,mu_gap,sigma_gap\n{},{},{},{},{},{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
        s.n, s.m, s.a_range.0, s.a_range.1, s.trials, s.excluded, s.mean_eps_l_star, s.std_eps_l_star, s.mean_gap, s.std_gap
    );
    out.write("table1_summary.csv", summary_csv.as_bytes())?;
    let report = Table1Report { config: config.clone(), summary, rows, excluded_trials };
    out.finish(&report)?;
    Ok(report)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    n: usize,
    edges: Vec<[usize; 2]>,
    #[serde(default)]
    weights: Option<Vec<f64>>,
}

/// Reads a graph file; weights are optional (topology only). A
/// disconnected topology is a domain error rather than an input error.
pub fn read_graph(path: &Path) -> CliResult<WeightedGraph> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let raw: GraphFile = serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let edges: Vec<(usize, usize)> = raw.edges.iter().map(|e| (e[0], e[1])).collect();
    let well_formed = raw.n >= 2 && edges.iter().all(|&(i, j)| i < raw.n && j < raw.n && i != j);
    if well_formed && !connected(raw.n, &edges) {
        return Err(CliError::Domain(format!("{}: graph is disconnected", path.display())));
    }
    let weights = raw.weights.unwrap_or_else(|| vec![1.0; edges.len()]);
    WeightedGraph::new(raw.n, edges, weights).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn read_problem(path: &Path) -> CliResult<DispatchProblem> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Designs weights for the topology in `graph` and the costs in `problem`,
/// writing the result as JSON to `out`.
pub fn cmd_design(graph: &Path, problem: &Path, out: &Path) -> CliResult<DesignResult> {
    let g = read_graph(graph)?;
    let p = read_problem(problem)?;
    if p.n() != g.n() {
        return Err(CliError::Input(format!("graph has {} nodes but problem has {}", g.n(), p.n())));
    }
    let result = design_pipeline(&g, p.a())?;
    let text = serde_json::to_string_pretty(&result).map_err(Error::from)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    fs::write(out, text + "\n").map_err(Error::from)?;
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropertyStatus {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub status: PropertyStatus,
    pub checked: usize,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub properties: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn all_pass(&self) -> bool {
        self.properties.iter().all(|p| p.status != PropertyStatus::Fail)
    }
}

/// Random instance with the unit Laplacian post-scaled, which always
/// satisfies `max |1 - λ(M)| < 1`.
pub fn scaled_unit_instance(seed: u64, max_n: usize) -> Result<(DispatchProblem, WeightedGraph, SymMatrix)> {
    let mut rng = stream_rng(seed, STREAM_AUX);
    let n = rng.gen_range(3..=max_n.max(3));
    let m = rng.gen_range(n - 1..=(n * (n - 1) / 2).min(3 * n));
    let g0 = random_connected_graph(n, m, seed)?;
    let p = random_problem(n, (0.8, 1.2), (0.0, 1.0), n as f64, seed)?;
    let (l, beta) = crate::design::post_scale(&unit_laplacian(&g0), p.a())?;
    let g = g0.with_weights(vec![beta; g0.num_edges()])?;
    Ok((p, g, l))
}

fn verdict(name: &str, failures: Vec<String>, checked: usize) -> PropertyResult {
    PropertyResult {
        name: name.into(),
        status: if failures.is_empty() { PropertyStatus::Pass } else { PropertyStatus::Fail },
        checked,
        detail: if failures.is_empty() { "ok".into() } else { failures.join("; ") },
    }
}

/// Loop conversion on `instances` random instances, all pairs with
/// `k(q + 1) <= 24`.
pub fn check_loop_conversion(seed: u64, instances: usize) -> Result<PropertyResult> {
    let pairs: Vec<(usize, usize)> = (1..=24).flat_map(|k| (0..24).map(move |q| (k, q))).filter(|(k, q)| k * (q + 1) <= 24).collect();
    let mut failures = Vec::new();
    let mut checked = 0;
    for i in 0..instances {
        let (p, _, l) = scaled_unit_instance(trial_seed(seed, i as u64), 20)?;
        let x0 = feasible_initial(&p, InitMode::Random { seed: i as u64 });
        for &a in &pairs {
            for &b in &pairs {
                if a < b && a.0 * (a.1 + 1) == b.0 * (b.1 + 1) {
                    checked += 1;
                    if !loop_conversion_check(&p, &l, &x0, a, b)? {
                        failures.push(format!("instance {i}: {a:?} vs {b:?}"));
                    }
                }
            }
        }
    }
    Ok(verdict("loop_conversion", failures, checked))
}

/// Strict decrease of `V` along DANA runs with unit step.
pub fn check_lyapunov_decrease(seed: u64, instances: usize) -> Result<PropertyResult> {
    let mut failures = Vec::new();
    for i in 0..instances {
        let (p, _, l) = scaled_unit_instance(trial_seed(seed, 1000 + i as u64), 12)?;
        let x0 = feasible_initial(&p, InitMode::Concentrated);
        for q in [0, 1, 2, 4] {
            let t = dana_run_dense(&p, &l, &SolverConfig::dana(q, 30), &x0)?;
            let v0 = t.records[0].lyapunov;
            let window: Vec<f64> = t.records.iter().map(|r| r.lyapunov).take_while(|&v| v >= 1e-20 * v0).collect();
            if !window.windows(2).all(|w| w[1] < w[0]) {
                failures.push(format!("instance {i}, q={q}"));
            }
        }
    }
    Ok(verdict("lyapunov_decrease", failures, instances * 4))
}

/// Dense and per-agent executions produce the same iterates.
pub fn check_message_passing(seed: u64, instances: usize) -> Result<PropertyResult> {
    let mut failures = Vec::new();
    for i in 0..instances {
        let (p, g, l) = scaled_unit_instance(trial_seed(seed, 2000 + i as u64), 12)?;
        let x0 = feasible_initial(&p, InitMode::Random { seed: i as u64 });
        let q = i % 4;
        let c = SolverConfig::dana(q, 20);
        let a = dana_run_dense(&p, &l, &c, &x0)?;
        let b = dana_run_message_passing(&p, &g, &c, &x0)?;
        let scale = a.x_final.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let dx = a.x_final.iter().zip(&b.x_final).fold(0.0f64, |m, (u, v)| m.max((u - v).abs()));
        let dgap = a.records.iter().zip(&b.records).fold(0.0f64, |m, (u, v)| m.max((u.f_gap - v.f_gap).abs() / u.f_gap.abs().max(1.0)));
        if dx > 1e-10 * scale || dgap > 1e-10 || a.records.len() != b.records.len() {
            failures.push(format!("instance {i}: dx={dx:e} dgap={dgap:e}"));
        }
    }
    Ok(verdict("dense_message_passing_agreement", failures, instances))
}

/// Both routes of the Schur-complement test agree on random blocks.
pub fn check_schur_agreement(seed: u64, instances: usize) -> Result<PropertyResult> {
    let mut rng = stream_rng(seed, STREAM_AUX);
    let mut failures = Vec::new();
    for i in 0..instances {
        let (p, q) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let root = DMatrix::from_fn(p + q, p + q, |_, _| rng.gen_range(-1.0..1.0));
        // Shifting the diagonal makes roughly half the blocks indefinite.
        let shift = rng.gen_range(-1.0..1.0) * (p + q) as f64 * 0.3;
        let full = &root * root.transpose() + DMatrix::identity(p + q, p + q) * shift;
        let a = SymMatrix::symmetrize(full.view((0, 0), (p, p)).clone_owned());
        let b = full.view((0, p), (p, q)).clone_owned();
        let c = SymMatrix::symmetrize(full.view((p, p), (q, q)).clone_owned() + DMatrix::identity(q, q) * (q as f64 * 0.5));
        match schur_definiteness_check(&a, &b, &c) {
            Ok(v) if v.agree() => {}
            Ok(v) => {
                // Disagreement is only legitimate when C is not positive definite.
                if sym_eig(&c)?.min() > 0.0 {
                    failures.push(format!("instance {i}: {v:?}"));
                }
            }
            Err(Error::InvalidInput(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(verdict("schur_agreement", failures, instances))
}

/// `‖S_q - A⁻¹‖₂ <= ε^{q+1} / (1 - ε)` for random SPD `A` with `ε < 1`.
pub fn check_taylor_bound(seed: u64, instances: usize) -> Result<PropertyResult> {
    let mut rng = stream_rng(seed, STREAM_AUX);
    let mut failures = Vec::new();
    for i in 0..instances {
        let n = rng.gen_range(1..8);
        let eps_target = rng.gen_range(0.05..0.95);
        let lambdas: Vec<f64> = (0..n).map(|_| 1.0 + rng.gen_range(-eps_target..eps_target)).collect();
        let raw = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let qr = raw.qr();
        let qm = qr.q();
        let a = SymMatrix::symmetrize(&qm * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(lambdas.clone())) * qm.transpose());
        let eps = lambdas.iter().fold(0.0f64, |m, l| m.max((1.0 - l).abs()));
        let inv = a.as_matrix().clone().try_inverse().ok_or_else(|| Error::NumericalFailure("singular test matrix".into()))?;
        for q in [0usize, 1, 2, 5, 10] {
            let s = taylor_q_inverse(&a, q)?;
            let err = SymMatrix::symmetrize(s.as_matrix() - &inv);
            let norm = sym_eig(&err)?.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let bound = eps.powi(q as i32 + 1) / (1.0 - eps);
            if norm > bound * (1.0 + 1e-9) + 1e-12 {
                failures.push(format!("instance {i}, q={q}: {norm:e} > {bound:e}"));
            }
        }
    }
    Ok(verdict("taylor_error_bound", failures, instances * 5))
}

/// Scaling a Laplacian past the stability limit: the decrease property no
/// longer applies and the divergence guard must stop the run.
pub fn check_divergence_guard(seed: u64) -> Result<PropertyResult> {
    let (p, _, l) = scaled_unit_instance(trial_seed(seed, 9999), 10)?;
    let m = sym_eig(&reduced_hessian(&l, &p.hessian())?)?;
    // λ_max(M) scales with the square of the Laplacian scale; target λ_max = 3.
    let s = (3.0 / m.max()).sqrt();
    let big = l.scaled(s);
    let x0 = feasible_initial(&p, InitMode::Concentrated);
    let result = dana_run_dense(&p, &big, &SolverConfig::dana(2, 100_000), &x0);
    let (status, detail) = match result {
        Err(Error::DivergenceDetected(t)) => {
            (PropertyStatus::NotApplicable, format!("eps > 1 with even q; guard stopped the run after {} steps", t.records.len() - 1))
        }
        Ok(t) => (PropertyStatus::Fail, format!("run ended with outcome {:?}", t.outcome)),
        Err(e) => return Err(e),
    };
    Ok(PropertyResult { name: "lyapunov_decrease_unstable_design".into(), status, checked: 1, detail })
}

/// Runs every invariant suite with seeds derived from `seed`.
pub fn cmd_verify(seed: u64) -> CliResult<VerifyReport> {
    let properties = vec![
        check_loop_conversion(seed, 5)?,
        check_lyapunov_decrease(seed, 10)?,
        check_message_passing(seed, 10)?,
        check_schur_agreement(seed, 200)?,
        check_taylor_bound(seed, 50)?,
        check_divergence_guard(seed)?,
    ];
    Ok(VerifyReport { seed, properties })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_uses_sample_denominator() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig::default();
        assert!(c.validate().is_ok());
        c.m = 10;
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
        let c = ExperimentConfig { a_range: (0.0, 1.0), ..Default::default() };
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.algorithms.push(AlgorithmSpec::dana(0));
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_roundtrip_and_overrides() {
        let mut c = ExperimentConfig::default();
        c.set_dana_orders(&[3]);
        c.set_alpha(0.5);
        assert_eq!(c.algorithms.len(), 3);
        assert!(c.algorithms.iter().all(|a| a.alpha == 0.5));
        let text = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"n": 4, "m": 5}"#).unwrap();
        assert_eq!(partial.n, 4);
        assert_eq!(partial.d, 50.0);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn trial_instances_are_deterministic() {
        let c = ExperimentConfig { n: 8, m: 12, ..Default::default() };
        let a = c.instance(3).unwrap();
        let b = c.instance(3).unwrap();
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.problem, b.problem);
        assert_ne!(c.instance(4).unwrap().seed, a.seed);
    }

    #[test]
    fn small_property_suites_pass() {
        assert_eq!(check_loop_conversion(1, 1).unwrap().status, PropertyStatus::Pass);
        assert_eq!(check_schur_agreement(1, 50).unwrap().status, PropertyStatus::Pass);
        assert_eq!(check_taylor_bound(1, 10).unwrap().status, PropertyStatus::Pass);
        assert_eq!(check_divergence_guard(1).unwrap().status, PropertyStatus::NotApplicable);
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(CliError::from(Error::InvalidInput("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(Error::DesignDegenerate("x".into())).exit_code(), 3);
        assert_eq!(CliError::Property("x".into()).exit_code(), 4);
    }
}
