//! Undirected weighted communication graphs.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::SymMatrix;
use crate::rng::{stream_rng, STREAM_GRAPH};

/// A connected simple undirected graph with one positive weight per edge.
///
/// Edges are stored as `(i, j)` with `i < j`, sorted lexicographically.
/// JSON form: `{"n": 3, "edges": [[0, 1], [1, 2]], "weights": [1.0, 1.0]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct WeightedGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawGraph {
    n: usize,
    edges: Vec<[usize; 2]>,
    weights: Vec<f64>,
}

impl TryFrom<RawGraph> for WeightedGraph {
    type Error = crate::Error;

    fn try_from(raw: RawGraph) -> Result<Self> {
        let edges = raw.edges.iter().map(|e| (e[0], e[1])).collect();
        WeightedGraph::new(raw.n, edges, raw.weights)
    }
}

impl From<WeightedGraph> for RawGraph {
    fn from(g: WeightedGraph) -> Self {
        RawGraph {
            n: g.n,
            edges: g.edges.iter().map(|&(i, j)| [i, j]).collect(),
            weights: g.weights,
        }
    }
}

impl WeightedGraph {
    /// Validates and normalizes an edge list. Each pair may be given in
    /// either orientation; weights follow the input order of `edges`.
    pub fn new(n: usize, edges: Vec<(usize, usize)>, weights: Vec<f64>) -> Result<Self> {
        if n < 2 {
            return Err(invalid(format!("graph needs at least 2 nodes, got {n}")));
        }
        if edges.len() != weights.len() {
            return Err(invalid(format!(
                "{} edges but {} weights",
                edges.len(),
                weights.len()
            )));
        }
        let mut pairs: Vec<((usize, usize), f64)> = Vec::with_capacity(edges.len());
        for (&(a, b), &w) in edges.iter().zip(&weights) {
            if a >= n || b >= n {
                return Err(invalid(format!("edge ({a}, {b}) out of range for n = {n}")));
            }
            if a == b {
                return Err(invalid(format!("self-loop at node {a}")));
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(invalid(format!("edge ({a}, {b}) has non-positive weight {w}")));
            }
            pairs.push(((a.min(b), a.max(b)), w));
        }
        pairs.sort_by_key(|x| x.0);
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(invalid("duplicate edge"));
        }
        let g = Self {
            n,
            edges: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        };
        if !g.is_connected() {
            return Err(invalid("graph is not connected"));
        }
        Ok(g)
    }

    /// Same topology, unit weights.
    pub fn unit(n: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        let w = vec![1.0; edges.len()];
        Self::new(n, edges, w)
    }

    pub fn path(n: usize) -> Result<Self> {
        Self::unit(n, (1..n).map(|i| (i - 1, i)).collect())
    }

    pub fn complete(n: usize) -> Result<Self> {
        let edges = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        Self::unit(n, edges)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Same topology with new weights (in edge order).
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(self.n, self.edges.clone(), weights)
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.binary_search(&(i.min(j), i.max(j))).is_ok()
    }

    /// Sorted neighbor lists.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors().iter().map(Vec::len).collect()
    }

    /// BFS from node 0 reaches every node.
    pub fn is_connected(&self) -> bool {
        connected(self.n, &self.edges)
    }

    pub fn incidence_matrix(&self) -> IncidenceMatrix {
        let mut e = DMatrix::zeros(self.edges.len(), self.n);
        for (row, &(i, j)) in self.edges.iter().enumerate() {
            e[(row, i)] = 1.0;
            e[(row, j)] = -1.0;
        }
        IncidenceMatrix { e }
    }
}

pub(crate) fn connected(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == n
}

/// Edge-node incidence matrix: row `e` has `+1` at the smaller endpoint of
/// edge `e` and `-1` at the larger one.
#[derive(Clone, Debug)]
pub struct IncidenceMatrix {
    e: DMatrix<f64>,
}

impl IncidenceMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.e
    }

    /// `Eᵀ X E` with `X = diag(weights)`.
    pub fn weighted_laplacian(&self, weights: &[f64]) -> SymMatrix {
        let mut xe = self.e.clone();
        for (row, &w) in weights.iter().enumerate() {
            xe.row_mut(row).scale_mut(w);
        }
        SymMatrix::symmetrize(self.e.transpose() * xe)
    }
}

/// Random connected graph with exactly `m` edges and unit weights: a
/// uniformly random labelled spanning tree (Prüfer code) plus `m - n + 1`
/// distinct non-tree pairs drawn uniformly.
pub fn random_connected_graph(n: usize, m: usize, seed: u64) -> Result<WeightedGraph> {
    if n < 2 {
        return Err(invalid(format!("random graph needs n >= 2, got {n}")));
    }
    let max_edges = n * (n - 1) / 2;
    if m < n - 1 || m > max_edges {
        return Err(invalid(format!(
            "edge count {m} outside [{}, {max_edges}] for n = {n}",
            n - 1
        )));
    }
    let mut rng = stream_rng(seed, STREAM_GRAPH);
    let code: Vec<usize> = (0..n.saturating_sub(2)).map(|_| rng.gen_range(0..n)).collect();
    let mut edges: BTreeSet<(usize, usize)> = prufer_decode(n, &code).into_iter().collect();

    let candidates: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|e| !edges.contains(e))
        .collect();
    let extra = m - (n - 1);
    for idx in sample(&mut rng, candidates.len(), extra).into_iter() {
        edges.insert(candidates[idx]);
    }
    WeightedGraph::unit(n, edges.into_iter().collect())
}

fn prufer_decode(n: usize, code: &[usize]) -> Vec<(usize, usize)> {
    let mut degree = vec![1usize; n];
    for &c in code {
        degree[c] += 1;
    }
    let mut leaves: BTreeSet<usize> = (0..n).filter(|&i| degree[i] == 1).collect();
    let mut edges = Vec::with_capacity(n - 1);
    for &c in code {
        let leaf = *leaves.iter().next().expect("Prüfer decoding always has a leaf");
        leaves.remove(&leaf);
        edges.push((leaf.min(c), leaf.max(c)));
        degree[c] -= 1;
        if degree[c] == 1 {
            leaves.insert(c);
        }
    }
    let last: Vec<usize> = leaves.into_iter().collect();
    edges.push((last[0], last[1]));
    edges
}

/// Weighted Laplacian assembled entrywise: `L_ij = -w_ij` on edges, row sums
/// on the diagonal, zero elsewhere.
pub fn laplacian_from_weights(g: &WeightedGraph) -> SymMatrix {
    let n = g.n();
    let mut l = DMatrix::zeros(n, n);
    for (&(i, j), &w) in g.edges().iter().zip(g.weights()) {
        l[(i, j)] -= w;
        l[(j, i)] -= w;
        l[(i, i)] += w;
        l[(j, j)] += w;
    }
    SymMatrix::symmetrize(l)
}

/// Unweighted Laplacian `D - A` of the topology of `g`.
pub fn unit_laplacian(g: &WeightedGraph) -> SymMatrix {
    let unit = g
        .with_weights(vec![1.0; g.num_edges()])
        .expect("same topology stays valid");
    laplacian_from_weights(&unit)
}

/// Square boolean mask over node pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsityMask {
    n: usize,
    bits: Vec<bool>,
}

impl SparsityMask {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    /// Off-diagonal pairs `(i, j)`, `i < j`, inside the mask.
    pub fn upper_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|i| (i + 1..self.n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.contains(i, j))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_complete(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }
}

/// `mask(i, j)` is true iff `j` is `i` itself, a neighbor of `i`, or a
/// neighbor of a neighbor of `i`.
pub fn two_hop_sparsity(g: &WeightedGraph) -> SparsityMask {
    let n = g.n();
    let adj = g.neighbors();
    let mut bits = vec![false; n * n];
    for i in 0..n {
        bits[i * n + i] = true;
        for &k in &adj[i] {
            bits[i * n + k] = true;
            for &j in &adj[k] {
                bits[i * n + j] = true;
            }
        }
    }
    SparsityMask { n, bits }
}
