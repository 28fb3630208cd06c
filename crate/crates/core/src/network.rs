//! Node graph, neighborhoods and combination coefficients.
//!
//! Weights are stored in the `c_lk` orientation: entry `(l, k)` is the
//! weight node `k` applies to neighbor `l`'s estimate, so every column sums
//! to one.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAX_CONNECT_ATTEMPTS: usize = 100_000;
const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Undirected graph with self-loops on every node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    adjacency: Vec<bool>,
}

impl Topology {
    /// Nodes with only their self-loop.
    pub fn isolated(n: usize) -> Self {
        let mut adjacency = vec![false; n * n];
        for k in 0..n {
            adjacency[k * n + k] = true;
        }
        Self { n, adjacency }
    }

    /// Build from an undirected edge list with 0-based node indices.
    /// Self-edges and duplicates are accepted and ignored.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("network needs at least one node".into()));
        }
        let mut t = Self::isolated(n);
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Config(format!(
                    "edge ({a}, {b}) references a node outside 0..{n}"
                )));
            }
            t.link(a, b);
        }
        Ok(t)
    }

    /// Erdős–Rényi graph with edge probability `avg_degree / (n - 1)`,
    /// redrawn until connected when `require_connected` is set.
    pub fn generate(n: usize, avg_degree: f64, require_connected: bool, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("network needs at least one node".into()));
        }
        let max_degree = (n - 1) as f64;
        if !(0.0..=max_degree).contains(&avg_degree) {
            return Err(Error::Config(format!(
                "average degree {avg_degree} infeasible for {n} nodes (must lie in [0, {max_degree}])"
            )));
        }
        if n == 1 {
            return Ok(Self::isolated(1));
        }
        if require_connected && avg_degree == 0.0 {
            return Err(Error::Config(
                "a connected graph with more than one node needs a positive average degree".into(),
            ));
        }
        let p = avg_degree / max_degree;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..MAX_CONNECT_ATTEMPTS {
            let mut t = Self::isolated(n);
            for a in 0..n {
                for b in (a + 1)..n {
                    if rng.gen::<f64>() < p {
                        t.link(a, b);
                    }
                }
            }
            if !require_connected || t.is_connected() {
                return Ok(t);
            }
        }
        Err(Error::Config(format!(
            "no connected graph found for n={n}, average degree {avg_degree} after {MAX_CONNECT_ATTEMPTS} draws"
        )))
    }

    fn link(&mut self, a: usize, b: usize) {
        self.adjacency[a * self.n + b] = true;
        self.adjacency[b * self.n + a] = true;
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn is_neighbor(&self, l: usize, k: usize) -> bool {
        self.adjacency[l * self.n + k]
    }

    /// `𝒩_k` in ascending order, including `k` itself.
    pub fn neighborhood(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&l| self.is_neighbor(l, k))
    }

    /// `𝒩_k \ {k}` in ascending order.
    pub fn neighbors(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        self.neighborhood(k).filter(move |&l| l != k)
    }

    /// `|𝒩_k \ {k}|`.
    pub fn degree(&self, k: usize) -> usize {
        self.neighbors(k).count()
    }

    /// `Σ_k |𝒩_k \ {k}|`, i.e. the number of directed links.
    pub fn directed_link_count(&self) -> usize {
        (0..self.n).map(|k| self.degree(k)).sum()
    }

    /// Undirected edges `(a, b)` with `a < b`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 0..self.n {
            for b in (a + 1)..self.n {
                if self.is_neighbor(a, b) {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(k) = queue.pop_front() {
            for l in self.neighbors(k) {
                if !seen[l] {
                    seen[l] = true;
                    queue.push_back(l);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinationWeights {
    c: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightViolation {
    Shape { expected: usize, rows: usize, cols: usize },
    Negative { l: usize, k: usize, value: f64 },
    OutsideNeighborhood { l: usize, k: usize, value: f64 },
    ColumnSum { k: usize, sum: f64 },
}

impl fmt::Display for WeightViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightViolation::Shape { expected, rows, cols } => {
                write!(f, "weight matrix is {rows}x{cols}, expected {expected}x{expected}")
            }
            WeightViolation::Negative { l, k, value } => {
                write!(f, "c[{l},{k}] = {value} is negative")
            }
            WeightViolation::OutsideNeighborhood { l, k, value } => {
                write!(f, "c[{l},{k}] = {value} but node {l} is not a neighbor of {k}")
            }
            WeightViolation::ColumnSum { k, sum } => {
                write!(f, "weights into node {k} sum to {sum}, not 1")
            }
        }
    }
}

impl CombinationWeights {
    /// `c_lk = 1/|𝒩_k|` for `l ∈ 𝒩_k`.
    pub fn uniform(topology: &Topology) -> Self {
        let n = topology.node_count();
        let mut c = DMatrix::zeros(n, n);
        for k in 0..n {
            let size = topology.neighborhood(k).count() as f64;
            for l in topology.neighborhood(k) {
                c[(l, k)] = 1.0 / size;
            }
        }
        Self { c }
    }

    /// Wrap an arbitrary matrix; call [`validate`](Self::validate) before use.
    pub fn from_matrix(c: DMatrix<f64>) -> Self {
        Self { c }
    }

    pub fn get(&self, l: usize, k: usize) -> f64 {
        self.c[(l, k)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// Check nonnegativity, the neighborhood sparsity pattern and per-node
    /// sums, reporting the first violation found.
    pub fn validate(&self, topology: &Topology) -> std::result::Result<(), WeightViolation> {
        let n = topology.node_count();
        if self.c.shape() != (n, n) {
            return Err(WeightViolation::Shape {
                expected: n,
                rows: self.c.nrows(),
                cols: self.c.ncols(),
            });
        }
        for k in 0..n {
            for l in 0..n {
                let value = self.c[(l, k)];
                if value < 0.0 {
                    return Err(WeightViolation::Negative { l, k, value });
                }
                if value != 0.0 && !topology.is_neighbor(l, k) {
                    return Err(WeightViolation::OutsideNeighborhood { l, k, value });
                }
            }
            let sum: f64 = self.c.column(k).sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(WeightViolation::ColumnSum { k, sum });
            }
        }
        Ok(())
    }
}
