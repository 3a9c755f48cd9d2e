//! Communication graphs, Metropolis mixing matrices and their spectra.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{sym_eigen, Mat, SymEigen};

/// Threshold below which an eigenvalue of `I - W` is treated as zero.
pub const NULL_EIGEN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    ErdosRenyi,
    Ring,
    Path,
    Complete,
}

impl FromStr for GraphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "erdos_renyi" | "er" => Ok(GraphKind::ErdosRenyi),
            "ring" => Ok(GraphKind::Ring),
            "path" => Ok(GraphKind::Path),
            "complete" => Ok(GraphKind::Complete),
            other => Err(Error::Parse(format!("unknown graph kind `{other}`"))),
        }
    }
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GraphKind::ErdosRenyi => "erdos_renyi",
            GraphKind::Ring => "ring",
            GraphKind::Path => "path",
            GraphKind::Complete => "complete",
        };
        f.write_str(s)
    }
}

/// Undirected simple graph on nodes `0..n`.
///
/// Edges are stored once, as `(i, j)` with `i < j`, in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl Graph {
    /// Builds a graph from an edge list, normalizing orientation and
    /// dropping duplicates.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i == j {
                return Err(Error::InvalidParameter(format!("self-loop on node {i}")));
            }
            if i >= n || j >= n {
                return Err(Error::InvalidParameter(format!(
                    "edge ({i},{j}) out of range for n={n}"
                )));
            }
            set.insert((i.min(j), i.max(j)));
        }
        Ok(Graph {
            n,
            edges: set.into_iter().collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let adj = self.adjacency();
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    /// Serializes to the edge-list text format: `n=<count>` then one
    /// `i j` pair per line.
    pub fn to_edge_list(&self) -> String {
        let mut s = format!("n={}\n", self.n);
        for &(i, j) in &self.edges {
            s.push_str(&format!("{i} {j}\n"));
        }
        s
    }

    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty edge list".into()))?;
        let n = header
            .trim()
            .strip_prefix("n=")
            .and_then(|v| v.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::Parse(format!("bad edge-list header `{header}`")))?;
        let mut edges = Vec::new();
        for line in lines {
            let mut parts = line.split_whitespace();
            let parse = |p: Option<&str>| -> Result<usize> {
                p.and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Parse(format!("bad edge line `{line}`")))
            };
            let i = parse(parts.next())?;
            let j = parse(parts.next())?;
            if parts.next().is_some() {
                return Err(Error::Parse(format!("bad edge line `{line}`")));
            }
            edges.push((i, j));
        }
        Graph::new(n, edges)
    }
}

/// Edge probability used for Erdős–Rényi graphs: `2 ln(n) / n`, capped at 1.
pub fn erdos_renyi_probability(n: usize) -> f64 {
    (2.0 * (n as f64).ln() / n as f64).min(1.0)
}

/// Builds a connected graph of the requested kind.
///
/// Erdős–Rényi graphs are resampled wholesale until connected, so the result
/// follows the edge distribution conditioned on connectivity.
pub fn build_graph(kind: GraphKind, n: usize, seed: u64) -> Result<Graph> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "graph needs at least 2 nodes, got {n}"
        )));
    }
    match kind {
        GraphKind::Path => Graph::new(n, (0..n - 1).map(|i| (i, i + 1))),
        GraphKind::Ring => {
            if n == 2 {
                Graph::new(2, [(0, 1)])
            } else {
                Graph::new(n, (0..n).map(|i| (i, (i + 1) % n)))
            }
        }
        GraphKind::Complete => {
            Graph::new(n, (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))))
        }
        GraphKind::ErdosRenyi => {
            let p = erdos_renyi_probability(n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            loop {
                let mut edges = Vec::new();
                for i in 0..n {
                    for j in (i + 1)..n {
                        if rng.gen::<f64>() < p {
                            edges.push((i, j));
                        }
                    }
                }
                let g = Graph::new(n, edges)?;
                if g.is_connected() {
                    return Ok(g);
                }
            }
        }
    }
}

/// Symmetric doubly-stochastic weight matrix together with its spectrum.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    w: Mat,
    eigen: SymEigen,
    neighbors: Vec<Vec<usize>>,
    pub lambda2: f64,
    pub lambda_n: f64,
    pub rho: f64,
}

impl MixingMatrix {
    /// Wraps an arbitrary square matrix and computes its spectrum. No
    /// assumption is enforced; use [`check_mixing_assumptions`] for that.
    pub fn from_matrix(w: Mat) -> Result<Self> {
        if !w.is_square() || w.nrows() == 0 {
            return Err(Error::InvalidParameter(
                "mixing matrix must be square and non-empty".into(),
            ));
        }
        let n = w.nrows();
        let eigen = sym_eigen(&w);
        let lambda2 = if n > 1 { eigen.values[1] } else { 1.0 };
        let lambda_n = eigen.values[n - 1];
        let neighbors = (0..n)
            .map(|i| (0..n).filter(|&j| j != i && w[(i, j)] != 0.0).collect())
            .collect();
        Ok(MixingMatrix {
            w,
            eigen,
            neighbors,
            lambda2,
            lambda_n,
            // single-node "network": consensus is immediate
            rho: if n > 1 { 1.0 - lambda2 } else { 1.0 },
        })
    }

    pub fn w(&self) -> &Mat {
        &self.w
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn eigen(&self) -> &SymEigen {
        &self.eigen
    }

    /// Off-diagonal neighbors of node `i` (nonzero weights).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Mean node degree, used for per-node bit accounting.
    pub fn mean_degree(&self) -> f64 {
        self.neighbors.iter().map(Vec::len).sum::<usize>() as f64 / self.n() as f64
    }

    /// `I - W`.
    pub fn laplacian(&self) -> Mat {
        Mat::identity(self.n(), self.n()) - &self.w
    }

    /// `1/2 (I + W)`, the lazy mixing matrix used by NIDS.
    pub fn lazy(&self) -> Mat {
        (Mat::identity(self.n(), self.n()) + &self.w) * 0.5
    }

    /// Moore–Penrose pseudoinverse of `I - W`, from the same eigenbasis.
    /// Directions with `|1 - lambda| <= 1e-10` are zeroed.
    pub fn laplacian_pinv(&self) -> Mat {
        self.eigen.apply_spectral(|lam| {
            let v = 1.0 - lam;
            if v.abs() <= NULL_EIGEN_TOL {
                0.0
            } else {
                1.0 / v
            }
        })
    }

    /// Largest eigenvalue magnitude on the disagreement subspace,
    /// `max(|lambda_2|, |lambda_n|)`: the per-step rate of exact gossip.
    pub fn gossip_rate(&self) -> f64 {
        self.lambda2.abs().max(self.lambda_n.abs())
    }
}

/// Metropolis weights: `w_ij = 1 / (1 + max(deg_i, deg_j))` on edges, the
/// diagonal takes the remaining mass.
pub fn metropolis_weights(g: &Graph) -> Result<MixingMatrix> {
    if !g.is_connected() {
        return Err(Error::InvalidParameter("graph is not connected".into()));
    }
    let n = g.n();
    let deg = g.degrees();
    let mut w = Mat::zeros(n, n);
    for &(i, j) in g.edges() {
        let v = 1.0 / (1.0 + deg[i].max(deg[j]) as f64);
        w[(i, j)] = v;
        w[(j, i)] = v;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    MixingMatrix::from_matrix(w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub residual: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<10} {} residual={:e} {}",
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.residual,
                c.detail
            )?;
        }
        Ok(())
    }
}

/// Checks symmetry, the consensus property `null(I-W) = span(1)` and the
/// spectral property `-I < W <= I`. Failures are reported, never raised.
pub fn check_mixing_assumptions(m: &MixingMatrix) -> ValidationReport {
    let w = m.w();
    let n = m.n();
    let asym = (w - w.transpose()).abs().max();

    let row_residual = (0..n)
        .map(|i| (1.0 - w.row(i).sum()).abs())
        .fold(0.0_f64, f64::max);
    let null_dim = m
        .eigen()
        .values
        .iter()
        .filter(|&&lam| (1.0 - lam).abs() <= NULL_EIGEN_TOL)
        .count();
    let rank = n - null_dim;
    let consensus_ok = row_residual < 1e-12 && rank + 1 == n;

    let top = m.eigen().values[0];
    let spectral_ok = m.lambda_n > -1.0 + 1e-12 && top <= 1.0 + 1e-12;
    let spectral_residual = (m.lambda_n + 1.0).min(1.0 - top);

    ValidationReport {
        checks: vec![
            Check {
                name: "symmetry",
                passed: asym < 1e-12,
                residual: asym,
                detail: "max |W - W^T|".into(),
            },
            Check {
                name: "consensus",
                passed: consensus_ok,
                residual: row_residual,
                detail: format!("||(I-W)1||_inf, rank(I-W)={rank} (need {})", n - 1),
            },
            Check {
                name: "spectral",
                passed: spectral_ok,
                residual: spectral_residual,
                detail: format!("lambda_1={top:.6}, lambda_n={:.6}", m.lambda_n),
            },
        ],
    }
}
