//! Communication topologies and Laplacian mixing matrices.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::io::BufRead;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

/// Undirected simple graph on agents `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

impl Topology {
    /// Builds a topology from unordered pairs. Duplicate pairs (in either
    /// orientation) are merged; self-loops and out-of-range agents are rejected.
    pub fn new(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Topology("agent count must be positive".into()));
        }
        let mut edges = BTreeSet::new();
        for (i, j) in pairs {
            if i == j {
                return Err(Error::Topology(format!("self-loop at agent {i}")));
            }
            if i >= n || j >= n {
                return Err(Error::Topology(format!("edge ({i}, {j}) references an agent outside [0, {n})")));
            }
            edges.insert((i.min(j), i.max(j)));
        }
        let mut adjacency = vec![Vec::new(); n];
        for &(i, j) in &edges {
            adjacency[i].push(j);
            adjacency[j].push(i);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Ok(Self { n, edges, adjacency })
    }

    /// Ring with chords: agent `i` is linked to `(i ± j) mod n` for `j = 1..=chord_span`.
    pub fn ring_chords(n: usize, chord_span: usize) -> Result<Self> {
        if chord_span == 0 {
            return Err(Error::Topology("chord span must be at least 1".into()));
        }
        if n <= 2 * chord_span {
            return Err(Error::Topology(format!(
                "ring of {n} agents cannot hold chords up to offset {chord_span} (need n > {})",
                2 * chord_span
            )));
        }
        let pairs = (0..n).flat_map(|i| (1..=chord_span).map(move |j| (i, (i + j) % n)));
        Self::new(n, pairs)
    }

    pub fn complete(n: usize) -> Result<Self> {
        let pairs = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
        Self::new(n, pairs)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Edges as `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &self.adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == self.n
    }

    /// Edge-list text: one `i j` pair per line, zero-indexed. A leading
    /// `# n <count>` line records the agent count so isolated agents survive a
    /// round trip.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("# n {}\n", self.n);
        for (i, j) in self.edges() {
            let _ = writeln!(out, "{i} {j}");
        }
        out
    }

    /// Parses the edge-list format. Without a `# n` header the agent count is
    /// inferred as one more than the largest index.
    pub fn from_edge_list(reader: impl BufRead) -> Result<Self> {
        let mut declared_n = None;
        let mut pairs = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            let lineno = lineno + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut parts = rest.split_whitespace();
                if parts.next() == Some("n") {
                    let n = parts
                        .next()
                        .and_then(|s| s.parse::<usize>().ok())
                        .ok_or_else(|| Error::Parse { line: lineno, msg: "malformed `# n` header".into() })?;
                    declared_n = Some(n);
                }
                continue;
            }
            let mut parts = line.split_whitespace();
            let mut next = || -> Result<usize> {
                parts
                    .next()
                    .ok_or_else(|| Error::Parse { line: lineno, msg: "expected two agent indices".into() })?
                    .parse::<usize>()
                    .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })
            };
            let i = next()?;
            let j = next()?;
            if parts.next().is_some() {
                return Err(Error::Parse { line: lineno, msg: "trailing tokens after edge".into() });
            }
            pairs.push((i, j));
        }
        let inferred = pairs.iter().map(|&(i, j)| i.max(j) + 1).max().unwrap_or(0);
        let n = declared_n.unwrap_or(inferred);
        Self::new(n, pairs)
    }

    /// SHA-256 of the canonical edge list, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_edge_list().as_bytes()))
    }
}

/// Symmetric doubly stochastic mixing matrix with its spectral gap `rho`
/// and `phi = ||I - W||_2`.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    w: DMatrix<f64>,
    rho: f64,
    phi: f64,
}

impl WeightMatrix {
    /// Validates a user-supplied matrix: symmetry and row sums within 1e-12,
    /// entries in `[0, 1]`, and a positive spectral gap.
    pub fn from_dense(w: DMatrix<f64>) -> Result<Self> {
        if !w.is_square() || w.nrows() == 0 {
            return Err(Error::Weights("matrix must be square and non-empty".into()));
        }
        for v in w.iter() {
            if !v.is_finite() || *v < 0.0 || *v > 1.0 {
                return Err(Error::Weights(format!("entry {v} outside [0, 1]")));
            }
        }
        let (rs, _) = stochasticity_errors(&w);
        if rs > STOCHASTIC_TOL {
            return Err(Error::Weights(format!("row sums deviate from 1 by {rs:e}")));
        }
        let (rho, phi) = spectral_quantities(&w)?;
        if rho <= 0.0 {
            return Err(Error::Weights("spectral gap is zero".into()));
        }
        Ok(Self { w, rho, phi })
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    /// Largest absolute deviation of `W` from `W^T`, of row sums from 1 and of
    /// column sums from 1.
    pub fn invariant_errors(&self) -> (f64, f64, f64) {
        let sym = symmetry_error(&self.w);
        let (rows, cols) = stochasticity_errors(&self.w);
        (sym, rows, cols)
    }
}

/// `W = I - L / iota` for the graph Laplacian `L`. `iota` defaults to
/// `d_max + 1` and must exceed the maximum degree.
pub fn laplacian_weights(topology: &Topology, iota: Option<f64>) -> Result<WeightMatrix> {
    let d_max = topology.max_degree() as f64;
    let iota = iota.unwrap_or(d_max + 1.0);
    if !(iota > d_max) || !iota.is_finite() {
        return Err(Error::Weights(format!("iota = {iota} must exceed the maximum degree {d_max}")));
    }
    if !topology.is_connected() {
        return Err(Error::Weights("topology is disconnected (spectral gap would be 0)".into()));
    }
    let n = topology.n();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for &j in topology.neighbors(i) {
            w[(i, j)] = 1.0 / iota;
        }
        w[(i, i)] = 1.0 - topology.degree(i) as f64 / iota;
    }
    let (rho, phi) = spectral_quantities(&w)?;
    Ok(WeightMatrix { w, rho, phi })
}

/// Spectral gap `1 - |lambda_2|` (eigenvalues ordered by magnitude) and
/// `||I - W||_2` of a symmetric matrix. A 1x1 matrix has no second
/// eigenvalue; its gap is reported as 1.
pub fn spectral_quantities(w: &DMatrix<f64>) -> Result<(f64, f64)> {
    if !w.is_square() {
        return Err(Error::Weights("matrix must be square".into()));
    }
    let asym = symmetry_error(w);
    if asym > STOCHASTIC_TOL {
        return Err(Error::Weights(format!("matrix is not symmetric (max |w_ij - w_ji| = {asym:e})")));
    }
    let eig = w.clone().symmetric_eigen();
    let mut mags: Vec<f64> = eig.eigenvalues.iter().map(|l| l.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let rho = if mags.len() < 2 { 1.0 } else { 1.0 - mags[1] };
    let phi = eig.eigenvalues.iter().map(|l| (1.0 - l).abs()).fold(0.0, f64::max);
    Ok((rho, phi))
}

fn symmetry_error(w: &DMatrix<f64>) -> f64 {
    let n = w.nrows();
    let mut err: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            err = err.max((w[(i, j)] - w[(j, i)]).abs());
        }
    }
    err
}

fn stochasticity_errors(w: &DMatrix<f64>) -> (f64, f64) {
    let rows = w.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
    let cols = w.column_iter().map(|c| (c.sum() - 1.0).abs()).fold(0.0, f64::max);
    (rows, cols)
}
