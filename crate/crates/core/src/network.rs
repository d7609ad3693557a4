//! Communication graphs and gossip mixing.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{rng_stream, sym_eig, Matrix, GRAPH_STREAM};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Topology {
    Ring,
    Complete,
    ErdosRenyi(f64),
}

/// Undirected simple graph on `0..n`; edges stored as `(i, j)` with `i < j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Graph {
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!("graph needs at least 2 nodes, got {n}")));
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i == j {
                return Err(Error::invalid(format!("self-loop at node {i}")));
            }
            if i >= n || j >= n {
                return Err(Error::invalid(format!("edge ({i}, {j}) out of range for n={n}")));
            }
            set.insert((i.min(j), i.max(j)));
        }
        Ok(Self { n, edges: set })
    }

    /// Deterministic in `(topology, n, seed)`. Erdős–Rényi samples that come
    /// out disconnected get ring edges `(i, i+1)` added in order until the
    /// graph is connected.
    pub fn build(topology: Topology, n: usize, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!("graph needs at least 2 nodes, got {n}")));
        }
        let mut g = Graph {
            n,
            edges: BTreeSet::new(),
        };
        match topology {
            Topology::Ring => {
                for i in 0..n {
                    g.insert(i, (i + 1) % n);
                }
            }
            Topology::Complete => {
                for i in 0..n {
                    for j in i + 1..n {
                        g.insert(i, j);
                    }
                }
            }
            Topology::ErdosRenyi(p) => {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::invalid(format!("edge probability must be in (0, 1], got {p}")));
                }
                let mut rng = rng_stream(seed, GRAPH_STREAM);
                for i in 0..n {
                    for j in i + 1..n {
                        if rng.random::<f64>() < p {
                            g.insert(i, j);
                        }
                    }
                }
                let mut k = 0;
                while !g.is_connected() {
                    g.insert(k, (k + 1) % n);
                    k += 1;
                }
            }
        }
        Ok(g)
    }

    fn insert(&mut self, i: usize, j: usize) {
        if i != j {
            self.edges.insert((i.min(j), i.max(j)));
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
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
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Edge-list text: `n` on the first line, then one `i j` per line.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{}\n", self.n);
        for &(i, j) in &self.edges {
            let _ = writeln!(out, "{i} {j}");
        }
        out
    }

    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::invalid("edge list is empty"))?;
        let n: usize = first
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("line 1: bad node count `{}`", first.trim())))?;
        let mut edges = Vec::new();
        for (lineno, line) in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let parse = |s: &str| s.parse::<usize>().ok();
            match parts.as_slice() {
                [a, b] => match (parse(a), parse(b)) {
                    (Some(i), Some(j)) => edges.push((i, j)),
                    _ => return Err(Error::invalid(format!("line {}: bad edge `{line}`", lineno + 1))),
                },
                _ => return Err(Error::invalid(format!("line {}: expected `i j`", lineno + 1))),
            }
        }
        Graph::new(n, edges)
    }
}

/// Symmetric doubly stochastic gossip matrix with its second-largest
/// singular value cached.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    w: Matrix,
    sigma2: f64,
    t: usize,
    /// Sparse rows: `(j, W_ij)` for every nonzero entry, ascending `j`.
    rows: Vec<Vec<(usize, f64)>>,
}

impl MixingMatrix {
    /// Metropolis constant edge weights:
    /// `W_ij = 1 / (1 + max(deg_i, deg_j))` on edges, diagonal fills each row to 1.
    pub fn metropolis(g: &Graph) -> Result<Self> {
        if !g.is_connected() {
            return Err(Error::invalid("metropolis weights need a connected graph"));
        }
        let n = g.n();
        let deg = g.degrees();
        let mut w = Matrix::zeros(n, n);
        for (i, j) in g.edges() {
            let v = 1.0 / (1.0 + deg[i].max(deg[j]) as f64);
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
        for i in 0..n {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
            w[(i, i)] = 1.0 - off;
        }
        Self::from_weights(w)
    }

    /// Validates a user-supplied weight matrix.
    pub fn from_weights(w: Matrix) -> Result<Self> {
        let n = w.nrows();
        if !w.is_square() || n == 0 {
            return Err(Error::invalid("mixing matrix must be square and non-empty"));
        }
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                let v = w[(i, j)];
                if !(v >= 0.0) {
                    return Err(Error::invalid(format!("negative weight at ({i}, {j})")));
                }
                if (v - w[(j, i)]).abs() > 1e-15 {
                    return Err(Error::invalid("mixing matrix is not symmetric"));
                }
                row += v;
            }
            if (row - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(format!("row {i} sums to {row}")));
            }
            if !(w[(i, i)] > 0.0) {
                return Err(Error::invalid(format!("diagonal entry {i} is not positive")));
            }
        }
        let eig = sym_eig(&w)?;
        if eig.values[0] <= -1.0 + 1e-10 || eig.values[n - 1] > 1.0 + 1e-10 {
            return Err(Error::invalid("mixing matrix eigenvalues must lie in (-1, 1]"));
        }
        // W is symmetric, so singular values are |eigenvalues|.
        let mut sv: Vec<f64> = eig.values.iter().map(|v| v.abs()).collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let sigma2 = if n > 1 { sv[1] } else { 0.0 };
        if sigma2 >= 1.0 - 1e-12 {
            return Err(Error::invalid("second singular value is 1 (graph disconnected?)"));
        }
        let rows = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| w[(i, j)] != 0.0)
                    .map(|j| (j, w[(i, j)]))
                    .collect()
            })
            .collect();
        Ok(Self { w, sigma2, t: 1, rows })
    }

    /// The trivial `1×1` mixing matrix of a single agent.
    pub fn single() -> Self {
        Self {
            w: Matrix::identity(1, 1),
            sigma2: 0.0,
            t: 1,
            rows: vec![vec![(0, 1.0)]],
        }
    }

    pub fn with_steps(mut self, t: usize) -> Result<Self> {
        if t == 0 {
            return Err(Error::invalid("consensus steps t must be at least 1"));
        }
        self.t = t;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.w
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    /// One gossip round: `y_i = Σ_j W_ij x_j`, summed in ascending `j`.
    fn mix_once(&self, blocks: &[Matrix]) -> Vec<Matrix> {
        self.rows
            .par_iter()
            .map(|row| {
                let mut acc = Matrix::zeros(blocks[0].nrows(), blocks[0].ncols());
                for &(j, wij) in row {
                    acc.zip_apply(&blocks[j], |a, b| *a += wij * b);
                }
                acc
            })
            .collect()
    }

    /// Applies `W^steps` blockwise as `steps` successive single rounds.
    pub fn mix(&self, blocks: &[Matrix], steps: usize) -> Result<Vec<Matrix>> {
        if blocks.len() != self.n() {
            return Err(Error::invalid(format!(
                "mix: got {} blocks for {} agents",
                blocks.len(),
                self.n()
            )));
        }
        let shape = blocks[0].shape();
        if blocks.iter().any(|b| b.shape() != shape) {
            return Err(Error::invalid("mix: blocks differ in shape"));
        }
        let mut cur = blocks.to_vec();
        for _ in 0..steps {
            cur = self.mix_once(&cur);
        }
        Ok(cur)
    }

    /// Applies `W^t` with the configured `t`.
    pub fn apply(&self, blocks: &[Matrix]) -> Result<Vec<Matrix>> {
        self.mix(blocks, self.t)
    }
}

/// Smallest integer `t` with
/// `t > max{⌈log_σ₂(γ / (24 √n ζ))⌉, ⌈log_σ₂(1/2)⌉}`; returns 1 for `σ₂ = 0`.
pub fn consensus_radius_t(sigma2: f64, gamma: f64, zeta: f64, n: usize) -> usize {
    if sigma2 <= 0.0 {
        return 1;
    }
    let log_base = |v: f64| v.ln() / sigma2.ln();
    let a = log_base(gamma / (24.0 * (n as f64).sqrt() * zeta)).ceil();
    let b = log_base(0.5).ceil();
    let bound = a.max(b).max(0.0);
    bound as usize + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_matrix, rng_from_seed};

    fn mean(blocks: &[Matrix]) -> Matrix {
        let mut acc = Matrix::zeros(blocks[0].nrows(), blocks[0].ncols());
        for b in blocks {
            acc += b;
        }
        acc / blocks.len() as f64
    }

    fn deviation(blocks: &[Matrix]) -> f64 {
        let m = mean(blocks);
        blocks.iter().map(|b| (b - &m).norm_squared()).sum::<f64>().sqrt()
    }

    #[test]
    fn ring_and_complete_shapes() {
        let g = Graph::build(Topology::Ring, 8, 0).unwrap();
        assert_eq!(g.edge_count(), 8);
        assert!(g.degrees().iter().all(|&d| d == 2));
        let g = Graph::build(Topology::Complete, 4, 0).unwrap();
        assert_eq!(g.edge_count(), 6);
    }

    #[test]
    fn erdos_renyi_reproducible_and_connected() {
        let a = Graph::build(Topology::ErdosRenyi(0.6), 8, 7).unwrap();
        let b = Graph::build(Topology::ErdosRenyi(0.6), 8, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.is_connected());
        assert!((7..=28).contains(&a.edge_count()));
        // sparse samples need repair
        for seed in 0..50 {
            let g = Graph::build(Topology::ErdosRenyi(0.05), 10, seed).unwrap();
            assert!(g.is_connected());
        }
        assert!(Graph::build(Topology::ErdosRenyi(0.0), 4, 0).is_err());
    }

    #[test]
    fn edge_list_roundtrip() {
        let g = Graph::build(Topology::ErdosRenyi(0.4), 9, 3).unwrap();
        let back = Graph::parse_edge_list(&g.to_edge_list()).unwrap();
        assert_eq!(g, back);
        assert!(Graph::parse_edge_list("3\n0 0\n").is_err());
        assert!(Graph::parse_edge_list("3\n0 x\n").is_err());
    }

    #[test]
    fn metropolis_complete_is_uniform() {
        let g = Graph::build(Topology::Complete, 4, 0).unwrap();
        let m = MixingMatrix::metropolis(&g).unwrap();
        assert!(m.weights().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(m.sigma2() < 1e-12);
    }

    #[test]
    fn metropolis_ring8_spectrum() {
        let g = Graph::build(Topology::Ring, 8, 0).unwrap();
        let m = MixingMatrix::metropolis(&g).unwrap();
        assert!((m.weights()[(0, 1)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.weights()[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        // circulant eigenvalues 1/3 + 2/3 cos(2πk/8)
        let expected = 1.0 / 3.0 + 2.0 / 3.0 * (std::f64::consts::PI / 4.0).cos();
        assert!((m.sigma2() - expected).abs() < 1e-10);
        assert!((expected - 0.8047).abs() < 1e-4);
    }

    #[test]
    fn metropolis_rejects_disconnected() {
        let g = Graph::new(4, [(0, 1), (2, 3)]).unwrap();
        assert!(MixingMatrix::metropolis(&g).is_err());
    }

    #[test]
    fn mix_cases() {
        let mut rng = rng_from_seed(1);
        let x = gaussian_matrix(3, 2, &mut rng);
        let ring = MixingMatrix::metropolis(&Graph::build(Topology::Ring, 8, 0).unwrap()).unwrap();
        let same = vec![x.clone(); 8];
        let out = ring.mix(&same, 3).unwrap();
        assert!(out.iter().all(|b| (b - &x).norm() < 1e-14));

        let complete =
            MixingMatrix::metropolis(&Graph::build(Topology::Complete, 5, 0).unwrap()).unwrap();
        let blocks: Vec<Matrix> = (0..5).map(|_| gaussian_matrix(3, 2, &mut rng)).collect();
        let out = complete.mix(&blocks, 1).unwrap();
        let avg = mean(&blocks);
        assert!(out.iter().all(|b| (b - &avg).norm() < 1e-14));

        assert!(ring.mix(&blocks, 1).is_err());
    }

    #[test]
    fn mix_matches_dense_power() {
        let mut rng = rng_from_seed(2);
        let ring = MixingMatrix::metropolis(&Graph::build(Topology::Ring, 8, 0).unwrap()).unwrap();
        let blocks: Vec<Matrix> = (0..8).map(|_| gaussian_matrix(4, 3, &mut rng)).collect();
        let out = ring.mix(&blocks, 3).unwrap();
        let w3 = ring.weights() * ring.weights() * ring.weights();
        for i in 0..8 {
            let mut dense = Matrix::zeros(4, 3);
            for j in 0..8 {
                dense += &blocks[j] * w3[(i, j)];
            }
            assert!((&out[i] - dense).norm() < 1e-12);
        }
    }

    #[test]
    fn radius_examples() {
        assert_eq!(consensus_radius_t(0.5, 1e6, 1.0, 4), 2);
        // ⌈log_σ₂(1/2)⌉ = 1 for any small positive σ₂, so the strict bound gives 2
        assert_eq!(consensus_radius_t(1e-300, 0.5, 1.0, 4), 2);
        assert_eq!(consensus_radius_t(0.0, 0.5, 1.0, 4), 1);
        // direct scan oracle for the ring-of-8 case
        let (s, gamma, zeta, n) = (0.8047_f64, 0.5, 2.0 * 5f64.sqrt(), 8usize);
        let target = gamma / (24.0 * (n as f64).sqrt() * zeta);
        let ceil_a = (1..).find(|&t| s.powi(t) <= target).unwrap();
        let ceil_b = (1..).find(|&t| s.powi(t) <= 0.5).unwrap();
        let expected = ceil_a.max(ceil_b) as usize + 1;
        assert_eq!(consensus_radius_t(s, gamma, zeta, n), expected);
        assert_eq!(expected, 31);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]
            #[test]
            fn metropolis_invariants(seed in any::<u64>(), n in 2usize..16, p in 0.05f64..1.0) {
                let g = Graph::build(Topology::ErdosRenyi(p), n, seed).unwrap();
                let m = MixingMatrix::metropolis(&g).unwrap();
                let w = m.weights();
                for i in 0..n {
                    prop_assert!((w.row(i).sum() - 1.0).abs() <= 1e-12);
                    prop_assert!(w[(i, i)] > 0.0);
                    for j in 0..n {
                        prop_assert!(w[(i, j)] >= 0.0);
                        prop_assert_eq!(w[(i, j)], w[(j, i)]);
                    }
                }
                prop_assert!(m.sigma2() >= 0.0 && m.sigma2() < 1.0);
            }

            #[test]
            fn mix_preserves_mean_and_contracts(seed in any::<u64>(), t in 1usize..5) {
                let g = Graph::build(Topology::ErdosRenyi(0.4), 7, seed).unwrap();
                let m = MixingMatrix::metropolis(&g).unwrap();
                let mut rng = rng_from_seed(seed);
                let blocks: Vec<Matrix> = (0..7).map(|_| gaussian_matrix(3, 2, &mut rng)).collect();
                let out = m.mix(&blocks, t).unwrap();
                prop_assert!((mean(&out) - mean(&blocks)).norm() <= 1e-12);
                prop_assert!(deviation(&out) <= m.sigma2().powi(t as i32) * deviation(&blocks) + 1e-12);
            }
        }
    }
}
