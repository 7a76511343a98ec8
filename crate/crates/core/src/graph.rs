//! Undirected communication topology: adjacency, oriented incidence and
//! Laplacian matrices, the Laplacian spectrum, and the weighted signum
//! inequality used by the consensus proofs.
//!
//! Node labels at the public boundary are 1-based (`1..=n`), matching the
//! scenario files. Internally everything is 0-based.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::dynamics::sgn;

/// λ₂ above this value declares the graph connected.
pub const CONNECTIVITY_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph must have at least one node")]
    Empty,
    #[error("edge ({0}, {1}) is a self-loop")]
    SelfLoop(usize, usize),
    #[error("edge ({0}, {1}) is listed more than once")]
    DuplicateEdge(usize, usize),
    #[error("edge ({a}, {b}) references a node outside 1..={n}")]
    OutOfRange { a: usize, b: usize, n: usize },
    #[error("weight matrix must have {expected} diagonal entries, got {got}")]
    WeightLength { expected: usize, got: usize },
    #[error("weight entry {index} is {value}; weights must be positive")]
    NonPositiveWeight { index: usize, value: f64 },
    #[error("vector has length {got}, graph has {expected} nodes")]
    VectorLength { expected: usize, got: usize },
}

/// An undirected, unweighted graph together with its matrices.
///
/// Each edge is oriented from the smaller to the larger node index, so the
/// incidence matrix is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    n: usize,
    /// 0-based `(tail, head)` with `tail < head`, in insertion order.
    edges: Vec<(usize, usize)>,
    adjacency: DMatrix<i64>,
    laplacian: DMatrix<i64>,
    incidence: DMatrix<i64>,
    neighbors: Vec<Vec<usize>>,
}

impl Topology {
    /// Build a topology from 1-based node pairs.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let mut adjacency = DMatrix::<i64>::zeros(n, n);
        let mut oriented = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a == 0 || b == 0 || a > n || b > n {
                return Err(GraphError::OutOfRange { a, b, n });
            }
            if a == b {
                return Err(GraphError::SelfLoop(a, b));
            }
            let (tail, head) = (a.min(b) - 1, a.max(b) - 1);
            if adjacency[(tail, head)] != 0 {
                return Err(GraphError::DuplicateEdge(a, b));
            }
            adjacency[(tail, head)] = 1;
            adjacency[(head, tail)] = 1;
            oriented.push((tail, head));
        }

        let m = oriented.len();
        let mut incidence = DMatrix::<i64>::zeros(n, m);
        for (k, &(tail, head)) in oriented.iter().enumerate() {
            incidence[(tail, k)] = -1;
            incidence[(head, k)] = 1;
        }

        let mut laplacian = -adjacency.clone();
        for i in 0..n {
            laplacian[(i, i)] = adjacency.row(i).sum();
        }

        let neighbors = (0..n)
            .map(|i| (0..n).filter(|&j| adjacency[(i, j)] != 0).collect())
            .collect();

        Ok(Self {
            n,
            edges: oriented,
            adjacency,
            laplacian,
            incidence,
            neighbors,
        })
    }

    pub fn complete(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (1..=n)
            .flat_map(|a| ((a + 1)..=n).map(move |b| (a, b)))
            .collect();
        Self::new(n, &edges)
    }

    pub fn path(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (1..n).map(|a| (a, a + 1)).collect();
        Self::new(n, &edges)
    }

    pub fn ring(n: usize) -> Result<Self, GraphError> {
        let mut edges: Vec<_> = (1..n).map(|a| (a, a + 1)).collect();
        if n > 2 {
            edges.push((n, 1));
        }
        Self::new(n, &edges)
    }

    pub fn star(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (2..=n).map(|b| (1, b)).collect();
        Self::new(n, &edges)
    }

    /// A random connected graph: a random spanning tree plus each remaining
    /// pair independently with probability `extra_edge_prob`.
    pub fn random_connected<R: Rng + ?Sized>(
        n: usize,
        extra_edge_prob: f64,
        rng: &mut R,
    ) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::Empty);
        }
        let mut order: Vec<usize> = (1..=n).collect();
        order.shuffle(rng);
        let mut present = vec![vec![false; n + 1]; n + 1];
        let mut edges = Vec::new();
        for k in 1..n {
            let parent = order[rng.gen_range(0..k)];
            let child = order[k];
            present[parent][child] = true;
            present[child][parent] = true;
            edges.push((parent, child));
        }
        for a in 1..=n {
            for b in (a + 1)..=n {
                if !present[a][b] && rng.gen_bool(extra_edge_prob.clamp(0.0, 1.0)) {
                    edges.push((a, b));
                }
            }
        }
        Self::new(n, &edges)
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// 0-based oriented edges `(tail, head)`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// 1-based edge list, as written in scenario files.
    pub fn edges_one_based(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|&(a, b)| (a + 1, b + 1)).collect()
    }

    pub fn adjacency(&self) -> &DMatrix<i64> {
        &self.adjacency
    }

    pub fn laplacian(&self) -> &DMatrix<i64> {
        &self.laplacian
    }

    pub fn incidence(&self) -> &DMatrix<i64> {
        &self.incidence
    }

    /// 0-based neighbor indices of node `i` (0-based), ascending.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn laplacian_f64(&self) -> DMatrix<f64> {
        self.laplacian.map(|v| v as f64)
    }

    pub fn incidence_f64(&self) -> DMatrix<f64> {
        self.incidence.map(|v| v as f64)
    }

    /// Breadth-first connectivity, independent of the eigensolver.
    pub fn is_connected_bfs(&self) -> bool {
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Laplacian spectrum summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSummary {
    /// All eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
    /// Algebraic connectivity (second-smallest eigenvalue; 0 for one node).
    pub lambda2: f64,
    pub lambda_max: f64,
    pub is_connected: bool,
}

impl SpectralSummary {
    /// `λ_max² / (2 λ₂²)`, the lower bound the κ gain must exceed.
    ///
    /// A single node has no coupling and the bound is 0. A disconnected
    /// graph yields `+∞`.
    pub fn kappa_threshold(&self) -> f64 {
        if self.eigenvalues.len() == 1 {
            return 0.0;
        }
        if !self.is_connected {
            return f64::INFINITY;
        }
        self.lambda_max * self.lambda_max / (2.0 * self.lambda2 * self.lambda2)
    }
}

/// Eigen-decompose the Laplacian with a symmetric solver.
pub fn spectral(topology: &Topology) -> SpectralSummary {
    let eig = SymmetricEigen::new(topology.laplacian_f64());
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(f64::total_cmp);
    let n = eigenvalues.len();
    let lambda_max = eigenvalues[n - 1];
    let (lambda2, is_connected) = if n == 1 {
        (0.0, true)
    } else {
        let l2 = eigenvalues[1].max(0.0);
        (l2, l2 > CONNECTIVITY_TOL)
    };
    SpectralSummary {
        eigenvalues,
        lambda2,
        lambda_max,
        is_connected,
    }
}

/// Both sides of `xᵀ L D W sgn(Dᵀx) ≥ λ₂(L) xᵀ D W sgn(Dᵀx)`.
///
/// `weights` holds the diagonal of `W`, one entry per edge in the
/// topology's edge order. Returns `(lhs, rhs)`.
pub fn lemma3_gap(
    x: &DVector<f64>,
    topology: &Topology,
    weights: &[f64],
) -> Result<(f64, f64), GraphError> {
    let n = topology.node_count();
    let m = topology.edge_count();
    if x.len() != n {
        return Err(GraphError::VectorLength {
            expected: n,
            got: x.len(),
        });
    }
    if weights.len() != m {
        return Err(GraphError::WeightLength {
            expected: m,
            got: weights.len(),
        });
    }
    if let Some((index, &value)) = weights.iter().enumerate().find(|(_, w)| !(**w > 0.0)) {
        return Err(GraphError::NonPositiveWeight { index, value });
    }

    // W sgn(Dᵀx), then D times that.
    let mut weighted = vec![0.0; m];
    for (k, &(tail, head)) in topology.edges().iter().enumerate() {
        weighted[k] = weights[k] * sgn(x[head] - x[tail]);
    }
    let mut dws = DVector::<f64>::zeros(n);
    for (k, &(tail, head)) in topology.edges().iter().enumerate() {
        dws[tail] -= weighted[k];
        dws[head] += weighted[k];
    }
    let lambda2 = spectral(topology).lambda2;
    let lx = topology.laplacian_f64() * x;
    let lhs = lx.dot(&dws);
    let rhs = lambda2 * x.dot(&dws);
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn k2_matrices() {
        let g = Topology::new(2, &[(1, 2)]).unwrap();
        assert_eq!(g.laplacian(), &dmatrix![1, -1; -1, 1]);
        assert_eq!(g.incidence(), &dmatrix![-1; 1]);
    }

    #[test]
    fn path3_laplacian() {
        let g = Topology::new(3, &[(1, 2), (2, 3)]).unwrap();
        assert_eq!(g.laplacian(), &dmatrix![1, -1, 0; -1, 2, -1; 0, -1, 1]);
    }

    #[test]
    fn k4_diagonal_and_factorization() {
        let g = Topology::complete(4).unwrap();
        assert_eq!(g.edge_count(), 6);
        for i in 0..4 {
            assert_eq!(g.laplacian()[(i, i)], 3);
        }
        // Entry-by-entry D Dᵀ.
        let d = g.incidence();
        for i in 0..4 {
            for j in 0..4 {
                let dd: i64 = (0..6).map(|k| d[(i, k)] * d[(j, k)]).sum();
                assert_eq!(dd, g.laplacian()[(i, j)]);
            }
        }
    }

    #[test]
    fn rejects_bad_edges() {
        assert_eq!(
            Topology::new(3, &[(2, 2)]).unwrap_err(),
            GraphError::SelfLoop(2, 2)
        );
        assert_eq!(
            Topology::new(3, &[(1, 2), (2, 1)]).unwrap_err(),
            GraphError::DuplicateEdge(2, 1)
        );
        assert!(matches!(
            Topology::new(4, &[(1, 5)]).unwrap_err(),
            GraphError::OutOfRange { a: 1, b: 5, n: 4 }
        ));
        assert!(matches!(
            Topology::new(4, &[(0, 1)]).unwrap_err(),
            GraphError::OutOfRange { .. }
        ));
        assert_eq!(Topology::new(0, &[]).unwrap_err(), GraphError::Empty);
    }

    #[test]
    fn orientation_is_small_to_large() {
        let g = Topology::new(3, &[(3, 1)]).unwrap();
        assert_eq!(g.edges(), &[(0, 2)]);
        assert_eq!(g.incidence()[(0, 0)], -1);
        assert_eq!(g.incidence()[(2, 0)], 1);
    }

    #[test]
    fn spectra_of_small_graphs() {
        let s = spectral(&Topology::complete(2).unwrap());
        assert!((s.lambda2 - 2.0).abs() < 1e-12);
        assert!((s.lambda_max - 2.0).abs() < 1e-12);

        let s = spectral(&Topology::path(3).unwrap());
        assert!((s.lambda2 - 1.0).abs() < 1e-12);
        assert!((s.lambda_max - 3.0).abs() < 1e-12);

        let s = spectral(&Topology::path(4).unwrap());
        assert!((s.lambda2 - (2.0 - 2f64.sqrt())).abs() < 1e-12);
        assert!((s.lambda_max - (2.0 + 2f64.sqrt())).abs() < 1e-12);
        assert!(s.eigenvalues[0].abs() < 1e-12);
    }

    #[test]
    fn path4_spectrum_matches_characteristic_polynomial() {
        // det(λI − L) for the 4-path is λ(λ³ − 6λ² + 10λ − 4).
        let cubic = |l: f64| l * l * l - 6.0 * l * l + 10.0 * l - 4.0;
        let s = spectral(&Topology::path(4).unwrap());
        for &l in &s.eigenvalues[1..] {
            assert!(cubic(l).abs() < 1e-10, "{l}");
        }
    }

    #[test]
    fn disconnected_graph_detected() {
        let g = Topology::new(4, &[(1, 2), (3, 4)]).unwrap();
        let s = spectral(&g);
        assert!(!s.is_connected);
        assert!(!g.is_connected_bfs());
        assert!(s.kappa_threshold().is_infinite());
    }

    #[test]
    fn single_node() {
        let g = Topology::new(1, &[]).unwrap();
        let s = spectral(&g);
        assert!(s.is_connected);
        assert_eq!(s.kappa_threshold(), 0.0);
    }

    #[test]
    fn kappa_thresholds() {
        let k4 = spectral(&Topology::complete(4).unwrap());
        assert!((k4.kappa_threshold() - 0.5).abs() < 1e-12);
        let p4 = spectral(&Topology::path(4).unwrap());
        let (l2, lm) = (2.0 - 2f64.sqrt(), 2.0 + 2f64.sqrt());
        let expected = lm * lm / (2.0 * l2 * l2);
        assert!((p4.kappa_threshold() - expected).abs() < 1e-9);
    }

    #[test]
    fn gap_consensus_vector_is_zero() {
        let g = Topology::complete(5).unwrap();
        let x = DVector::from_element(5, 3.7);
        let w = vec![2.0; g.edge_count()];
        assert_eq!(lemma3_gap(&x, &g, &w).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn gap_k2_equality() {
        // D = (−1, 1)ᵀ, x = (1, −1): Dᵀx = −2, sgn = −1,
        // D W sgn = (w, −w), L x = (2, −2): lhs = 4w; xᵀ D W sgn = 2w, λ₂ = 2.
        let g = Topology::complete(2).unwrap();
        let w = 1.75;
        let (lhs, rhs) = lemma3_gap(&DVector::from_vec(vec![1.0, -1.0]), &g, &[w]).unwrap();
        assert!((lhs - 4.0 * w).abs() < 1e-12);
        assert!((rhs - 4.0 * w).abs() < 1e-12);
    }

    #[test]
    fn gap_complete_graph_equality() {
        // On K_n, L D = n D and λ₂ = n, so both sides agree for any W.
        let g = Topology::complete(5).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.2, 2.5, 0.0, -0.4]);
        let w: Vec<f64> = (0..g.edge_count()).map(|k| 0.5 + k as f64).collect();
        let (lhs, rhs) = lemma3_gap(&x, &g, &w).unwrap();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn gap_can_be_negative_with_uneven_weights() {
        // Path 1-2-3, x = (1, 0.9, −1), W = diag(10, 1). Both edge signs are
        // equal, D W sgn = ±(10, −9, −1) and L x = (0.1, 1.8, −1.9):
        // lhs = −1.7·10 + 3.7·1 = −13.3, rhs = λ₂·(0.1·10 + 1.9·1) = 2.9.
        let g = Topology::path(3).unwrap();
        let x = DVector::from_vec(vec![1.0, 0.9, -1.0]);
        let (lhs, rhs) = lemma3_gap(&x, &g, &[10.0, 1.0]).unwrap();
        assert!((lhs - -13.3).abs() < 1e-9, "{lhs}");
        assert!((rhs - 2.9).abs() < 1e-9, "{rhs}");
    }

    #[test]
    fn gap_rejects_bad_weights() {
        let g = Topology::path(3).unwrap();
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            lemma3_gap(&x, &g, &[1.0, 0.0]),
            Err(GraphError::NonPositiveWeight { index: 1, .. })
        ));
        assert!(matches!(
            lemma3_gap(&x, &g, &[1.0]),
            Err(GraphError::WeightLength { .. })
        ));
    }

    #[test]
    fn random_graphs_are_connected() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=9 {
            for _ in 0..20 {
                let g = Topology::random_connected(n, 0.3, &mut rng).unwrap();
                assert!(g.is_connected_bfs());
                assert!(spectral(&g).is_connected);
            }
        }
    }

    #[test]
    fn ring_and_star() {
        assert_eq!(Topology::ring(5).unwrap().edge_count(), 5);
        assert_eq!(Topology::ring(2).unwrap().edge_count(), 1);
        let star = Topology::star(4).unwrap();
        assert_eq!(star.neighbors(0), &[1, 2, 3]);
    }
}
