//! Tanner graph of a linear block code.

use crate::gf2::Gf2Matrix;
use crate::polar::CodeSpec;

/// Bipartite graph with one edge per set entry of the parity-check matrix.
/// Edges are indexed in row-major order of `H_pc` (check-major), which is
/// also the order used for per-edge weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TannerGraph {
    variable_count: usize,
    check_count: usize,
    /// `(variable, check)` for each edge index.
    edges: Vec<(usize, usize)>,
    var_edges: Vec<Vec<usize>>,
    check_edges: Vec<Vec<usize>>,
}

impl TannerGraph {
    pub fn from_parity_check(h: &Gf2Matrix) -> Self {
        let (checks, vars) = (h.rows(), h.cols());
        let mut edges = Vec::new();
        let mut var_edges = vec![Vec::new(); vars];
        let mut check_edges = vec![Vec::new(); checks];
        for c in 0..checks {
            for v in 0..vars {
                if h.get(c, v) {
                    let e = edges.len();
                    edges.push((v, c));
                    var_edges[v].push(e);
                    check_edges[c].push(e);
                }
            }
        }
        Self {
            variable_count: vars,
            check_count: checks,
            edges,
            var_edges,
            check_edges,
        }
    }

    pub fn variable_count(&self) -> usize {
        self.variable_count
    }

    pub fn check_count(&self) -> usize {
        self.check_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn variable_edges(&self, v: usize) -> &[usize] {
        &self.var_edges[v]
    }

    pub fn check_edges(&self, c: usize) -> &[usize] {
        &self.check_edges[c]
    }

    pub fn contains(&self, variable: usize, check: usize) -> bool {
        self.var_edges
            .get(variable)
            .is_some_and(|es| es.iter().any(|&e| self.edges[e].1 == check))
    }
}

pub fn tanner_graph(code: &CodeSpec) -> TannerGraph {
    TannerGraph::from_parity_check(code.parity_check())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polar::polar_128_64;
    use crate::seed::rng_for;
    use rand::Rng;
    use std::collections::BTreeSet;

    #[test]
    fn hamming_has_twelve_edges() {
        let g = tanner_graph(&CodeSpec::hamming74());
        assert_eq!(g.edge_count(), 12);
        assert_eq!(g.variable_count(), 7);
        assert_eq!(g.check_count(), 3);
    }

    #[test]
    fn empty_parity_matrix() {
        let g = TannerGraph::from_parity_check(&Gf2Matrix::zeros(0, 5));
        assert_eq!(g.edge_count(), 0);
        assert_eq!(g.variable_count(), 5);
    }

    #[test]
    fn adjacency_is_support_of_parity_matrix() {
        let code = polar_128_64();
        let h = code.parity_check();
        let g = tanner_graph(&code);
        let support: BTreeSet<(usize, usize)> = (0..h.rows())
            .flat_map(|c| (0..h.cols()).filter(move |&v| h.get(c, v)).map(move |v| (v, c)))
            .collect();
        let edges: BTreeSet<(usize, usize)> = g.edges().iter().copied().collect();
        assert_eq!(support, edges);
        let mut rng = rng_for(4, &[]);
        for _ in 0..100 {
            let (v, c) = (rng.random_range(0..128), rng.random_range(0..64));
            assert_eq!(g.contains(v, c), h.get(c, v));
        }
        // edge order is row-major in H_pc
        let mut sorted = g.edges().to_vec();
        sorted.sort_by_key(|&(v, c)| (c, v));
        assert_eq!(sorted, g.edges());
    }
}
