//! Graph convolution over face adjacency.

use std::rc::Rc;

use super::graph::{Graph, SparseMatrix, Var};
use super::layers::Linear;
use super::params::{Bound, ParameterStore};
use super::tensor::Real;
use crate::geometry::AdjacencyGraph;

/// `D^-1/2 (A + I) D^-1/2` for a batch of graphs laid out block-diagonally.
///
/// Graph `b` occupies rows `b * stride .. b * stride + n_b`; remaining rows of each block
/// (padding) only carry their self-loop.
pub fn normalized_adjacency<F: Real>(graphs: &[&AdjacencyGraph], stride: usize) -> SparseMatrix<F> {
    let rows = graphs.len() * stride;
    let mut entries = Vec::new();
    for (b, adj) in graphs.iter().enumerate() {
        assert!(adj.n <= stride, "graph with {} nodes exceeds stride {stride}", adj.n);
        let off = b * stride;
        let inv_sqrt: Vec<f64> = (0..stride)
            .map(|i| 1.0 / ((adj.degree.get(i).copied().unwrap_or(0) + 1) as f64).sqrt())
            .collect();
        for i in 0..stride {
            entries.push((off + i, off + i, F::c(inv_sqrt[i] * inv_sqrt[i])));
        }
        for &(i, j) in &adj.edges {
            let w = F::c(inv_sqrt[i] * inv_sqrt[j]);
            entries.push((off + i, off + j, w));
            entries.push((off + j, off + i, w));
        }
    }
    SparseMatrix { rows, cols: rows, entries }
}

/// `SiLU(Â X W)`.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub linear: Linear,
}

impl GcnLayer {
    pub fn new<F: Real>(store: &mut ParameterStore<F>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self { linear: Linear::new(store, name, in_dim, out_dim, false) }
    }

    pub fn forward<F: Real>(&self, g: &Graph<F>, p: &Bound, x: Var, adj: Rc<SparseMatrix<F>>) -> Var {
        g.silu(self.linear.forward(g, p, g.spmm(adj, x)))
    }
}
