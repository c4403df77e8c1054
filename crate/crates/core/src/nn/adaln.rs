//! Conditioning by adaptive normalization with zero-initialized modulation.

use super::graph::{Graph, Var};
use super::layers::Linear;
use super::params::{Bound, ParameterStore};
use super::tensor::Real;

/// `Linear(SiLU(cond))` split into `chunks` modulation vectors of width `dim`.
///
/// The projection starts at zero, so every shift, scale and gate is zero until training moves it.
#[derive(Clone, Debug)]
pub struct AdaLn {
    pub proj: Linear,
    pub chunks: usize,
    pub dim: usize,
}

impl AdaLn {
    pub fn new<F: Real>(store: &mut ParameterStore<F>, name: &str, cond_dim: usize, dim: usize, chunks: usize) -> Self {
        Self { proj: Linear::zeroed(store, name, cond_dim, chunks * dim, true), chunks, dim }
    }

    /// `cond` holds one row per sample; `rows_per_sample[b]` copies of row `b` are emitted so the
    /// chunks line up with the token rows of a padded batch.
    pub fn forward<F: Real>(&self, g: &Graph<F>, p: &Bound, cond: Var, rows_per_sample: &[usize]) -> Vec<Var> {
        let m = self.proj.forward(g, p, g.silu(cond));
        let m = g.repeat_rows(m, rows_per_sample);
        (0..self.chunks).map(|c| g.slice_cols(m, c * self.dim, self.dim)).collect()
    }
}

/// `x * (1 + scale) + shift`.
pub fn modulate<F: Real>(g: &Graph<F>, x: Var, shift: Var, scale: Var) -> Var {
    g.add(g.add(x, g.mul(x, scale)), shift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    #[test]
    fn fresh_modulation_is_zero_and_block_is_identity() {
        let mut store = ParameterStore::<f64>::new(1);
        let ada = AdaLn::new(&mut store, "ada", 4, 3, 3);
        let g = Graph::new();
        let p = store.bind(&g);
        let cond = g.constant(Tensor::from_f64(2, 4, &[0.5, -1.0, 2.0, 0.1, 3.0, 0.2, -0.7, 1.1]));
        let chunks = ada.forward(&g, &p, cond, &[2, 1]);
        for &c in &chunks {
            assert_eq!(g.shape(c), (3, 3));
            assert!(g.value(c).data.iter().all(|&v| v == 0.0));
        }
        let x = g.constant(Tensor::from_f64(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let branch = g.constant(Tensor::full(3, 3, 42.0));
        let out = g.add(x, g.mul(chunks[2], branch));
        assert_eq!(*g.value(out), *g.value(x));
        assert_eq!(*g.value(modulate(&g, x, chunks[0], chunks[1])), *g.value(x));
    }

    #[test]
    fn zero_condition_yields_bias() {
        let mut store = ParameterStore::<f64>::new(1);
        let ada = AdaLn::new(&mut store, "ada", 2, 2, 2);
        store.get_mut(ada.proj.weight).data.iter_mut().for_each(|w| *w = 0.7);
        let bias = ada.proj.bias.unwrap();
        store.get_mut(bias).data = vec![0.1, 0.2, 0.3, 0.4];
        let g = Graph::new();
        let p = store.bind(&g);
        let chunks = ada.forward(&g, &p, g.constant(Tensor::zeros(1, 2)), &[1]);
        assert_eq!(g.value(chunks[0]).data, vec![0.1, 0.2]);
        assert_eq!(g.value(chunks[1]).data, vec![0.3, 0.4]);
    }
}
