//! Named parameter storage and binding onto a graph.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::graph::{Gradients, Graph, Var};
use super::tensor::{Real, Tensor};
use crate::rng::SeedStream;

/// Index of a parameter inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Initialization scheme for a new parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
}

#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
}

/// Named parameters with deterministic initialization.
///
/// Each parameter draws from its own stream keyed by `(seed, name)`, so an `f32`
/// and an `f64` store built from the same seed hold the same values up to rounding.
#[derive(Clone, Debug)]
pub struct ParameterStore<F> {
    seed: u64,
    params: Vec<Parameter<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Real> ParameterStore<F> {
    pub fn new(seed: u64) -> Self {
        Self { seed, params: Vec::new(), index: HashMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a new parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let data: Vec<F> = match init {
            Init::Zeros => vec![F::zero(); rows * cols],
            Init::Ones => vec![F::one(); rows * cols],
            Init::TruncNormal(std) => {
                let mut rng = SeedStream::new(self.seed).rng(&format!("init/{name}"));
                (0..rows * cols)
                    .map(|_| loop {
                        let z: f64 = rng.sample(StandardNormal);
                        if z.abs() <= 2.0 {
                            break F::c(z * std);
                        }
                    })
                    .collect()
            }
        };
        let id = ParamId(self.params.len());
        self.params.push(Parameter { name: name.to_string(), value: Tensor::new(rows, cols, data) });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Same names and shapes with values converted to another precision.
    pub fn cast<G: Real>(&self) -> ParameterStore<G> {
        ParameterStore {
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), value: p.value.cast() })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Places every parameter on the graph as a differentiable leaf.
    pub fn bind(&self, g: &Graph<F>) -> Bound {
        Bound { vars: self.params.iter().map(|p| g.leaf(p.value.clone())).collect() }
    }

    /// Places every parameter on the graph as a constant (inference).
    pub fn bind_frozen(&self, g: &Graph<F>) -> Bound {
        Bound { vars: self.params.iter().map(|p| g.constant(p.value.clone())).collect() }
    }

    /// Collects per-parameter gradients; parameters unreachable from the loss get zeros.
    pub fn gradients(&self, bound: &Bound, grads: &mut Gradients<F>) -> Vec<Tensor<F>> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.rows, p.value.cols)))
            .collect()
    }
}

/// Graph variables for every parameter of a store, in registration order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_precision_independent() {
        let mut a = ParameterStore::<f32>::new(3);
        let mut b = ParameterStore::<f64>::new(3);
        let ia = a.add("w", 4, 5, Init::TruncNormal(0.02));
        let ib = b.add("w", 4, 5, Init::TruncNormal(0.02));
        for (&x, &y) in a.get(ia).data.iter().zip(&b.get(ib).data) {
            assert_eq!(x, y as f32);
            assert!(y.abs() <= 0.04);
        }
        let z = a.add("z", 2, 2, Init::Zeros);
        assert!(a.get(z).data.iter().all(|&x| x == 0.0));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::<f32>::new(0);
        s.add("a", 1, 1, Init::Zeros);
        s.add("a", 1, 1, Init::Zeros);
    }
}
