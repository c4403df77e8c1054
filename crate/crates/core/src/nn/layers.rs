//! Linear maps, normalizations, SwiGLU and the sandwich residual wrapper.

use super::graph::{Graph, Var};
use super::params::{Bound, Init, ParamId, ParameterStore};
use super::tensor::Real;

/// Projection std used for every freshly created weight matrix.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Real>(store: &mut ParameterStore<F>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self::with_init(store, name, in_dim, out_dim, bias, Init::TruncNormal(INIT_STD))
    }

    /// All-zero weights and bias.
    pub fn zeroed<F: Real>(store: &mut ParameterStore<F>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self::with_init(store, name, in_dim, out_dim, bias, Init::Zeros)
    }

    pub fn with_init<F: Real>(
        store: &mut ParameterStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let weight = store.add(&format!("{name}.weight"), in_dim, out_dim, init);
        let bias = bias.then(|| store.add(&format!("{name}.bias"), 1, out_dim, Init::Zeros));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<F: Real>(&self, g: &Graph<F>, p: &Bound, x: Var) -> Var {
        g.linear(x, p.var(self.weight), self.bias.map(|b| p.var(b)))
    }
}

#[derive(Clone, Debug)]
pub struct RmsNorm {
    pub gain: ParamId,
    pub eps: f64,
}

impl RmsNorm {
    pub fn new<F: Real>(store: &mut ParameterStore<F>, name: &str, dim: usize) -> Self {
        Self { gain: store.add(&format!("{name}.gain"), 1, dim, Init::Ones), eps: 1e-6 }
    }

    pub fn forward<F: Real>(&self, g: &Graph<F>, p: &Bound, x: Var) -> Var {
        g.rms_norm(x, p.var(self.gain), F::c(self.eps))
    }
}

/// Hidden width for a SwiGLU feed-forward: `8d/3` rounded to the nearest multiple of 8.
pub fn swiglu_hidden(dim: usize) -> usize {
    let raw = 8.0 * dim as f64 / 3.0;
    (((raw / 8.0).round() as usize).max(1)) * 8
}

/// `down(silu(gate(x)) * up(x))`.
#[derive(Clone, Debug)]
pub struct SwiGlu {
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
}

impl SwiGlu {
    pub fn new<F: Real>(store: &mut ParameterStore<F>, name: &str, dim: usize) -> Self {
        let hidden = swiglu_hidden(dim);
        Self {
            gate: Linear::new(store, &format!("{name}.gate"), dim, hidden, false),
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, false),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, false),
        }
    }

    pub fn forward<F: Real>(&self, g: &Graph<F>, p: &Bound, x: Var) -> Var {
        let gate = g.silu(self.gate.forward(g, p, x));
        let up = self.up.forward(g, p, x);
        self.down.forward(g, p, g.mul(gate, up))
    }
}

/// Normalization before and after a sublayer, inside the residual branch:
/// `x + post(sublayer(pre(x)))`.
#[derive(Clone, Debug)]
pub struct Sandwich {
    pub pre: RmsNorm,
    pub post: RmsNorm,
}

impl Sandwich {
    pub fn new<F: Real>(store: &mut ParameterStore<F>, name: &str, dim: usize) -> Self {
        Self {
            pre: RmsNorm::new(store, &format!("{name}.pre_norm"), dim),
            post: RmsNorm::new(store, &format!("{name}.post_norm"), dim),
        }
    }

    pub fn forward<F: Real>(&self, g: &Graph<F>, p: &Bound, x: Var, sublayer: impl FnOnce(Var) -> Var) -> Var {
        let h = sublayer(self.pre.forward(g, p, x));
        let h = self.post.forward(g, p, h);
        g.add(x, h)
    }
}
