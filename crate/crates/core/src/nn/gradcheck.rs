//! Central finite-difference verification of analytic gradients.

use std::fmt;

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{Graph, Var};
use super::params::{Bound, ParamId, ParameterStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::SeedStream;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Entries per parameter tensor to perturb; larger tensors are subsampled.
    pub max_entries: usize,
    /// Denominator floor: gradients whose combined norm is below this are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, max_entries: 24, floor: 1e-5, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub rel_err: f64,
    pub checked: usize,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn failures(&self, tol: f64) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| !(p.rel_err <= tol)).collect()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(f, "{:<40} rel_err={:.3e} entries={} |grad|={:.3e}", p.name, p.rel_err, p.checked, p.analytic_norm)?;
        }
        Ok(())
    }
}

fn eval_loss<L>(store: &ParameterStore<f64>, loss: &L) -> Result<f64>
where
    L: Fn(&Graph<f64>, &Bound) -> Result<Var>,
{
    let g = Graph::new();
    let p = store.bind_frozen(&g);
    let v = loss(&g, &p)?;
    let value = g.value(v);
    if value.len() != 1 {
        return Err(Error::validation(format!("loss must be scalar, got shape {:?}", value.shape())));
    }
    Ok(value.item())
}

/// Compares analytic gradients of `loss` with central differences for every parameter of `store`.
///
/// Parameters are perturbed in place and restored afterwards.
pub fn grad_check<L>(store: &mut ParameterStore<f64>, loss: L, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    L: Fn(&Graph<f64>, &Bound) -> Result<Var>,
{
    let g = Graph::new();
    let bound = store.bind(&g);
    let out = loss(&g, &bound)?;
    let base = g.value(out).item();
    if !base.is_finite() {
        return Err(Error::numeric(format!("grad check: loss is not finite ({base})")));
    }
    let mut grads = g.backward(out);
    let analytic = store.gradients(&bound, &mut grads);
    drop(g);

    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let mut report = GradCheckReport::default();
    for (id, grad) in ids.into_iter().zip(analytic) {
        let name = store.name(id).to_string();
        if !grad.all_finite() {
            return Err(Error::numeric(format!("grad check: analytic gradient of {name} is not finite")));
        }
        let n = grad.len();
        let entries: Vec<usize> = if n <= cfg.max_entries {
            (0..n).collect()
        } else {
            let mut rng = SeedStream::new(cfg.seed).rng(&format!("gradcheck/{name}"));
            let mut e = sample(&mut rng, n, cfg.max_entries).into_vec();
            e.sort_unstable();
            e
        };
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for &i in &entries {
            let orig = store.get(id).data[i];
            store.get_mut(id).data[i] = orig + cfg.eps;
            let plus = eval_loss(store, &loss);
            store.get_mut(id).data[i] = orig - cfg.eps;
            let minus = eval_loss(store, &loss);
            store.get_mut(id).data[i] = orig;
            let (plus, minus) = (plus?, minus?);
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(Error::numeric(format!("grad check: non-finite loss perturbing {name}[{i}]")));
            }
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = grad.data[i];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let rel_err = diff2.sqrt() / (a2.sqrt() + n2.sqrt()).max(cfg.floor);
        report.params.push(ParamCheck { name, rel_err, checked: entries.len(), analytic_norm: grad.norm() });
    }
    Ok(report)
}

/// Adds `N(0, std^2)` noise to every parameter so zero-initialized projections carry signal.
pub fn jitter_parameters(store: &mut ParameterStore<f64>, std: f64, seed: u64) {
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let mut rng = SeedStream::new(seed).rng("jitter");
    for id in ids {
        for v in store.get_mut(id).data.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += std * e;
        }
    }
}

/// Scalar probe `sum(out * R)` with a fixed pseudo-random `R`, so no output direction is privileged.
pub fn projection_loss(g: &Graph<f64>, out: Var, seed: u64) -> Var {
    let (rows, cols) = g.shape(out);
    let mut s = seed ^ 0x9E37_79B9_7F4A_7C15;
    let r: Vec<f64> = (0..rows * cols)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    let r = g.constant(Tensor::new(rows, cols, r));
    g.sum(g.mul(out, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Linear;
    use crate::nn::params::Init;

    #[test]
    fn linear_map_is_exact() {
        let mut store = ParameterStore::<f64>::new(1);
        let lin = Linear::new(&mut store, "lin", 5, 4, true);
        let x = store.add("x", 3, 5, Init::TruncNormal(1.0));
        store.get_mut(lin.bias.unwrap()).data.iter_mut().enumerate().for_each(|(i, b)| *b = i as f64 * 0.1);
        let report = grad_check(
            &mut store,
            |g, p| Ok(projection_loss(g, lin.forward(g, p, p.var(x)), 3)),
            &GradCheckConfig { floor: 1e-8, ..Default::default() },
        )
        .unwrap();
        assert!(report.max_rel_err() <= 1e-8, "{report}");
        assert_eq!(report.params.len(), 3);
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let mut store = ParameterStore::<f64>::new(1);
        let x = store.add("x", 2, 3, Init::TruncNormal(1.0));
        let report = grad_check(
            &mut store,
            |g, p| {
                let xv = p.var(x);
                let val = g.value(xv).map(|v| v * v);
                let sq = g.custom(val, &[xv], |up, _| vec![Some(up.clone())]);
                Ok(g.sum(sq))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err() > 1e-2);
        assert_eq!(report.failures(1e-4)[0].name, "x");
    }

    #[test]
    fn non_finite_loss_is_diagnosed() {
        let mut store = ParameterStore::<f64>::new(1);
        let x = store.add("x", 1, 1, Init::Ones);
        let err = grad_check(&mut store, |g, p| Ok(g.sum(g.scale(p.var(x), f64::NAN))), &GradCheckConfig::default());
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn parameters_restored_after_check() {
        let mut store = ParameterStore::<f64>::new(4);
        let x = store.add("x", 4, 4, Init::TruncNormal(1.0));
        let before = store.get(x).clone();
        grad_check(&mut store, |g, p| Ok(g.sum(g.exp(p.var(x)))), &GradCheckConfig::default()).unwrap();
        assert_eq!(*store.get(x), before);
    }
}
