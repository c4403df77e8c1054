//! AdamW with linear warmup, cosine decay and global gradient-norm clipping.

use super::params::ParameterStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only (rows > 1).
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Length of the cosine schedule; the rate stays at `min_lr_ratio * lr` afterwards.
    pub total_steps: u64,
    pub min_lr_ratio: f64,
    /// Global L2 clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
            total_steps: 10_000,
            min_lr_ratio: 0.1,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamWConfig {
    /// Learning rate used for update number `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cosine)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(cfg: AdamWConfig, store: &ParameterStore<F>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.rows, p.value.cols)).collect();
        Self { cfg, step: 0, m: zeros(), v: zeros() }
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_state(cfg: AdamWConfig, step: u64, m: Vec<Tensor<F>>, v: Vec<Tensor<F>>) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::validation("optimizer state: moment counts differ"));
        }
        Ok(Self { cfg, step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<F>], &[Tensor<F>]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, store: &mut ParameterStore<F>, grads: &[Tensor<F>]) -> Result<StepStats> {
        if grads.len() != self.m.len() || grads.len() != store.len() {
            return Err(Error::validation(format!(
                "optimizer: {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        let sq: f64 = grads.iter().flat_map(|g| g.data.iter()).map(|x| x.f64() * x.f64()).sum();
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::numeric(format!("non-finite gradient norm at step {}", self.step)));
        }
        let clip = match self.cfg.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let lr = self.cfg.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let w = store.get_mut(id);
            let decay = if w.rows > 1 { self.cfg.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k].data, &mut self.v[k].data);
            for (i, x) in w.data.iter_mut().enumerate() {
                let g = grads[k].data[i].f64() * clip;
                let mi = b1 * m[i].f64() + (1.0 - b1) * g;
                let vi = b2 * v[i].f64() + (1.0 - b2) * g * g;
                m[i] = F::c(mi);
                v[i] = F::c(vi);
                let upd = (mi / bc1) / ((vi / bc2).sqrt() + self.cfg.eps);
                *x = F::c(x.f64() * (1.0 - lr * decay) - lr * upd);
            }
        }
        Ok(StepStats { lr, grad_norm })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = AdamWConfig { lr: 1.0, warmup_steps: 10, total_steps: 110, min_lr_ratio: 0.0, ..Default::default() };
        assert!((cfg.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(60) - 0.5).abs() < 1e-12);
        assert!(cfg.lr_at(110).abs() < 1e-12);
        assert!(cfg.lr_at(500).abs() < 1e-12);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParameterStore::<f64>::new(0);
        let x = store.add("x", 1, 3, Init::Ones);
        let cfg = AdamWConfig { lr: 0.05, total_steps: 2000, clip_norm: None, ..Default::default() };
        let mut opt = AdamW::new(cfg, &store);
        for _ in 0..2000 {
            let g = store.get(x).map(|v| 2.0 * (v - 3.0));
            opt.step(&mut store, &[g]).unwrap();
        }
        for &v in &store.get(x).data {
            assert!((v - 3.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn first_step_magnitude_is_lr_and_clipping_reports_raw_norm() {
        let mut store = ParameterStore::<f32>::new(0);
        let x = store.add("x", 1, 2, Init::Zeros);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.01, ..Default::default() }, &store);
        let stats = opt.step(&mut store, &[Tensor::new(1, 2, vec![30.0, -40.0])]).unwrap();
        assert!((stats.grad_norm - 50.0).abs() < 1e-9);
        let w = &store.get(x).data;
        assert!((w[0] + 0.01).abs() < 1e-6 && (w[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut store = ParameterStore::<f32>::new(0);
        store.add("x", 1, 1, Init::Zeros);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        assert!(opt.step(&mut store, &[Tensor::new(1, 1, vec![f32::NAN])]).unwrap_err().is_numeric());
    }
}
