//! VAE training loop.

use log::{info, warn};
use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};

use super::config::VaeConfig;
use super::model::{FaceBatch, PreparedMesh, Vae};
use crate::error::{Error, Result};
use crate::geometry::{augment, canonicalize, dequantize, AugmentOptions, CanonicalMesh};
use crate::nn::{AdamW, AdamWConfig, Graph, ParameterStore, Tensor};
use crate::rng::SeedStream;

#[derive(Clone, Debug, PartialEq)]
pub struct VaeTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    /// Per-step augmentation of the sampled meshes; off when `None`.
    pub augment: Option<AugmentOptions>,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 8, optim: AdamWConfig::default(), augment: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeStepStats {
    /// 1-based index of the completed update.
    pub step: u64,
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Model, parameters, optimizer state and data. Every random draw of step `k` comes
/// from a stream indexed by `k`, so a resumed trainer continues the same trajectory.
pub struct VaeTrainer {
    pub model: Vae,
    pub store: ParameterStore<f32>,
    pub opt: AdamW<f32>,
    pub train: VaeTrainConfig,
    seed: SeedStream,
    data: Vec<PreparedMesh>,
}

impl VaeTrainer {
    pub fn new(cfg: &VaeConfig, train: VaeTrainConfig, data: Vec<CanonicalMesh>, seed: u64) -> Result<Self> {
        let seed = SeedStream::new(seed);
        let mut store = ParameterStore::new(seed.derive("vae-init"));
        let model = Vae::new(cfg, &mut store)?;
        let opt = AdamW::new(train.optim, &store);
        Self::from_parts(model, store, opt, train, data, seed.root())
    }

    /// Continues from saved parameters and optimizer state.
    pub fn from_parts(
        model: Vae,
        store: ParameterStore<f32>,
        opt: AdamW<f32>,
        train: VaeTrainConfig,
        data: Vec<CanonicalMesh>,
        seed: u64,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::validation("vae training needs at least one mesh"));
        }
        if train.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if let Some(m) = data.iter().find(|m| m.resolution != model.cfg.resolution) {
            return Err(Error::validation(format!(
                "mesh resolution {} differs from model resolution {}",
                m.resolution, model.cfg.resolution
            )));
        }
        let data = data.into_iter().map(PreparedMesh::new).collect::<Result<Vec<_>>>()?;
        Ok(Self { model, store, opt, train, seed: SeedStream::new(seed), data })
    }

    pub fn data(&self) -> &[PreparedMesh] {
        &self.data
    }

    pub fn steps_done(&self) -> u64 {
        self.opt.step_count()
    }

    fn batch_meshes(&self, step_seed: &SeedStream) -> Vec<PreparedMesh> {
        let n = self.data.len();
        let idx: Vec<usize> = if self.train.batch_size >= n {
            (0..n).collect()
        } else {
            sample(&mut step_seed.rng("batch"), n, self.train.batch_size).into_vec()
        };
        idx.into_iter()
            .enumerate()
            .map(|(slot, i)| {
                let original = &self.data[i];
                let Some(opts) = &self.train.augment else { return original.clone() };
                let seed = step_seed.index(slot as u64).derive("augment");
                let augmented = augment(&dequantize(&original.mesh), seed, opts)
                    .and_then(|m| canonicalize(&m, self.model.cfg.resolution))
                    .and_then(PreparedMesh::new);
                augmented.unwrap_or_else(|e| {
                    warn!("augmentation dropped for mesh {i}: {e}");
                    original.clone()
                })
            })
            .collect()
    }

    pub fn step(&mut self) -> Result<VaeStepStats> {
        let step = self.opt.step_count();
        let step_seed = self.seed.sub("vae-step").index(step);
        let meshes = self.batch_meshes(&step_seed);
        let refs: Vec<&PreparedMesh> = meshes.iter().collect();
        let batch = FaceBatch::<f32>::new(&refs)?;
        let rows = batch.layout.rows();
        let c = self.model.cfg.latent_dim;
        let mut rng = step_seed.rng("reparam");
        let eps: Vec<f32> = (0..rows * c).map(|_| StandardNormal.sample(&mut rng)).collect();

        let g = Graph::new();
        let p = self.store.bind(&g);
        let (loss, ce, kl) = self.model.loss(&g, &p, &batch, Tensor::new(rows, c, eps))?;
        let (ce_v, kl_v, loss_v) = (g.value(ce).item() as f64, g.value(kl).item() as f64, g.value(loss).item() as f64);
        if !loss_v.is_finite() {
            return Err(Error::numeric(format!("vae loss diverged at step {step}: ce={ce_v} kl={kl_v}")));
        }
        let mut grads = g.backward(loss);
        let grads = self.store.gradients(&p, &mut grads);
        drop(g);
        let stats = self.opt.step(&mut self.store, &grads)?;
        Ok(VaeStepStats { step: step + 1, loss: loss_v, ce: ce_v, kl: kl_v, grad_norm: stats.grad_norm, lr: stats.lr })
    }

    /// Runs until `train.steps` updates have been made in total.
    pub fn run(&mut self, mut on_step: impl FnMut(&VaeStepStats)) -> Result<()> {
        while self.opt.step_count() < self.train.steps {
            let s = self.step()?;
            on_step(&s);
        }
        Ok(())
    }
}

/// Builds a trainer and runs it to completion.
pub fn train_vae(
    data: Vec<CanonicalMesh>,
    cfg: &VaeConfig,
    train: VaeTrainConfig,
    seed: u64,
    log_every: u64,
) -> Result<VaeTrainer> {
    let mut trainer = VaeTrainer::new(cfg, train, data, seed)?;
    trainer.run(|s| {
        if log_every > 0 && (s.step % log_every == 0 || s.step == 1) {
            info!("vae step {} loss {:.5} ce {:.5} kl {:.4} |g| {:.3} lr {:.2e}", s.step, s.loss, s.ce, s.kl, s.grad_norm, s.lr);
        }
    })?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::evaluate_reconstruction;
    use crate::geometry::{generate_synthetic, normalize, SyntheticShape};

    fn tiny(kl: f64) -> VaeConfig {
        VaeConfig { resolution: 32, enc_layers: 1, enc_hidden: 32, dec_layers: 1, dec_hidden: 32, heads: 2, latent_dim: 4, kl_weight: kl }
    }

    fn data() -> Vec<CanonicalMesh> {
        [SyntheticShape::Box { size: [1.0, 0.6, 0.3] }, SyntheticShape::Pyramid { base: 1.0, height: 0.7 }]
            .iter()
            .map(|s| canonicalize(&normalize(&generate_synthetic(s, 0).unwrap()).unwrap(), 32).unwrap())
            .collect()
    }

    fn train_cfg(steps: u64) -> VaeTrainConfig {
        VaeTrainConfig { steps, batch_size: 2, optim: AdamWConfig { lr: 1e-2, total_steps: steps, ..Default::default() }, augment: None }
    }

    #[test]
    fn deterministic_and_resumable() {
        let run = |steps| {
            let mut t = VaeTrainer::new(&tiny(1e-4), train_cfg(steps), data(), 7).unwrap();
            let mut losses = Vec::new();
            t.run(|s| losses.push(s.loss)).unwrap();
            (t, losses)
        };
        let (_, a) = run(6);
        let (_, b) = run(6);
        assert_eq!(a, b);

        let mut half = VaeTrainer::new(&tiny(1e-4), train_cfg(6), data(), 7).unwrap();
        let first: Vec<f64> = (0..3).map(|_| half.step().unwrap().loss).collect();
        let mut resumed =
            VaeTrainer::from_parts(half.model.clone(), half.store.clone(), half.opt.clone(), train_cfg(6), data(), 7).unwrap();
        let mut rest = Vec::new();
        resumed.run(|s| rest.push(s.loss)).unwrap();
        assert_eq!([first, rest].concat(), a);
    }

    #[test]
    fn overfits_two_meshes() {
        let mut t = VaeTrainer::new(&tiny(1e-4), train_cfg(600), data(), 1).unwrap();
        let mut last = f64::INFINITY;
        t.run(|s| last = s.ce).unwrap();
        assert!(last < 0.05, "final ce {last}");
        let m = evaluate_reconstruction(&t.model, &t.store, t.data(), 4).unwrap();
        assert_eq!(m.triangle_accuracy, 1.0);
    }
}
