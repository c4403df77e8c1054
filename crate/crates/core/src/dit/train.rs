//! Rectified-flow training of the velocity transformer on encoded latents.

use log::info;
use rand::seq::index::sample;

use super::condition::{condition_dropout, Conditioning};
use super::config::{DitConfig, DitTrainConfig};
use super::model::Dit;
use crate::autoencoder::LatentDataset;
use crate::error::{Error, Result};
use crate::flow::{flow_loss_var, gaussian_noise, interpolant_rows, velocity_target};
use crate::nn::{AdamW, Graph, PaddedLayout, ParameterStore, Tensor};
use crate::rng::SeedStream;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DitStepStats {
    /// 1-based index of the completed update.
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Model, parameters, optimizer and data; step `k` draws only from streams indexed by `k`.
pub struct DitTrainer {
    pub model: Dit,
    pub store: ParameterStore<f32>,
    pub opt: AdamW<f32>,
    pub train: DitTrainConfig,
    seed: SeedStream,
    data: LatentDataset,
}

/// `1 / std(mu)` when normalization is on and the latents are not constant, else 1.
pub fn latent_scale_for(data: &LatentDataset, normalize: bool) -> f64 {
    let std = data.mu_std();
    if normalize && std.is_finite() && std > 1e-8 {
        1.0 / std
    } else {
        1.0
    }
}

impl DitTrainer {
    /// Fresh model. `cfg.latent_scale` is replaced by the dataset scale when normalization is on.
    pub fn new(cfg: &DitConfig, train: DitTrainConfig, data: LatentDataset, seed: u64) -> Result<Self> {
        let cfg = DitConfig {
            latent_scale: if train.normalize_latents { latent_scale_for(&data, true) } else { cfg.latent_scale },
            ..cfg.clone()
        };
        let seed = SeedStream::new(seed);
        let mut store = ParameterStore::new(seed.derive("dit-init"));
        let model = Dit::new(&cfg, &mut store)?;
        let opt = AdamW::new(train.optim, &store);
        Self::from_parts(model, store, opt, train, data, seed.root())
    }

    pub fn from_parts(
        model: Dit,
        store: ParameterStore<f32>,
        opt: AdamW<f32>,
        train: DitTrainConfig,
        data: LatentDataset,
        seed: u64,
    ) -> Result<Self> {
        train.validate()?;
        data.validate()?;
        if data.records.is_empty() {
            return Err(Error::validation("diffusion training needs at least one latent sequence"));
        }
        let cfg = &model.cfg;
        if data.latent_dim != cfg.latent_dim {
            return Err(Error::validation(format!(
                "latent width {} does not match model latent_dim {}",
                data.latent_dim, cfg.latent_dim
            )));
        }
        if data.max_faces() > cfg.max_faces {
            return Err(Error::validation(format!(
                "dataset has a {}-face mesh but max_faces is {}",
                data.max_faces(),
                cfg.max_faces
            )));
        }
        if data.feature_dim > 0 && !cfg.use_cross_attention {
            log::warn!("latent dataset carries condition features but cross-attention is off; ignoring them");
        }
        if cfg.use_cross_attention && data.feature_dim > 0 && data.feature_dim != cfg.cond_dim {
            return Err(Error::validation(format!(
                "condition width {} does not match cond_dim {}",
                data.feature_dim, cfg.cond_dim
            )));
        }
        Ok(Self { model, store, opt, train, seed: SeedStream::new(seed), data })
    }

    pub fn data(&self) -> &LatentDataset {
        &self.data
    }

    pub fn steps_done(&self) -> u64 {
        self.opt.step_count()
    }

    pub fn step(&mut self) -> Result<DitStepStats> {
        let step = self.opt.step_count();
        let s = self.seed.sub("dit-step").index(step);
        let n = self.data.records.len();
        let idx: Vec<usize> = if self.train.batch_size >= n {
            (0..n).collect()
        } else {
            sample(&mut s.rng("batch"), n, self.train.batch_size).into_vec()
        };
        let scale = self.model.cfg.latent_scale as f32;
        let seqs: Vec<Tensor<f32>> = idx.iter().map(|&i| self.data.records[i].mu.map(|x| x * scale)).collect();
        let refs: Vec<&Tensor<f32>> = seqs.iter().collect();
        let lengths: Vec<usize> = seqs.iter().map(|t| t.rows).collect();
        let layout = PaddedLayout::<f32>::new(&lengths)?;
        let x1 = layout.pad(&refs)?;
        let valid = layout.valid_rows();
        let mut x0 = gaussian_noise::<f32>(layout.rows(), self.model.cfg.latent_dim, s.derive("noise"));
        for (r, &ok) in valid.iter().enumerate() {
            if !ok {
                x0.row_mut(r).fill(0.0);
            }
        }
        let mut trng = s.rng("time");
        let t: Vec<f64> = idx.iter().map(|_| self.train.time.sample(&mut trng)).collect();
        let t_rows: Vec<f64> = t.iter().flat_map(|&ti| std::iter::repeat_n(ti, layout.stride)).collect();
        let xt = interpolant_rows(&x0, &x1, &t_rows)?;
        let target = velocity_target(&x0, &x1)?;

        let use_features = self.model.cfg.use_cross_attention && self.data.feature_dim > 0;
        let mut drng = s.rng("dropout");
        let conds: Vec<Conditioning<'_, f32>> = idx
            .iter()
            .map(|&i| {
                let [drop_face, drop_features] = condition_dropout(&mut drng, self.train.cond_dropout);
                let rec = &self.data.records[i];
                Conditioning {
                    face_count: (!drop_face).then_some(rec.face_count()),
                    features: if use_features && !drop_features { rec.features.as_ref() } else { None },
                }
            })
            .collect();

        let g = Graph::new();
        let p = self.store.bind(&g);
        let pred = self.model.forward(&g, &p, g.constant(xt), &layout, &t, &conds)?;
        let loss = flow_loss_var(&g, pred, g.constant(target), &valid);
        let loss_v = g.value(loss).item() as f64;
        if !loss_v.is_finite() {
            return Err(Error::numeric(format!("flow loss diverged at step {step}")));
        }
        let mut grads = g.backward(loss);
        let grads = self.store.gradients(&p, &mut grads);
        drop(g);
        let stats = self.opt.step(&mut self.store, &grads)?;
        Ok(DitStepStats { step: step + 1, loss: loss_v, grad_norm: stats.grad_norm, lr: stats.lr })
    }

    /// Runs until `train.steps` updates have been made in total.
    pub fn run(&mut self, mut on_step: impl FnMut(&DitStepStats)) -> Result<()> {
        while self.opt.step_count() < self.train.steps {
            let s = self.step()?;
            on_step(&s);
        }
        Ok(())
    }
}

/// Builds a trainer and runs it to completion.
pub fn train_dit(data: LatentDataset, cfg: &DitConfig, train: DitTrainConfig, seed: u64, log_every: u64) -> Result<DitTrainer> {
    let mut trainer = DitTrainer::new(cfg, train, data, seed)?;
    trainer.run(|s| {
        if log_every > 0 && (s.step % log_every == 0 || s.step == 1) {
            info!("dit step {} loss {:.5} |g| {:.3} lr {:.2e}", s.step, s.loss, s.grad_norm, s.lr);
        }
    })?;
    Ok(trainer)
}
