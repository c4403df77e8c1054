use crate::error::{Error, Result};
use crate::flow::TimeSampler;
use crate::kv::KvMap;
use crate::nn::AdamWConfig;

/// Shapes of the velocity transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct DitConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub latent_dim: usize,
    /// Largest face count the count embedding accepts.
    pub max_faces: usize,
    pub use_cross_attention: bool,
    /// Width of cross-attention condition tokens.
    pub cond_dim: usize,
    /// Multiplier from encoder latents to the unit-scale diffusion space.
    pub latent_scale: f64,
}

impl DitConfig {
    /// Workstation profile.
    pub fn desk() -> Self {
        Self {
            layers: 6,
            hidden: 256,
            heads: 8,
            latent_dim: 8,
            max_faces: 800,
            use_cross_attention: false,
            cond_dim: super::TOY_FEATURE_DIM,
            latent_scale: 1.0,
        }
    }

    /// Full-size shapes, kept for reference.
    pub fn full() -> Self {
        Self { layers: 24, hidden: 864, heads: 12, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.latent_dim == 0 || self.max_faces == 0 {
            return Err(Error::validation("dit layers, latent_dim and max_faces must be positive"));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 || (self.hidden / self.heads) % 2 != 0 {
            return Err(Error::validation(format!(
                "dit hidden={} must split into {} heads of even width",
                self.hidden, self.heads
            )));
        }
        if self.use_cross_attention && self.cond_dim == 0 {
            return Err(Error::validation("cross-attention needs a positive cond_dim"));
        }
        if !(self.latent_scale.is_finite() && self.latent_scale > 0.0) {
            return Err(Error::validation(format!("latent_scale must be positive and finite, got {}", self.latent_scale)));
        }
        Ok(())
    }

    pub fn to_kv(&self, prefix: &str) -> KvMap {
        let mut m = KvMap::new();
        m.set(&format!("{prefix}layers"), self.layers);
        m.set(&format!("{prefix}hidden"), self.hidden);
        m.set(&format!("{prefix}heads"), self.heads);
        m.set(&format!("{prefix}latent_dim"), self.latent_dim);
        m.set(&format!("{prefix}max_faces"), self.max_faces);
        m.set(&format!("{prefix}use_cross_attention"), self.use_cross_attention);
        m.set(&format!("{prefix}cond_dim"), self.cond_dim);
        m.set(&format!("{prefix}latent_scale"), self.latent_scale);
        m
    }

    pub fn from_kv(m: &KvMap, prefix: &str) -> Result<Self> {
        let k = |s: &str| format!("{prefix}{s}");
        let cfg = Self {
            layers: m.require(&k("layers"))?,
            hidden: m.require(&k("hidden"))?,
            heads: m.require(&k("heads"))?,
            latent_dim: m.require(&k("latent_dim"))?,
            max_faces: m.require(&k("max_faces"))?,
            use_cross_attention: m.require(&k("use_cross_attention"))?,
            cond_dim: m.require(&k("cond_dim"))?,
            latent_scale: m.require(&k("latent_scale"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DitTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub time: TimeSampler,
    /// Probability of replacing each condition by its null embedding, drawn independently.
    pub cond_dropout: f64,
    /// Rescale latents to unit standard deviation before training.
    pub normalize_latents: bool,
}

impl Default for DitTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 8,
            optim: AdamWConfig::default(),
            time: TimeSampler::default(),
            cond_dropout: 0.1,
            normalize_latents: true,
        }
    }
}

impl DitTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.time.validate()?;
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::validation(format!("cond_dropout {} outside [0, 1]", self.cond_dropout)));
        }
        Ok(())
    }
}
