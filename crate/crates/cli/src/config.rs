//! Run configuration: a flat `key = value` file over documented defaults.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use meshflow_core::autoencoder::{VaeConfig, VaeTrainConfig};
use meshflow_core::dit::{DitConfig, DitTrainConfig, SamplingOptions};
use meshflow_core::flow::{CfgWeights, TimeSampler};
use meshflow_core::geometry::{AugmentOptions, RotationMode};
use meshflow_core::kv::KvMap;
use meshflow_core::nn::AdamWConfig;
use meshflow_core::{Error, Result};

/// Every accepted key with its default value and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "root seed; every random stream is derived from it"),
    ("resolution", "128", "quantization bins per axis"),
    ("face_budget", "800", "meshes with more faces are skipped by preprocess"),
    ("allow_oversize", "false", "keep meshes above face_budget"),
    ("sigma_hausdorff", "0.05", "maximum Hausdorff distance to the original mesh, normalized units"),
    ("hausdorff_samples", "10000", "surface samples per mesh for the Hausdorff filter"),
    ("split_ratio", "10", "train:val ratio of the manifest split (0 puts everything in train)"),
    ("vae.enc_layers", "4", "encoder transformer layers"),
    ("vae.enc_hidden", "192", "encoder width"),
    ("vae.dec_layers", "4", "decoder transformer layers"),
    ("vae.dec_hidden", "192", "decoder width"),
    ("vae.heads", "4", "attention heads in encoder and decoder"),
    ("vae.latent_dim", "8", "channels per face token"),
    ("vae.kl_weight", "0.0001", "weight of the KL term"),
    ("vae.steps", "2000", "optimizer updates"),
    ("vae.batch_size", "8", "meshes per update"),
    ("vae.lr", "0.001", "peak learning rate"),
    ("vae.warmup", "50", "linear warmup updates"),
    ("vae.weight_decay", "0", "decoupled weight decay"),
    ("vae.clip_norm", "1.0", "global gradient clip (0 disables)"),
    ("vae.augment", "false", "per-step scale and quarter-turn yaw augmentation"),
    ("dit.layers", "6", "transformer layers"),
    ("dit.hidden", "256", "transformer width"),
    ("dit.heads", "8", "attention heads"),
    ("dit.max_faces", "800", "largest face count the model accepts"),
    ("dit.cross_attention", "false", "condition on reference-shape feature tokens"),
    ("dit.steps", "5000", "optimizer updates"),
    ("dit.batch_size", "8", "sequences per update"),
    ("dit.lr", "0.0005", "peak learning rate"),
    ("dit.warmup", "100", "linear warmup updates"),
    ("dit.weight_decay", "0", "decoupled weight decay"),
    ("dit.clip_norm", "1.0", "global gradient clip (0 disables)"),
    ("dit.cond_dropout", "0.1", "probability of nulling each condition during training"),
    ("dit.time_m", "0.5", "logit-normal time location"),
    ("dit.time_s", "1.0", "logit-normal time scale"),
    ("dit.normalize_latents", "true", "rescale latents to unit standard deviation"),
    ("sample.steps", "50", "Euler steps"),
    ("sample.cfg", "auto", "guidance: auto, off, single or dual"),
    ("sample.w", "8.0", "single-condition guidance weight"),
    ("sample.w1", "1.0", "dual guidance weight on the face count"),
    ("sample.w2", "5.0", "dual guidance weight on the reference features"),
    ("eval.points", "1024", "surface points per mesh"),
    ("eval.jsd_resolution", "28", "voxels per axis of the JSD grid"),
    ("checkpoint_every", "500", "updates between checkpoint writes"),
    ("log_every", "100", "updates between progress lines"),
    ("paths.manifest", "manifest.txt", "dataset manifest, relative to --out"),
    ("paths.meshes", "meshes", "canonical mesh directory, relative to --out"),
    ("paths.vae", "vae.ckpt", "autoencoder checkpoint, relative to --out"),
    ("paths.latents", "latents.bin", "encoded training latents, relative to --out"),
    ("paths.dit", "dit.ckpt", "velocity model checkpoint, relative to --out"),
];

/// Defaults overlaid with user values; unknown keys and malformed values are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    map: KvMap,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut map = KvMap::new();
        for (k, v, _) in KEYS {
            map.set(k, v);
        }
        Self { map }
    }
}

impl RunConfig {
    pub fn from_kv(user: &KvMap) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in user.iter() {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvMap::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> Result<()> {
        if !KEYS.iter().any(|(k, _, _)| *k == key) {
            return Err(Error::validation(format!("unknown config key {key:?}")));
        }
        self.map.set(key, value);
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::validation(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())?;
        self.validate()
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.map.require(key)
    }

    pub fn text(&self, key: &str) -> &str {
        self.map.get(key).unwrap_or_default()
    }

    /// The full configuration, one sorted line per key.
    pub fn to_text(&self) -> String {
        self.map.to_text()
    }

    pub fn kv(&self) -> &KvMap {
        &self.map
    }

    /// Type-checks every key by building each derived configuration.
    pub fn validate(&self) -> Result<()> {
        self.vae_config()?;
        self.vae_train()?;
        self.dit_config()?;
        self.dit_train()?;
        self.sampling(false)?;
        for key in ["seed", "hausdorff_samples", "checkpoint_every", "log_every", "split_ratio"] {
            self.get::<u64>(key)?;
        }
        for key in ["face_budget", "eval.points", "eval.jsd_resolution"] {
            if self.get::<usize>(key)? == 0 {
                return Err(Error::validation(format!("{key} must be positive")));
            }
        }
        self.get::<bool>("allow_oversize")?;
        let sigma: f64 = self.get("sigma_hausdorff")?;
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::validation("sigma_hausdorff must be non-negative"));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.get("seed").unwrap_or(0)
    }

    pub fn resolution(&self) -> Result<u32> {
        self.get("resolution")
    }

    pub fn vae_config(&self) -> Result<VaeConfig> {
        let cfg = VaeConfig {
            resolution: self.get("resolution")?,
            enc_layers: self.get("vae.enc_layers")?,
            enc_hidden: self.get("vae.enc_hidden")?,
            dec_layers: self.get("vae.dec_layers")?,
            dec_hidden: self.get("vae.dec_hidden")?,
            heads: self.get("vae.heads")?,
            latent_dim: self.get("vae.latent_dim")?,
            kl_weight: self.get("vae.kl_weight")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn optim(&self, prefix: &str, steps: u64) -> Result<AdamWConfig> {
        let clip: f64 = self.get(&format!("{prefix}.clip_norm"))?;
        Ok(AdamWConfig {
            lr: self.get(&format!("{prefix}.lr"))?,
            weight_decay: self.get(&format!("{prefix}.weight_decay"))?,
            warmup_steps: self.get(&format!("{prefix}.warmup"))?,
            total_steps: steps,
            clip_norm: (clip > 0.0).then_some(clip),
            ..AdamWConfig::default()
        })
    }

    pub fn vae_train(&self) -> Result<VaeTrainConfig> {
        let steps = self.get("vae.steps")?;
        Ok(VaeTrainConfig {
            steps,
            batch_size: self.get("vae.batch_size")?,
            optim: self.optim("vae", steps)?,
            augment: self
                .get::<bool>("vae.augment")?
                .then(|| AugmentOptions { rotation: RotationMode::QuarterTurnYaw, ..AugmentOptions::default() }),
        })
    }

    /// Model shapes; `latent_scale` is filled in by training.
    pub fn dit_config(&self) -> Result<DitConfig> {
        let cfg = DitConfig {
            layers: self.get("dit.layers")?,
            hidden: self.get("dit.hidden")?,
            heads: self.get("dit.heads")?,
            latent_dim: self.get("vae.latent_dim")?,
            max_faces: self.get("dit.max_faces")?,
            use_cross_attention: self.get("dit.cross_attention")?,
            ..DitConfig::desk()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dit_train(&self) -> Result<DitTrainConfig> {
        let steps = self.get("dit.steps")?;
        let cfg = DitTrainConfig {
            steps,
            batch_size: self.get("dit.batch_size")?,
            optim: self.optim("dit", steps)?,
            time: TimeSampler::new(self.get("dit.time_m")?, self.get("dit.time_s")?)?,
            cond_dropout: self.get("dit.cond_dropout")?,
            normalize_latents: self.get("dit.normalize_latents")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sampler settings. `auto` picks dual guidance when reference features are supplied.
    pub fn sampling(&self, has_features: bool) -> Result<SamplingOptions> {
        let cfg = match self.text("sample.cfg") {
            "off" => CfgWeights::Off,
            "single" => CfgWeights::Single(self.get("sample.w")?),
            "dual" => CfgWeights::Dual(self.get("sample.w1")?, self.get("sample.w2")?),
            "auto" if has_features => CfgWeights::Dual(self.get("sample.w1")?, self.get("sample.w2")?),
            "auto" => CfgWeights::Single(self.get("sample.w")?),
            other => return Err(Error::validation(format!("sample.cfg must be auto, off, single or dual, got {other:?}"))),
        };
        cfg.validate()?;
        let steps: usize = self.get("sample.steps")?;
        if steps == 0 {
            return Err(Error::validation("sample.steps must be positive"));
        }
        Ok(SamplingOptions { cfg, steps })
    }
}

/// Documented defaults as a config file.
pub fn default_config_text() -> String {
    KEYS.iter().map(|(k, v, doc)| format!("# {doc}\n{k} = {v}\n")).collect()
}
