use crate::error::{Error, Result};
use crate::kv::KvMap;

/// Encoder/decoder shapes and the KL weight.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    pub resolution: u32,
    pub enc_layers: usize,
    pub enc_hidden: usize,
    pub dec_layers: usize,
    pub dec_hidden: usize,
    pub heads: usize,
    pub latent_dim: usize,
    pub kl_weight: f64,
}

impl VaeConfig {
    /// Workstation profile.
    pub fn desk() -> Self {
        Self {
            resolution: 128,
            enc_layers: 4,
            enc_hidden: 192,
            dec_layers: 4,
            dec_hidden: 192,
            heads: 4,
            latent_dim: 8,
            kl_weight: 1e-4,
        }
    }

    /// Full-size shapes, kept for reference.
    pub fn full() -> Self {
        Self {
            resolution: 128,
            enc_layers: 12,
            enc_hidden: 768,
            dec_layers: 18,
            dec_hidden: 384,
            heads: 12,
            latent_dim: 8,
            kl_weight: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::validation("vae resolution must be at least 2"));
        }
        if self.latent_dim == 0 {
            return Err(Error::validation("vae latent_dim must be positive"));
        }
        for (what, hidden) in [("enc_hidden", self.enc_hidden), ("dec_hidden", self.dec_hidden)] {
            if self.heads == 0 || hidden % self.heads != 0 || (hidden / self.heads) % 2 != 0 {
                return Err(Error::validation(format!(
                    "vae {what}={hidden} must split into {} heads of even width",
                    self.heads
                )));
            }
        }
        if !(self.kl_weight.is_finite() && self.kl_weight >= 0.0) {
            return Err(Error::validation("vae kl_weight must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn to_kv(&self, prefix: &str) -> KvMap {
        let mut m = KvMap::new();
        m.set(&format!("{prefix}resolution"), self.resolution);
        m.set(&format!("{prefix}enc_layers"), self.enc_layers);
        m.set(&format!("{prefix}enc_hidden"), self.enc_hidden);
        m.set(&format!("{prefix}dec_layers"), self.dec_layers);
        m.set(&format!("{prefix}dec_hidden"), self.dec_hidden);
        m.set(&format!("{prefix}heads"), self.heads);
        m.set(&format!("{prefix}latent_dim"), self.latent_dim);
        m.set(&format!("{prefix}kl_weight"), self.kl_weight);
        m
    }

    pub fn from_kv(m: &KvMap, prefix: &str) -> Result<Self> {
        let k = |s: &str| format!("{prefix}{s}");
        let cfg = Self {
            resolution: m.require(&k("resolution"))?,
            enc_layers: m.require(&k("enc_layers"))?,
            enc_hidden: m.require(&k("enc_hidden"))?,
            dec_layers: m.require(&k("dec_layers"))?,
            dec_hidden: m.require(&k("dec_hidden"))?,
            heads: m.require(&k("heads"))?,
            latent_dim: m.require(&k("latent_dim"))?,
            kl_weight: m.require(&k("kl_weight"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let c = VaeConfig { kl_weight: 0.125, ..VaeConfig::desk() };
        assert_eq!(VaeConfig::from_kv(&c.to_kv("vae."), "vae.").unwrap(), c);
        assert!(VaeConfig::full().validate().is_ok());
    }

    #[test]
    fn odd_head_width_rejected() {
        let c = VaeConfig { enc_hidden: 20, heads: 4, ..VaeConfig::desk() };
        assert!(c.validate().is_err());
    }
}
