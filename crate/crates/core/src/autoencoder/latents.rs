//! Per-mesh encoder posteriors, stored for diffusion training.
//!
//! Layout (little-endian): magic `"MFLAT\0\0\0"`, version `u32`, mesh count `u64`,
//! latent width `u64`, condition width `u64` (0 when absent), then per mesh: face count
//! `u64`, `mu` and `logvar` (`n x C` f32 each) and, if the condition width is non-zero,
//! a token count `u64` and its `k x D` features. A CRC32 of everything before it ends the file.

use std::fs;
use std::path::Path;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::nn::Tensor;

const MAGIC: &[u8; 8] = b"MFLAT\0\0\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentRecord {
    pub mu: Tensor<f32>,
    pub logvar: Tensor<f32>,
    /// Optional condition token sequence for cross-attention.
    pub features: Option<Tensor<f32>>,
}

impl LatentRecord {
    pub fn face_count(&self) -> usize {
        self.mu.rows
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentDataset {
    pub latent_dim: usize,
    /// Width of the condition features; 0 when records carry none.
    pub feature_dim: usize,
    pub records: Vec<LatentRecord>,
}

impl LatentDataset {
    pub fn new(latent_dim: usize, feature_dim: usize, records: Vec<LatentRecord>) -> Result<Self> {
        let ds = Self { latent_dim, feature_dim, records };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::validation("latent dataset needs a positive latent width"));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.mu.cols != self.latent_dim || r.logvar.shape() != r.mu.shape() || r.mu.rows == 0 {
                return Err(Error::validation(format!(
                    "record {i}: mu {:?} / logvar {:?} do not match latent width {}",
                    r.mu.shape(),
                    r.logvar.shape(),
                    self.latent_dim
                )));
            }
            match (&r.features, self.feature_dim) {
                (None, 0) => {}
                (Some(f), d) if d > 0 && f.cols == d && f.rows > 0 => {}
                _ => return Err(Error::validation(format!("record {i}: condition features do not match width {}", self.feature_dim))),
            }
            if !(r.mu.all_finite() && r.logvar.all_finite()) {
                return Err(Error::validation(format!("record {i} holds non-finite latents")));
            }
        }
        Ok(())
    }

    pub fn max_faces(&self) -> usize {
        self.records.iter().map(|r| r.face_count()).max().unwrap_or(0)
    }

    /// Standard deviation over all `mu` entries; used to put diffusion targets on a unit scale.
    pub fn mu_std(&self) -> f64 {
        let (mut n, mut s, mut s2) = (0usize, 0.0f64, 0.0f64);
        for r in &self.records {
            for &x in &r.mu.data {
                n += 1;
                s += x as f64;
                s2 += (x as f64) * (x as f64);
            }
        }
        if n < 2 {
            return 1.0;
        }
        let mean = s / n as f64;
        ((s2 / n as f64 - mean * mean).max(0.0)).sqrt()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(self.records.len() as u64);
        w.u64(self.latent_dim as u64);
        w.u64(self.feature_dim as u64);
        for r in &self.records {
            w.u64(r.face_count() as u64);
            w.f32s(&r.mu.data);
            w.f32s(&r.logvar.data);
            if let Some(f) = &r.features {
                w.u64(f.rows as u64);
                w.f32s(&f.data);
            }
        }
        let crc = crc32fast::hash(&w.buf);
        w.u32(crc);
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        if data.len() < 4 {
            return Err(Error::Format("latent dataset truncated".into()));
        }
        let (body, tail) = data.split_at(data.len() - 4);
        let mut r = ByteReader::new(body, "latent dataset");
        if r.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Format("not a latent dataset (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("latent dataset version {version} is not supported (expected {VERSION})")));
        }
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::Format("latent dataset checksum mismatch".into()));
        }
        let count = r.u64()? as usize;
        let latent_dim = r.u64()? as usize;
        let feature_dim = r.u64()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let n = r.len(latent_dim.max(1) * 8)?;
            let mu = Tensor::new(n, latent_dim, r.f32s(n * latent_dim)?);
            let logvar = Tensor::new(n, latent_dim, r.f32s(n * latent_dim)?);
            let features = if feature_dim > 0 {
                let k = r.len(feature_dim * 4)?;
                Some(Tensor::new(k, feature_dim, r.f32s(k * feature_dim)?))
            } else {
                None
            };
            records.push(LatentRecord { mu, logvar, features });
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} unexpected trailing bytes in latent dataset", r.remaining())));
        }
        Self::new(latent_dim, feature_dim, records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(n: usize, c: usize, base: f32, features: Option<usize>) -> LatentRecord {
        LatentRecord {
            mu: Tensor::new(n, c, (0..n * c).map(|i| base + i as f32 * 0.25).collect()),
            logvar: Tensor::new(n, c, (0..n * c).map(|i| -(i as f32) * 0.1).collect()),
            features: features.map(|d| Tensor::new(2, d, (0..2 * d).map(|i| i as f32).collect())),
        }
    }

    #[test]
    fn round_trip_with_and_without_features() {
        let plain = LatentDataset::new(3, 0, vec![record(4, 3, 0.0, None), record(12, 3, -1.0, None)]).unwrap();
        assert_eq!(LatentDataset::from_bytes(&plain.to_bytes()).unwrap(), plain);
        let cond = LatentDataset::new(2, 5, vec![record(3, 2, 0.5, Some(5))]).unwrap();
        assert_eq!(LatentDataset::from_bytes(&cond.to_bytes()).unwrap(), cond);
        assert_eq!(plain.max_faces(), 12);
    }

    #[test]
    fn corrupt_or_inconsistent_input_is_rejected() {
        let ds = LatentDataset::new(3, 0, vec![record(4, 3, 0.0, None)]).unwrap();
        let mut bytes = ds.to_bytes();
        bytes[40] ^= 1;
        assert!(LatentDataset::from_bytes(&bytes).is_err());
        assert!(LatentDataset::from_bytes(&ds.to_bytes()[..20]).is_err());
        assert!(LatentDataset::new(2, 0, vec![record(4, 3, 0.0, None)]).is_err());
        assert!(LatentDataset::new(3, 4, vec![record(4, 3, 0.0, None)]).is_err());
    }
}
