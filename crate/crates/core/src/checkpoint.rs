//! Binary checkpoints: a config snapshot, a step counter and named `f32` segments.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "MFCKPT\0\0" | version u32 | kind str | config str | step u64 | header crc u32
//! segment count u32 | per segment: name str | rows u64 | cols u64 | data f32* | crc u32
//! ```
//!
//! Strings are a `u64` byte length followed by UTF-8. Each CRC32 covers the bytes of its
//! block, so a flipped bit names the damaged segment.

use std::fs;
use std::path::Path;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::nn::{AdamW, AdamWConfig, ParameterStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MFCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// What the parameters belong to, e.g. `vae` or `dit`.
    pub kind: String,
    pub config: KvMap,
    pub step: u64,
    pub segments: Vec<Segment>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: KvMap, step: u64) -> Self {
        Self { kind: kind.to_string(), config, step, segments: Vec::new() }
    }

    /// Model parameters, plus AdamW moments when `opt` is given.
    pub fn from_training(kind: &str, config: KvMap, store: &ParameterStore<f32>, opt: Option<&AdamW<f32>>) -> Self {
        let mut ck = Self::new(kind, config, opt.map_or(0, |o| o.step_count()));
        for (_, p) in store.iter() {
            ck.segments.push(Segment { name: p.name.clone(), tensor: p.value.clone() });
        }
        if let Some(opt) = opt {
            let (m, v) = opt.moments();
            for (prefix, moments) in [(ADAM_M, m), (ADAM_V, v)] {
                for ((_, p), t) in store.iter().zip(moments) {
                    ck.segments.push(Segment { name: format!("{prefix}{}", p.name), tensor: t.clone() });
                }
            }
        }
        ck
    }

    pub fn segment(&self, name: &str) -> Option<&Tensor<f32>> {
        self.segments.iter().find(|s| s.name == name).map(|s| &s.tensor)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    /// Copies every parameter of `store` from the matching segment; names and shapes must agree.
    pub fn load_parameters(&self, store: &mut ParameterStore<f32>) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = self.segment(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        let extra = self.segments.iter().filter(|s| !s.name.starts_with("adam.") && store.id(&s.name).is_none()).count();
        if extra > 0 {
            return Err(Error::Format(format!("checkpoint has {extra} parameters the model does not define")));
        }
        Ok(())
    }

    /// Rebuilds the optimizer from the saved moments and step counter.
    pub fn load_optimizer(&self, cfg: AdamWConfig, store: &ParameterStore<f32>) -> Result<AdamW<f32>> {
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, p) in store.iter() {
            for (prefix, out) in [(ADAM_M, &mut m), (ADAM_V, &mut v)] {
                let t = self
                    .segment(&format!("{prefix}{}", p.name))
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks optimizer state for {}", p.name)))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Format(format!("optimizer state for {} has the wrong shape", p.name)));
                }
                out.push(t.clone());
            }
        }
        AdamW::from_state(cfg, self.step, m, v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&self.kind);
        w.str(&self.config.to_text());
        w.u64(self.step);
        let crc = crc32fast::hash(&w.buf);
        w.u32(crc);
        w.u32(self.segments.len() as u32);
        for s in &self.segments {
            let start = w.buf.len();
            w.str(&s.name);
            w.u64(s.tensor.rows as u64);
            w.u64(s.tensor.cols as u64);
            w.f32s(&s.tensor.data);
            let crc = crc32fast::hash(&w.buf[start..]);
            w.u32(crc);
        }
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(data, "checkpoint");
        if r.take(8).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(Error::Format("not a meshflow checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (this build reads version {CHECKPOINT_VERSION})"
            )));
        }
        let kind = r.str()?;
        let config = KvMap::parse(&r.str()?)?;
        let step = r.u64()?;
        let expected = crc32fast::hash(&data[..r.pos]);
        if r.u32()? != expected {
            return Err(Error::Format("checkpoint header checksum mismatch".into()));
        }
        let count = r.u32()? as usize;
        let mut segments = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let start = r.pos;
            let name = r.str()?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows.checked_mul(cols).ok_or_else(|| Error::Format(format!("segment {name}: shape overflow")))?;
            let values = r.f32s(n)?;
            let expected = crc32fast::hash(&data[start..r.pos]);
            if r.u32()? != expected {
                return Err(Error::Format(format!("checksum mismatch in segment {i} ({name})")));
            }
            segments.push(Segment { name, tensor: Tensor::new(rows, cols, values) });
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after the last segment", r.remaining())));
        }
        Ok(Self { kind, config, step, segments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, Tensor};

    fn store() -> ParameterStore<f32> {
        let mut s = ParameterStore::new(4);
        s.add("a.weight", 3, 5, Init::TruncNormal(1.0));
        s.add("b.gain", 1, 4, Init::Ones);
        s
    }

    fn config() -> KvMap {
        let mut c = KvMap::new();
        c.set("model.hidden", 32);
        c.set("lr", 1e-4);
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = store();
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let mut s2 = s.clone();
        let grads: Vec<Tensor<f32>> = s.iter().map(|(_, p)| p.value.map(|x| x * 0.5 + 0.1)).collect();
        opt.step(&mut s2, &grads).unwrap();
        let ck = Checkpoint::from_training("vae", config(), &s2, Some(&opt));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
        let mut fresh = store();
        back.load_parameters(&mut fresh).unwrap();
        for ((_, a), (_, b)) in fresh.iter().zip(s2.iter()) {
            assert!(a.value.data.iter().zip(&b.value.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let restored = back.load_optimizer(AdamWConfig::default(), &fresh).unwrap();
        assert_eq!(restored.step_count(), 1);
        assert_eq!(restored.moments().0, opt.moments().0);
        assert_eq!(restored.moments().1, opt.moments().1);
    }

    #[test]
    fn version_and_magic_are_checked() {
        let mut bytes = Checkpoint::from_training("dit", config(), &store(), None).to_bytes();
        bytes[8] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
        assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
    }

    #[test]
    fn corruption_names_the_segment() {
        let ck = Checkpoint::from_training("dit", config(), &store(), None);
        let mut bytes = ck.to_bytes();
        let last = bytes.len() - 6;
        bytes[last] ^= 0x10;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("b.gain"), "{err}");
        let truncated = &ck.to_bytes()[..40];
        assert!(Checkpoint::from_bytes(truncated).is_err());
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let ck = Checkpoint::from_training("vae", config(), &store(), None);
        let mut other = ParameterStore::<f32>::new(1);
        other.add("a.weight", 5, 3, Init::Zeros);
        assert!(ck.load_parameters(&mut other).is_err());
        assert!(ck.expect_kind("dit").is_err());
        assert!(ck.load_optimizer(AdamWConfig::default(), &store()).is_err());
    }
}
