//! Little-endian byte buffers for the checkpoint and latent-dataset formats.

use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, x: u32) {
        self.bytes(&x.to_le_bytes());
    }

    pub fn u64(&mut self, x: u64) {
        self.bytes(&x.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.bytes(s.as_bytes());
    }

    pub fn f32s(&mut self, xs: &[f32]) {
        self.buf.reserve(xs.len() * 4);
        for x in xs {
            self.bytes(&x.to_le_bytes());
        }
    }
}

pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pub pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8], what: &'static str) -> Self {
        Self { data, pos: 0, what }
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format(format!("{} truncated at byte {} (needed {n} more)", self.what, self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A `u64` length that must fit in the remaining bytes when multiplied by `unit`.
    pub fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()?;
        match usize::try_from(n).ok().and_then(|n| n.checked_mul(unit).map(|b| (n, b))) {
            Some((n, bytes)) if bytes <= self.remaining() => Ok(n),
            _ => Err(Error::Format(format!("{}: implausible length {n} at byte {}", self.what, self.pos - 8))),
        }
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format(format!("{}: invalid utf-8 string", self.what)))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format(format!("{}: length overflow", self.what)))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
