//! Little-endian binary model files: an 8-byte magic, `u64` header
//! fields, then raw `f64` blocks.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamSet};

pub(crate) struct BinWriter {
    buf: Vec<u8>,
}

impl BinWriter {
    pub fn new(magic: &[u8; 8]) -> Self {
        Self {
            buf: magic.to_vec(),
        }
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, values: &[f64]) -> &mut Self {
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn params(&mut self, params: &ParamSet) -> &mut Self {
        for p in params.iter() {
            self.f64s(p.value.data());
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct BinReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BinReader<'a> {
    pub fn new(bytes: &'a [u8], magic: &[u8; 8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != magic {
            return Err(Error::format(format!(
                "expected magic {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(Self { bytes, pos: 8 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format("unexpected end of model file"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format("header value too large"))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format("block too large"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Overwrites every parameter value in declaration order.
    pub fn params_into(&mut self, params: &mut ParamSet) -> Result<()> {
        for p in params.iter_mut() {
            let (r, c) = p.value.shape();
            let data = self.f64s(r * c)?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(format!("non-finite value in `{}`", p.name)));
            }
            p.value = Matrix::from_vec(r, c, data)?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(format!(
                "{} trailing bytes in model file",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
