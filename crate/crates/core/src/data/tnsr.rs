//! `TNSR` tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "TNSR" | u32 version (=1) | u32 ndim | ndim × u32 dims | f32 payload, row-major
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u32 = 1;

/// Exact encoded size for a shape.
pub fn encoded_len(shape: &[usize]) -> usize {
    4 + 4 + 4 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}

pub fn encode<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.reserve(encoded_len(t.shape()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
}

/// Byte cursor that reports failures with the offending offset.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn fail(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(
                self.pos,
                format!("truncated: needed {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn tensor(&mut self) -> Result<Tensor> {
        let start = self.pos;
        if self.take(4)? != MAGIC {
            return Err(self.fail(start, "bad magic, expected TNSR"));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(self.fail(start + 4, format!("unsupported version {version}")));
        }
        let ndim_at = self.pos;
        let ndim = self.u32()? as usize;
        if ndim == 0 {
            return Err(self.fail(ndim_at, "zero dimensions"));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let at = self.pos;
            let d = self.u32()? as usize;
            if d == 0 {
                return Err(self.fail(at, "zero-sized dimension"));
            }
            shape.push(d);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| self.fail(ndim_at, "shape overflows"))?;
        let payload = self.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| self.fail(ndim_at, "shape overflows"))?,
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader::new(bytes, path);
    let t = r.tensor()?;
    if !r.at_end() {
        return Err(r.fail(r.pos(), "trailing bytes after payload"));
    }
    Ok(t)
}

pub fn save_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode(t, &mut buf);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
