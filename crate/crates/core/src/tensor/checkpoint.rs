//! Binary checkpoint format. All integers little-endian.
//!
//! ```text
//! magic       4 bytes  "PFLC"
//! version     u32
//! meta_len    u32, then meta_len bytes of UTF-8 (JSON metadata, may be empty)
//! count       u32      number of tensors
//! per tensor, in sorted-name order:
//!   name_len u32, name bytes, tag u8 (0 federated, 1 private),
//!   rows u32, cols u32, rows*cols f64 values row-major
//! ```
//!
//! Gradients are not stored. The encoding of a given ParamSet is byte-stable.

use std::fs;
use std::path::Path;

use super::{Matrix, ParamSet, ParamTag};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PFLC";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: String,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(meta: impl Into<String>, params: ParamSet) -> Self {
        Checkpoint {
            meta: meta.into(),
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.meta.len() + self.params.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_FORMAT_VERSION);
        put_bytes(&mut out, self.meta.as_bytes());
        put_u32(&mut out, self.params.len() as u32);
        for t in self.params.iter() {
            put_bytes(&mut out, t.name.as_bytes());
            out.push(t.tag.to_byte());
            put_matrix(&mut out, &t.value);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Schema(format!("unsupported checkpoint version {version}")));
        }
        let meta = r.string()?;
        let count = r.u32()?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name = r.string()?;
            let tag = ParamTag::from_byte(r.u8()?)?;
            let value = r.matrix()?;
            params.insert(name, value, tag)?;
        }
        r.finish()?;
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

pub(crate) fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    put_u32(out, m.rows() as u32);
    put_u32(out, m.cols() as u32);
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated input at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }

    pub(crate) fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("matrix size overflow".into()))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("matrix size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::new(rows, cols, data)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}
