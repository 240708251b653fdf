//! `SRWT` v1 weight container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        b"SRWT"
//! version      u32 = 1
//! config       u32 × 6: n_c, n_l, n_b, kernel, scale, in_channels
//! count        u32 number of tensor records
//! record × count:
//!   name_len   u32, then name_len bytes of UTF-8
//!   rank       u32, then rank × u64 dims
//!   payload    product(dims) × f32
//! ```

use std::fs;
use std::path::Path;

use super::{ModelConfig, SRModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SRWT";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &SRModel) -> Vec<u8> {
    let c = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.n_c, c.n_l, c.n_b, c.kernel, c.scale, c.in_channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {} (wanted {n} more)", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<SRModel> {
    let fail = |m: String| Error::format(origin, m);
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(fail)? != MAGIC {
        return Err(fail("not an SRWT file (bad magic)".into()));
    }
    let version = r.u32().map_err(fail)?;
    if version != VERSION {
        return Err(fail(format!("unsupported SRWT version {version}")));
    }
    let mut cfg = [0usize; 6];
    for v in &mut cfg {
        *v = r.u32().map_err(fail)? as usize;
    }
    let config = ModelConfig {
        n_c: cfg[0],
        n_l: cfg[1],
        n_b: cfg[2],
        kernel: cfg[3],
        scale: cfg[4],
        in_channels: cfg[5],
    };
    let count = r.u32().map_err(fail)? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32().map_err(fail)? as usize;
        let name = std::str::from_utf8(r.take(len).map_err(fail)?)
            .map_err(|e| fail(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32().map_err(fail)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64().map_err(fail)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| fail(format!("tensor `{name}` dims overflow")))?;
        let raw = r
            .take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| fail("payload too large".into()))?,
            )
            .map_err(fail)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| fail(format!("tensor `{name}`: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    SRModel::from_params(config, tensors).map_err(|e| fail(e.to_string()))
}

pub fn save(model: &SRModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<SRModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
