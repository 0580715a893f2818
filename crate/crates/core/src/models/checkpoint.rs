//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "HSLB" | u32 version | u32 blob_len | blob (JSON arch config) | u64 fingerprint
//! | u32 n_arrays | n × (u16 name_len | name | u8 dtype=0 | u8 ndim | ndim × u32 dim | f32 payload)
//! | u32 CRC32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{ArchConfig, ModelParams};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HSLB";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let blob = params.arch.blob();
    let mut out = Vec::with_capacity(64 + params.count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(blob.as_bytes());
    out.extend_from_slice(&params.fingerprint().to_le_bytes());
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in &params.tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return Err(Error::Crc);
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version(version));
    }
    let blob_len = r.u32()? as usize;
    let blob = std::str::from_utf8(r.take(blob_len)?)
        .map_err(|_| Error::Checkpoint("config blob is not UTF-8".into()))?;
    let arch: ArchConfig = serde_json::from_str(blob)?;
    let stored = r.u64()?;
    if stored != arch.fingerprint() {
        return Err(Error::Fingerprint {
            expected: arch.fingerprint(),
            found: stored,
        });
    }
    let n = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("{name}: unsupported dtype {dtype}")));
        }
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let payload = r.take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate array {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after arrays".into()));
    }
    let params = ModelParams { arch, tensors };
    params.check_layout()?;
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    crate::raster::write_bytes(path.as_ref(), &encode_checkpoint(params))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and requires it to match `arch`.
pub fn load_checkpoint_as(path: impl AsRef<Path>, arch: &ArchConfig) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    if params.fingerprint() != arch.fingerprint() {
        return Err(Error::Fingerprint {
            expected: arch.fingerprint(),
            found: params.fingerprint(),
        });
    }
    Ok(params)
}
