//! The `weights.bin` container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic        4 bytes  "EMBW"
//! version      u32      1
//! checksum     u64      CRC32 of every byte after the tensor count, zero-extended
//! count        u32      number of tensors
//! per tensor:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   rank       u8
//!   dims       rank x u64
//!   payload    product(dims) x f32, row-major
//! ```
//!
//! Tensors are written in name order so the same map always produces the
//! same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"EMBW";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 8 + 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::MalformedTensor(format!(
                "dims {dims:?} hold {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }
}

pub type TensorMap = BTreeMap<String, Tensor>;

pub fn encode_weights(tensors: &TensorMap) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let rank =
            u8::try_from(t.dims.len()).map_err(|_| Error::MalformedTensor(format!("{name}: rank {}", t.dims.len())))?;
        let name_len =
            u32::try_from(name.len()).map_err(|_| Error::MalformedTensor(format!("name of {} bytes", name.len())))?;
        payload.extend_from_slice(&name_len.to_le_bytes());
        payload.extend_from_slice(name.as_bytes());
        payload.push(rank);
        for &d in &t.dims {
            payload.extend_from_slice(&(d as u64).to_le_bytes());
        }
        payload.reserve(t.data.len() * 4);
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let count = u32::try_from(tensors.len()).map_err(|_| Error::MalformedTensor("too many tensors".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u64::from(crc32fast::hash(&payload)).to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a full `weights.bin` image. Structure is checked before the
/// checksum so a short file reports [`Error::Truncated`].
pub fn decode_weights(bytes: &[u8]) -> Result<TensorMap> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let checksum = cur.u64()?;
    let count = cur.u32()?;
    let payload_start = cur.pos;

    let mut tensors = TensorMap::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::MalformedTensor(format!("tensor name not UTF-8: {e}")))?
            .to_owned();
        let rank = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = cur.u64()?;
            dims.push(usize::try_from(d).map_err(|_| Error::MalformedTensor(format!("{name}: dim {d}")))?);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::MalformedTensor(format!("{name}: dims overflow")))?;
        let raw = cur.take(numel.checked_mul(4).ok_or(Error::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if tensors.contains_key(&name) {
            return Err(Error::DuplicateTensor(name));
        }
        tensors.insert(name, Tensor { dims, data });
    }
    if cur.pos != bytes.len() {
        return Err(Error::TrailingBytes(bytes.len() - cur.pos));
    }
    let actual = u64::from(crc32fast::hash(&bytes[payload_start..]));
    if actual != checksum {
        return Err(Error::ChecksumMismatch {
            expected: checksum,
            actual,
        });
    }
    Ok(tensors)
}

pub fn read_weights(path: &Path) -> Result<TensorMap> {
    decode_weights(&std::fs::read(path)?)
}

pub fn write_weights(path: &Path, tensors: &TensorMap) -> Result<()> {
    std::fs::write(path, encode_weights(tensors)?)?;
    Ok(())
}
