//! SCTF tensor container.
//!
//! Layout: `b"SCTF"`, version `0x01`, dtype byte (0 = f32, 1 = f64), rank
//! byte, `rank` little-endian `u64` dimensions, then the row-major data as
//! little-endian scalars of the declared dtype.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"SCTF";
pub const VERSION: u8 = 0x01;

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let dtype = tensor.dtype();
    let mut out = Vec::with_capacity(7 + 8 * tensor.rank() + dtype.size_of() * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F32 => tensor
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => tensor
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated {what}: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Parses an SCTF buffer; `path` is used only for diagnostics.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    if cur.take(4, "magic")? != MAGIC {
        cur.pos = 0;
        return Err(cur.fail("bad magic, expected SCTF"));
    }
    let version = cur.take(1, "version")?[0];
    if version != VERSION {
        cur.pos -= 1;
        return Err(cur.fail(format!("unsupported version {version}")));
    }
    let code = cur.take(1, "dtype")?[0];
    let dtype = DType::from_code(code).ok_or_else(|| {
        cur.pos -= 1;
        cur.fail(format!("unknown dtype code {code}"))
    })?;
    let rank = cur.take(1, "rank")?[0] as usize;
    if rank == 0 {
        cur.pos -= 1;
        return Err(cur.fail("rank must be at least 1"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let raw = u64::from_le_bytes(cur.take(8, "dimension")?.try_into().unwrap());
        if raw == 0 || raw > usize::MAX as u64 {
            cur.pos -= 8;
            return Err(cur.fail(format!("invalid dimension {raw}")));
        }
        shape.push(raw as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| cur.fail("element count overflows"))?;
    let width = dtype.size_of();
    let payload = cur.take(
        numel
            .checked_mul(width)
            .ok_or_else(|| cur.fail("payload size overflows"))?,
        "data",
    )?;
    if cur.pos != bytes.len() {
        return Err(cur.fail(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Tensor::with_dtype(&shape, data, dtype)
}

pub fn save(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode(tensor))
        .map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
