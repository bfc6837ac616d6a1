//! Flat binary tensor container ("MTLW").
//!
//! Layout, all integers little-endian `u32`:
//! magic `MTLW`, version, tensor count, then per tensor: name length, UTF-8
//! name, rank, dims, and `prod(dims)` little-endian `f32` values.
//!
//! Values are stored at 32-bit precision; anything else is rounded on write.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{io_at, Error, Result};
use crate::tensor::{Tag, Tensor};

pub const MAGIC: &[u8; 4] = b"MTLW";
pub const VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&len_u32(tensors.len())?.to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&len_u32(bytes.len())?.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&len_u32(t.rank())?.to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&len_u32(d)?.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.numel());
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads every tensor; they come back tagged `tag` and frozen.
pub fn read_tensors<R: Read>(mut r: R, tag: Tag) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic, not an MTLW file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name}: dims overflow")))?;
        let mut raw = vec![0u8; numel.checked_mul(4).ok_or_else(|| {
            Error::Format(format!("tensor {name}: too large"))
        })?];
        r.read_exact(&mut raw).map_err(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((name, Tensor::new(shape, data, tag)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, tensors)?;
    fs::write(path, buf).map_err(|e| io_at(path, e))
}

pub fn load(path: &Path, tag: Tag) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| io_at(path, e))?;
    read_tensors(bytes.as_slice(), tag)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("file truncated".into())
    } else {
        Error::Io(e)
    }
}

/// Rounds every value to the nearest `f32`, the precision the container keeps.
pub fn round_to_f32(data: &mut [f64]) {
    for v in data {
        *v = *v as f32 as f64;
    }
}
