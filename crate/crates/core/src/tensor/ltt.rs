//! LTT binary tensor container.
//!
//! Layout: magic `LWLT`, `u32` rank, `rank × u32` dims, then row-major
//! `f64` payload. All integers and floats little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LWLT";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = bytes;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::Format(format!(
                "truncated {what}: need {n} bytes, {} left",
                cur.len()
            )));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected LWLT".into()));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let rank = u32_at(take(4, "rank")?);
    if rank == 0 {
        return Err(Error::Format("rank must be positive".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32_at(take(4, "dims")?));
    }
    if shape.contains(&0) {
        return Err(Error::Format(format!("zero dimension in {shape:?}")));
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    let payload = take(len.checked_mul(8).ok_or_else(|| Error::Format("shape overflows".into()))?, "payload")?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if !cur.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", cur.len())));
    }
    Tensor::new(shape, data)
}

pub fn write_to(mut w: impl Write, t: &Tensor) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

pub fn read_from(mut r: impl Read) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode(t))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&std::fs::read(path)?)
}
