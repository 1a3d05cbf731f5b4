//! `RT01` raw tensor files: magic, little-endian u32 rank and dims, then
//! row-major little-endian `f32` values.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const RT01_MAGIC: [u8; 4] = *b"RT01";

pub fn write_rt01(t: &Tensor, w: &mut impl Write) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    buf.extend_from_slice(&RT01_MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_rt01(r: &mut impl Read) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("<rt01 stream>", e))?;
    parse(&bytes)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Truncated(format!(
            "RT01 ends inside {what} ({} of {n} bytes)",
            bytes.len()
        )));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn u32_le(bytes: &mut &[u8], what: &str) -> Result<u32> {
    let b = take(bytes, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn parse(mut bytes: &[u8]) -> Result<Tensor> {
    let magic = take(&mut bytes, 4, "magic")?;
    if magic != RT01_MAGIC {
        return Err(Error::BadMagic {
            expected: RT01_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let rank = u32_le(&mut bytes, "rank")? as usize;
    let dims = (0..rank)
        .map(|_| u32_le(&mut bytes, "dims").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = dims.iter().product();
    let raw = take(&mut bytes, 4 * n, "values")?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&dims, data)
}
