//! Portable tensor records: `b"ACT1"`, little-endian `u32` rank, `rank`
//! little-endian `u32` dims, then the payload as little-endian `f32` in
//! row-major order. A file may hold several records back to back.

use std::io::{Read, Write};
use std::path::Path;

use super::{Shape, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ACT1";

pub fn write_record(out: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&4u32.to_le_bytes())?;
    for d in t.shape().dims() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn encode(tensors: &[Tensor]) -> Vec<u8> {
    let mut buf = Vec::new();
    for t in tensors {
        write_record(&mut buf, t).expect("writing to a Vec cannot fail");
    }
    buf
}

/// Decodes every record in `bytes`. Records of rank below 4 are padded with
/// leading unit dimensions.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<Vec<Tensor>> {
    let mut cursor = bytes;
    let mut out = Vec::new();
    let bad = |detail: String| Error::format(origin, detail);
    while !cursor.is_empty() {
        let idx = out.len();
        let mut magic = [0u8; 4];
        cursor.read_exact(&mut magic).map_err(|_| bad(format!("record {idx}: truncated magic")))?;
        if &magic != MAGIC {
            return Err(bad(format!("record {idx}: bad magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        let mut read_u32 = |c: &mut &[u8], what: &str| -> Result<u32> {
            c.read_exact(&mut word).map_err(|_| bad(format!("record {idx}: truncated {what}")))?;
            Ok(u32::from_le_bytes(word))
        };
        let rank = read_u32(&mut cursor, "rank")? as usize;
        if rank > 4 {
            return Err(bad(format!("record {idx}: rank {rank} exceeds 4")));
        }
        let mut dims = [1usize; 4];
        for d in 0..rank {
            dims[4 - rank + d] = read_u32(&mut cursor, "dims")? as usize;
        }
        let shape = Shape::from(dims);
        let nbytes = shape.numel() * 4;
        if cursor.len() < nbytes {
            return Err(bad(format!("record {idx}: payload truncated ({} of {nbytes} bytes)", cursor.len())));
        }
        let (payload, rest) = cursor.split_at(nbytes);
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        out.push(Tensor::from_vec(shape, data)?);
        cursor = rest;
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
