//! Binary array records: a little-endian `u64` rank, `rank` little-endian
//! `u64` dimensions, then the row-major values as little-endian `f32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Upper bound on the rank a record may declare.
pub const MAX_RANK: usize = 8;

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * (1 + t.shape().len()) + 4 * t.len());
    out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u64(bytes: &[u8], at: usize) -> Result<u64> {
    bytes
        .get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
        .ok_or_else(|| Error::Format(format!("truncated header at byte {at}")))
}

/// Decodes exactly one record; trailing bytes are an error.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    let rank = read_u64(bytes, 0)?;
    if rank as usize > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let rank = rank as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for i in 0..rank {
        let d = read_u64(bytes, 8 + 8 * i)?;
        let d = usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::Format("element count overflows".into()))?;
        shape.push(d);
    }
    let header = 8 * (rank + 1);
    let body = bytes.len() - header.min(bytes.len());
    if count.checked_mul(4) != Some(body) {
        return Err(Error::Format(format!(
            "shape {shape:?} needs {count} values but {body} bytes follow the header"
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor::from_vec(&shape, data))
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
