//! `LORT` tensor blob: magic, `u32` version, `u32` rank, `u64` extents,
//! then the `f32` payload; all little-endian.

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const BLOB_MAGIC: [u8; 4] = *b"LORT";
pub const BLOB_VERSION: u32 = 1;
/// Rank limit enforced on read; guards against absurd headers.
pub const MAX_RANK: u32 = 8;

pub fn write_blob<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&BLOB_MAGIC)?;
    w.write_all(&BLOB_VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn blob_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.rank() + 4 * t.numel());
    write_blob(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::Blob(format!("truncated {what}")),
        _ => TensorError::Io(e),
    })?;
    Ok(b)
}

/// Reads one blob, consuming exactly its bytes from `r`.
pub fn read_blob<R: Read>(r: &mut R) -> Result<Tensor> {
    let magic: [u8; 4] = read_exact(r, "magic")?;
    if magic != BLOB_MAGIC {
        return Err(TensorError::Blob(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_exact(r, "version")?);
    if version != BLOB_VERSION {
        return Err(TensorError::Blob(format!("unsupported version {version}")));
    }
    let rank = u32::from_le_bytes(read_exact(r, "rank")?);
    if rank > MAX_RANK {
        return Err(TensorError::Blob(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count: usize = 1;
    for _ in 0..rank {
        let d = u64::from_le_bytes(read_exact(r, "extent")?);
        let d = usize::try_from(d).map_err(|_| TensorError::Blob("extent overflows usize".into()))?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| TensorError::Blob("element count overflows".into()))?;
        shape.push(d);
    }
    let bytes = count
        .checked_mul(4)
        .ok_or_else(|| TensorError::Blob("payload size overflows".into()))?;
    // Read incrementally so a lying header cannot force a huge allocation.
    let mut payload = Vec::new();
    r.take(bytes as u64).read_to_end(&mut payload)?;
    if payload.len() != bytes {
        return Err(TensorError::Blob(format!(
            "payload truncated: {} of {bytes} bytes",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

/// Parses a buffer holding exactly one blob.
pub fn blob_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = bytes;
    let t = read_blob(&mut cur)?;
    if !cur.is_empty() {
        return Err(TensorError::Blob(format!("{} trailing bytes", cur.len())));
    }
    Ok(t)
}
