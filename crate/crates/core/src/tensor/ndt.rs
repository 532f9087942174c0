//! NDT1 binary tensor records.
//!
//! Layout: magic `NDT1`, `u32` LE rank, `rank x u64` LE extents, then the
//! row-major payload as little-endian IEEE-754 `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Result, Scalar, Tensor, TensorError};

pub const NDT_MAGIC: [u8; 4] = *b"NDT1";

// Guards against absurd headers in corrupted files.
const MAX_RANK: u32 = 16;

pub fn write_ndt_to<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(&NDT_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &n in t.shape() {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one record. Returns `Ok(None)` on a clean end of stream.
pub fn read_ndt_from<T: Scalar, R: Read>(r: &mut R) -> Result<Option<Tensor<T>>> {
    let mut magic = [0u8; 4];
    match read_exact_or_eof(r, &mut magic)? {
        false => return Ok(None),
        true if magic != NDT_MAGIC => {
            return Err(TensorError::Format(format!("bad magic {magic:?}")))
        }
        true => {}
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4);
    if rank > MAX_RANK {
        return Err(TensorError::Format(format!("rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8);
        shape.push(usize::try_from(n).map_err(|_| TensorError::Format("extent overflow".into()))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| TensorError::Format("element count overflow".into()))?;
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data).map(Some)
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(TensorError::Format("truncated record".into()));
        }
        filled += n;
    }
    Ok(true)
}

pub fn write_ndt<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ndt_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_ndt<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut r = BufReader::new(File::open(path)?);
    read_ndt_from(&mut r)?.ok_or_else(|| TensorError::Format("empty file".into()))
}
