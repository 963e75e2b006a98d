//! Little-endian tensor encoding shared by scene files and checkpoints.
//!
//! Layout: `b"SKDT"`, `u32` rank, `rank x u64` dims, then `f64` values.

use std::io::{Read, Write};

use skd_autodiff::Tensor;

use crate::error::{CoreError, Result};

const MAGIC: &[u8; 4] = b"SKDT";

pub fn write_tensor(out: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 8 * t.shape().len() + 8 * t.numel());
    write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
    buf
}

fn corrupt(what: &str) -> CoreError {
    CoreError::contract(format!("malformed tensor data: {what}"))
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| corrupt("truncated u32"))?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| corrupt("truncated u64"))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| corrupt("missing header"))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(corrupt("rank too large"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(r)? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= 1 << 28)
        .ok_or_else(|| corrupt("element count too large"))?;
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| corrupt("truncated data"))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut cursor = bytes;
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(t)
}
