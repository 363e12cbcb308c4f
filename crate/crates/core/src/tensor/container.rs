//! Binary tensor container.
//!
//! Layout (little-endian): magic `CALT`, version `u32`, dtype code `u8`
//! (0 = f64, 1 = f32), rank `u8`, one `u64` per extent, then the payload in
//! row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

use super::Tensor;

pub const MAGIC: [u8; 4] = *b"CALT";
const VERSION: u32 = 1;

/// Serializes `tensor`, converting elements to `dtype`.
pub fn write_tensor_to<T: Scalar, W: Write>(w: &mut W, tensor: &Tensor<T>, dtype: DType) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * tensor.rank() + dtype.width() * tensor.numel());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(dtype.code());
    buf.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F64 => tensor
            .data()
            .iter()
            .for_each(|v| buf.extend_from_slice(&v.as_f64().to_le_bytes())),
        DType::F32 => tensor
            .data()
            .iter()
            .for_each(|v| buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes())),
    }
    w.write_all(&buf)
}

/// Reads one tensor, converting from the stored dtype to `T`.
pub fn read_tensor_from<T: Scalar, R: Read>(r: &mut R, origin: &Path) -> Result<Tensor<T>> {
    let io = |e| Error::io(origin, e);
    let mut head = [0u8; 10];
    r.read_exact(&mut head).map_err(io)?;
    if head[..4] != MAGIC {
        return Err(Error::format(origin, "bad magic"));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(origin, format!("unsupported version {version}")));
    }
    let dtype = DType::from_code(head[8]).ok_or_else(|| Error::format(origin, format!("dtype code {}", head[8])))?;
    let rank = head[9] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(io)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * dtype.width()];
    r.read_exact(&mut payload).map_err(io)?;
    let data: Vec<T> = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect(),
    };
    Tensor::new(shape, data).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn write_tensor<T: Scalar>(path: &Path, tensor: &Tensor<T>, dtype: DType) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor_to(&mut w, tensor, dtype).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor_from(&mut BufReader::new(file), path)
}
