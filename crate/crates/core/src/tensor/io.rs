//! Raw tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | field   | type        |
//! |---------|-------------|
//! | magic   | `b"UHTN"`   |
//! | version | `u32` (= 1) |
//! | ndim    | `u32`       |
//! | dims    | `u64 × ndim`|
//! | payload | `f64 × Πdims`, row-major |

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"UHTN";
pub const TENSOR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported tensor file version {0}")]
    Version(u32),
    #[error("malformed tensor payload: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor, TensorIoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(TensorIoError::BadMagic {
            found: magic,
            expected: *TENSOR_MAGIC,
        });
    }
    let version = read_u32(r)?;
    if version != TENSOR_VERSION {
        return Err(TensorIoError::Version(version));
    }
    let ndim = read_u32(r)? as usize;
    if ndim > 16 {
        return Err(TensorIoError::Malformed(format!("{ndim} dimensions")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n < (1 << 32))
        .ok_or_else(|| TensorIoError::Malformed(format!("shape {shape:?}")))?;
    let mut raw = vec![0u8; numel * 8];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| TensorIoError::Malformed(e.to_string()))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> io::Result<()> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t)?;
    f.flush()
}

pub fn load_tensor(path: &Path) -> Result<Tensor, TensorIoError> {
    let mut f = io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}
