//! Unsigned-byte IDX files (the MNIST container format).
//!
//! Layout: two zero bytes, a dtype byte (`0x08` for u8), a rank byte, one
//! big-endian `u32` per dimension, then the values in row-major order.
//! Pixel bytes `p` are mapped to `p / 127.5 - 1`, i.e. into `[-1, 1]`.

use std::path::Path;

use crate::datakit::mixture::{Origin, SampleSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DTYPE_U8: u8 = 0x08;

/// A decoded IDX file: one row per item, items flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub set: SampleSet,
    /// Shape of a single item before flattening (e.g. `[28, 28]`).
    pub item_shape: Vec<usize>,
}

pub fn byte_to_unit(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

pub fn unit_to_byte(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxImages> {
    if bytes.len() < 4 {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("header needs 4 bytes, file has {}", bytes.len()),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {:02x} {:02x}", bytes[0], bytes[1]),
        });
    }
    if bytes[2] != DTYPE_U8 {
        return Err(Error::Format {
            offset: 2,
            message: format!("unsupported dtype 0x{:02x} (only u8 images)", bytes[2]),
        });
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(Error::Format {
            offset: 3,
            message: "rank must be at least 1".into(),
        });
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("truncated header: expected {header} bytes, got {}", bytes.len()),
        });
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let count: usize = dims.iter().product();
    let expected = header + count;
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected),
            message: format!(
                "expected {expected} bytes for dims {dims:?}, got {}",
                bytes.len()
            ),
        });
    }
    let n = dims[0];
    let item_shape = dims[1..].to_vec();
    let cols: usize = item_shape.iter().product();
    let data = bytes[header..].iter().map(|&p| byte_to_unit(p)).collect();
    Ok(IdxImages {
        set: SampleSet::new(Tensor::matrix(n, cols, data)?, Origin::Real, None),
        item_shape,
    })
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxImages> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

/// Encodes `set` with the given per-item shape. Values are quantized back to
/// bytes, so a set that came from [`load_idx`] survives bit for bit.
pub fn write_idx(set: &SampleSet, item_shape: &[usize]) -> Result<Vec<u8>> {
    let per_item: usize = item_shape.iter().product();
    if per_item != set.dim() {
        return Err(Error::dim("idx item shape", set.dim(), format!("{item_shape:?}")));
    }
    let rank = 1 + item_shape.len();
    if rank > u8::MAX as usize {
        return Err(Error::Usage("idx rank exceeds 255".into()));
    }
    let mut out = vec![0, 0, DTYPE_U8, rank as u8];
    for d in std::iter::once(set.len()).chain(item_shape.iter().copied()) {
        let d = u32::try_from(d).map_err(|_| Error::Usage("idx dimension exceeds u32".into()))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend(set.points.data().iter().map(|&x| unit_to_byte(x)));
    Ok(out)
}

pub fn save_idx(set: &SampleSet, item_shape: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_idx(set, item_shape)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
