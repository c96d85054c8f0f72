//! Portable binary container for weight tensors.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "GADW"
//! 4       4     format version (1)
//! 8       4     bytes per entry (4 = f32, 8 = f64)
//! 12      4     tensor count
//! then per tensor:
//!         4     rows
//!         4     cols
//!         r·c·w entries, column-major
//! ```
//!
//! Every integer and entry is little-endian.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

pub const MAGIC: [u8; 4] = *b"GADW";
pub const VERSION: u32 = 1;

pub fn encode<T: Real>(tensors: &[&Matrix<T>]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|m| 8 + m.as_slice().len() * T::BYTES).sum();
    let mut out = Vec::with_capacity(16 + payload);
    out.extend_from_slice(&MAGIC);
    for v in [VERSION, T::BYTES as u32, tensors.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for m in tensors {
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for &x in m.as_slice() {
            x.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(len).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::InvalidConfig(format!(
                "weight container truncated at byte {} (needs {len} more)",
                self.at
            ))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Vec<Matrix<T>>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::InvalidConfig("not a weight container (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::InvalidConfig(format!("unsupported container version {version}")));
    }
    let width = r.u32()? as usize;
    if width != T::BYTES {
        return Err(Error::InvalidConfig(format!(
            "container holds {width}-byte entries, expected {} ({})",
            T::BYTES,
            T::NAME
        )));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(width))
            .ok_or_else(|| Error::InvalidConfig("tensor size overflows".into()))?;
        let data = r.take(len)?.chunks_exact(width).map(T::read_le).collect();
        out.push(Matrix::from_col_major(rows, cols, data)?);
    }
    if r.at != bytes.len() {
        return Err(Error::InvalidConfig(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.at
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_precisions() {
        let a = Matrix::<f64>::from_rows(&[&[1.0, -2.5], &[3.25, 4.0], &[0.0, 1e-300]]);
        let b = Matrix::<f64>::zeros(0, 4);
        let bytes = encode(&[&a, &b]);
        assert_eq!(decode::<f64>(&bytes).unwrap(), vec![a.clone(), b]);
        let s: Matrix<f32> = a.cast();
        assert_eq!(decode::<f32>(&encode(&[&s])).unwrap(), vec![s]);
    }

    #[test]
    fn header_layout() {
        let m = Matrix::<f32>::from_rows(&[&[1.0], &[2.0]]);
        let bytes = encode(&[&m]);
        assert_eq!(&bytes[..4], b"GADW");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 4, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[16..24], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 32);
    }

    #[test]
    fn rejects_malformed_input() {
        let m = Matrix::<f64>::identity(2);
        let bytes = encode(&[&m]);
        assert!(decode::<f32>(&bytes).is_err());
        assert!(decode::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode::<f64>(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(decode::<f64>(&bad).is_err());
    }
}
