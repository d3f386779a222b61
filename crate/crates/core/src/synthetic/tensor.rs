//! Raw-tensor container (`.rt`).
//!
//! Layout, all little-endian: 4-byte magic `GLRT`, `u32` dtype code
//! (1 = float32), `u32` rank, `rank × u64` dims, then the row-major payload.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{GeoLinkError, Result};

pub const MAGIC: &[u8; 4] = b"GLRT";
pub const DTYPE_F32: u32 = 1;

pub fn encode(t: &ArrayD<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.ndim() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ArrayD<f32>> {
    let bad = |offset: usize, message: &str| GeoLinkError::ParseError {
        file: path.to_path_buf(),
        line: offset,
        message: format!("byte {offset}: {message}"),
    };
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| bad(at, "truncated header"))
    };
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(bad(0, "bad magic"));
    }
    let dtype = word(4)?;
    if dtype != DTYPE_F32 {
        return Err(bad(4, &format!("unsupported dtype code {dtype}")));
    }
    let rank = word(8)? as usize;
    let mut dims = Vec::with_capacity(rank);
    let mut at = 12;
    for _ in 0..rank {
        let d = bytes
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .ok_or_else(|| bad(at, "truncated dims"))?;
        dims.push(d as usize);
        at += 8;
    }
    let count: usize = dims.iter().product();
    let payload = &bytes[at..];
    if payload.len() != 4 * count {
        return Err(bad(at, &format!("expected {} payload bytes, found {}", 4 * count, payload.len())));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| bad(at, &e.to_string()))
}

pub fn write_tensor(path: &Path, t: &ArrayD<f32>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<ArrayD<f32>> {
    if !path.exists() {
        return Err(GeoLinkError::MissingView(path.to_path_buf()));
    }
    decode(&fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = ArrayD::from_shape_vec(IxDyn(&[2, 1]), vec![1.5f32, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"GLRT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 2);
        assert_eq!(b.len(), 12 + 16 + 8);
        assert_eq!(f32::from_le_bytes(b[28..32].try_into().unwrap()), 1.5);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let t = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut b = encode(&t);
        b.pop();
        let err = decode(&b, Path::new("x.rt")).unwrap_err().to_string();
        assert!(err.contains("byte 20"), "{err}");
    }

    proptest! {
        #[test]
        fn round_trip(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let vals: Vec<f32> = (0..n).map(|i| (i as f32 + seed as f32).sin()).collect();
            let t = ArrayD::from_shape_vec(IxDyn(&dims), vals).unwrap();
            prop_assert_eq!(decode(&encode(&t), Path::new("p.rt")).unwrap(), t);
        }
    }
}
