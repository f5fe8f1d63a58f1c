//! RST1 container: `"RST1"`, u32 LE header length, JSON header
//! `{"shape":[..],"dtype":"f32"}`, then little-endian f32 payload in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RST1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    shape: Vec<usize>,
    dtype: String,
}

pub fn encode(shape: &[usize], values: &[f32]) -> Vec<u8> {
    debug_assert_eq!(shape.iter().product::<usize>(), values.len());
    let header = serde_json::to_vec(&Header {
        shape: shape.to_vec(),
        dtype: "f32".to_string(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + values.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    let bad_header = |detail: String| Error::BadHeader {
        path: path.into(),
        detail,
    };
    if bytes.len() < 8 {
        return Err(bad_header("missing header length".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() < hlen {
        return Err(bad_header(format!("header length {} exceeds file", hlen)));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad_header(e.to_string()))?;
    if header.dtype != "f32" {
        return Err(bad_header(format!("unsupported dtype `{}`", header.dtype)));
    }
    let numel = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad_header("shape overflows".into()))?;
    let payload = &body[hlen..];
    let expected = numel * 4;
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            path: path.into(),
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::ShapeLength {
            path: path.into(),
            detail: format!(
                "shape {:?} needs {} bytes, payload has {}",
                header.shape,
                expected,
                payload.len()
            ),
        });
    }
    let mut values = Vec::with_capacity(numel);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::NonFiniteValue {
                path: path.into(),
                index: i,
            });
        }
        values.push(v);
    }
    Ok((header.shape, values))
}

pub fn read(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, shape: &[usize], values: &[f32]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode(shape, values)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem.rst")
    }

    #[test]
    fn single_value() {
        let bytes = encode(&[1, 1, 1], &[0.5]);
        assert_eq!(&bytes[..4], b"RST1");
        let (shape, values) = decode(&bytes, p()).unwrap();
        assert_eq!(shape, vec![1, 1, 1]);
        assert_eq!(values, vec![0.5]);
    }

    #[test]
    fn header_is_compact_json() {
        let bytes = encode(&[2, 1, 3], &[0.0; 6]);
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        assert_eq!(&bytes[8..8 + hlen], br#"{"shape":[2,1,3],"dtype":"f32"}"#);
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = encode(&[2, 2, 2], &[1.0; 8]);
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(decode(&bytes, p()), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn excess_payload() {
        let mut bytes = encode(&[1, 1, 1], &[1.0]);
        bytes.extend_from_slice(&1f32.to_le_bytes());
        assert!(matches!(decode(&bytes, p()), Err(Error::ShapeLength { .. })));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&[1, 1, 1], &[1.0]);
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, p()), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn non_finite() {
        let bytes = encode(&[1, 1, 2], &[1.0, f32::NAN]);
        assert!(matches!(
            decode(&bytes, p()),
            Err(Error::NonFiniteValue { index: 1, .. })
        ));
    }
}
