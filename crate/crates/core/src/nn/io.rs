//! Versioned binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"DRM1"
//! version  u32
//! records  until EOF:
//!   id_len u32, id UTF-8 bytes,
//!   rank u32, dims u32 × rank,
//!   payload f32 × product(dims)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DRM1";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_records(records: &[(String, Tensor)]) -> Vec<u8> {
    let payload: usize = records
        .iter()
        .map(|(k, t)| 12 + k.len() + 4 * t.shape().len() + 4 * t.len())
        .sum();
    let mut buf = Vec::with_capacity(8 + payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (id, t) in records {
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_records(bytes: &[u8], origin: &Path) -> Result<Vec<(String, Tensor)>> {
    let bad = |reason: &str| Error::Format {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err(bad("missing DRM1 magic"));
    }
    let version = r.u32().ok_or_else(|| bad("truncated header"))?;
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32().ok_or_else(|| bad("truncated id length"))? as usize;
        let id = r.take(len).ok_or_else(|| bad("truncated id"))?;
        let id = String::from_utf8(id.to_vec()).map_err(|_| bad("id is not UTF-8"))?;
        let rank = r.u32().ok_or_else(|| bad("truncated rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32().ok_or_else(|| bad("truncated shape"))? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r
            .take(n.checked_mul(4).ok_or_else(|| bad("oversized record"))?)
            .ok_or_else(|| bad("truncated payload"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((id, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Writes to a sibling temp file first so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_records(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    write_atomic(path, &encode_records(records))
}

pub fn load_records(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_records(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let bytes = encode_records(&[("a".into(), t)]);
        assert_eq!(&bytes[..4], b"DRM1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(bytes[12], b'a');
        assert_eq!(&bytes[13..17], &1u32.to_le_bytes());
        assert_eq!(&bytes[17..21], &2u32.to_le_bytes());
        assert_eq!(&bytes[21..25], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 29);
    }

    #[test]
    fn truncated_container_is_rejected() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode_records(&[("w".into(), t)]);
        let err = decode_records(&bytes[..bytes.len() - 2], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(decode_records(b"NOPE\x01\0\0\0", Path::new("x")).is_err());
    }

    proptest! {
        #[test]
        fn records_round_trip(
            entries in prop::collection::vec(
                ("[a-z.0-9]{1,12}", prop::collection::vec(1usize..4, 0..3), any::<u32>()),
                0..5,
            )
        ) {
            let records: Vec<(String, Tensor)> = entries
                .into_iter()
                .map(|(id, shape, seed)| {
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|i| (seed as f32) * 1e-3 - i as f32).collect();
                    (id, Tensor::new(shape, data).unwrap())
                })
                .collect();
            let back = decode_records(&encode_records(&records), Path::new("mem")).unwrap();
            prop_assert_eq!(back, records);
        }
    }
}
