//! Named-tensor weight files.
//!
//! Layout: the 8-byte tag `MGNETW01`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then the little-endian `f32` blob. Header entries give
//! each tensor's name, dtype, shape, byte offset into the blob and byte length.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MGNETW01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryHeader {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    entries: Vec<EntryHeader>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered, uniquely named tensors plus an optional embedded model config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    names: Vec<String>,
    tensors: HashMap<String, StoredTensor>,
    pub config: Option<serde_json::Value>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor `{name}`: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        if self.tensors.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate tensor name `{name}`")));
        }
        self.names.push(name.to_string());
        self.tensors.insert(
            name.to_string(),
            StoredTensor {
                shape: shape.to_vec(),
                data,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.get(name)
    }

    /// Names in insertion (file) order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.len());
        let mut offset = 0u64;
        for name in &self.names {
            let t = &self.tensors[name];
            let length = 4 * t.data.len() as u64;
            entries.push(EntryHeader {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape.clone(),
                offset,
                length,
            });
            offset += length;
        }
        let header = serde_json::to_vec(&Header {
            entries,
            config: self.config.clone(),
        })
        .map_err(|e| Error::Format(format!("cannot encode header: {e}")))?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for name in &self.names {
            for v in &self.tensors[name].data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing MGNETW01 magic".into()));
        }
        if bytes.len() < 16 {
            return Err(Error::Corrupt("file ends inside the header length".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let blob_start = 16u64
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| Error::Corrupt(format!("header length {header_len} exceeds file size {}", bytes.len())))?
            as usize;
        let header_text = std::str::from_utf8(&bytes[16..blob_start])
            .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
        let header: Header =
            serde_json::from_str(header_text).map_err(|e| Error::Format(format!("malformed header: {e}")))?;
        let blob = &bytes[blob_start..];

        let mut spans = Vec::with_capacity(header.entries.len());
        for e in &header.entries {
            if e.dtype != "f32" {
                return Err(Error::Format(format!("tensor `{}`: unsupported dtype `{}`", e.name, e.dtype)));
            }
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .and_then(|n| n.checked_mul(4));
            if numel != Some(e.length) {
                return Err(Error::Corrupt(format!(
                    "tensor `{}`: length {} does not match shape {:?}",
                    e.name, e.length, e.shape
                )));
            }
            let end = e.offset.checked_add(e.length).filter(|&end| end <= blob.len() as u64);
            let Some(end) = end else {
                return Err(Error::Corrupt(format!(
                    "tensor `{}`: bytes {}..{} lie outside the {}-byte blob",
                    e.name,
                    e.offset,
                    e.offset.saturating_add(e.length),
                    blob.len()
                )));
            };
            spans.push((e.offset, end, e.name.as_str()));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Corrupt(format!("tensors `{}` and `{}` overlap", w[0].2, w[1].2)));
            }
        }
        let total: u64 = header.entries.iter().map(|e| e.length).sum();
        if total != blob.len() as u64 {
            return Err(Error::Corrupt(format!(
                "blob holds {} bytes but entries describe {total}",
                blob.len()
            )));
        }

        let mut store = WeightStore {
            config: header.config,
            ..Default::default()
        };
        for e in &header.entries {
            let raw = &blob[e.offset as usize..(e.offset + e.length) as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store
                .insert(&e.name, &e.shape, data)
                .map_err(|_| Error::Corrupt(format!("duplicate tensor name `{}`", e.name)))?;
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> WeightStore {
        let mut s = WeightStore::new();
        s.insert("a.weight", &[2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE / 4.0, 3.5, f32::MAX, -1e-40])
            .unwrap();
        s.insert("b", &[1], vec![7.0]).unwrap();
        s.insert("empty", &[0, 4], vec![]).unwrap();
        s.config = Some(serde_json::json!({"neck_channels": 8}));
        s
    }

    fn bits(s: &WeightStore) -> Vec<(String, Vec<usize>, Vec<u32>)> {
        s.names()
            .iter()
            .map(|n| {
                let t = s.get(n).unwrap();
                (n.clone(), t.shape.clone(), t.data.iter().map(|v| v.to_bits()).collect())
            })
            .collect()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let s = sample();
        let back = WeightStore::from_bytes(&s.to_bytes().unwrap()).unwrap();
        assert_eq!(bits(&s), bits(&back));
        assert_eq!(back.config, s.config);
    }

    #[test]
    fn layout_starts_with_magic_and_header_length() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"MGNETW01");
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hl]).unwrap();
        assert_eq!(header["entries"][1]["offset"], 24);
        assert_eq!(header["entries"][1]["length"], 4);
        assert_eq!(bytes.len(), 16 + hl + 28);
        assert_eq!(&bytes[16 + hl + 24..], &7.0f32.to_le_bytes());
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(WeightStore::from_bytes(&bytes), Err(Error::Format(_))));
        assert!(matches!(WeightStore::from_bytes(b"MG"), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_corruption() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [bytes.len() - 1, bytes.len() - 4, 20, 12] {
            assert!(
                matches!(WeightStore::from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))),
                "cut at {cut}"
            );
        }
    }

    fn with_header(entries: serde_json::Value, blob: &[u8]) -> Vec<u8> {
        let header = serde_json::to_vec(&serde_json::json!({ "entries": entries })).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(blob);
        out
    }

    #[test]
    fn overlap_and_bounds_are_corruption() {
        let blob = [0u8; 8];
        let overlap = with_header(
            serde_json::json!([
                {"name": "x", "dtype": "f32", "shape": [2], "offset": 0, "length": 8},
                {"name": "y", "dtype": "f32", "shape": [1], "offset": 4, "length": 4}
            ]),
            &blob,
        );
        let err = WeightStore::from_bytes(&overlap).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)), "{err}");
        let oob = with_header(
            serde_json::json!([{"name": "x", "dtype": "f32", "shape": [2], "offset": 4, "length": 8}]),
            &blob,
        );
        assert!(matches!(WeightStore::from_bytes(&oob), Err(Error::Corrupt(_))));
        let dup = with_header(
            serde_json::json!([
                {"name": "x", "dtype": "f32", "shape": [1], "offset": 0, "length": 4},
                {"name": "x", "dtype": "f32", "shape": [1], "offset": 4, "length": 4}
            ]),
            &blob,
        );
        assert!(matches!(WeightStore::from_bytes(&dup), Err(Error::Corrupt(_))));
        let f16 = with_header(
            serde_json::json!([{"name": "x", "dtype": "f16", "shape": [4], "offset": 0, "length": 8}]),
            &blob,
        );
        assert!(matches!(WeightStore::from_bytes(&f16), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn any_f32_pattern_roundtrips(raw in prop::collection::vec(any::<u32>(), 0..64)) {
            let data: Vec<f32> = raw.iter().map(|&b| f32::from_bits(b)).collect();
            let mut s = WeightStore::new();
            s.insert("t", &[data.len()], data).unwrap();
            let back = WeightStore::from_bytes(&s.to_bytes().unwrap()).unwrap();
            let got: Vec<u32> = back.get("t").unwrap().data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, raw);
        }
    }
}
