//! Model file format.
//!
//! ```text
//! "SPON1" | u32 LE header length | JSON header | f32 LE blobs | u32 LE CRC32(blobs)
//! ```
//!
//! The header carries the config and a manifest mapping each tensor name to
//! its shape, byte offset (relative to the blob region) and byte length.
//! Blobs are stored in manifest (name) order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"SPON1";
pub use crate::artifact::SCHEMA_VERSION;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFileHeader {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, ManifestEntry>,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let named: BTreeMap<String, &Tensor> = model.named_tensors().into_iter().collect();
    let mut tensors = BTreeMap::new();
    let mut blobs = Vec::with_capacity(model.parameter_count() * 4);
    for (name, t) in &named {
        let offset = blobs.len() as u64;
        for v in t.data() {
            blobs.extend_from_slice(&v.to_le_bytes());
        }
        tensors.insert(name.clone(), ManifestEntry { shape: t.shape().to_vec(), offset, length: t.len() as u64 * 4 });
    }
    let header = ModelFileHeader { schema_version: SCHEMA_VERSION, config: model.config.clone(), tensors };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + blobs.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blobs);
    out.extend_from_slice(&crc32fast::hash(&blobs).to_le_bytes());
    Ok(out)
}

fn split(bytes: &[u8]) -> Result<(ModelFileHeader, &[u8])> {
    let truncated = || Error::Format("truncated model file".into());
    if bytes.len() < MAGIC.len() {
        return Err(truncated());
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad magic bytes, not a model file".into()));
    }
    let rest = &bytes[MAGIC.len()..];
    let len_bytes: [u8; 4] = rest.get(..4).ok_or_else(truncated)?.try_into().expect("4 bytes");
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let rest = &rest[4..];
    let header_bytes = rest.get(..header_len).ok_or_else(truncated)?;
    let header: ModelFileHeader =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Format(format!("malformed header: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion { found: header.schema_version, expected: SCHEMA_VERSION });
    }
    Ok((header, &rest[header_len..]))
}

/// Parses only the header; the blob region is not validated.
pub fn read_manifest(bytes: &[u8]) -> Result<ModelFileHeader> {
    split(bytes).map(|(h, _)| h)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let (header, rest) = split(bytes)?;
    let blob_len: u64 = header.tensors.values().map(|e| e.length).sum();
    let blob_len = blob_len as usize;
    if rest.len() < blob_len + 4 {
        return Err(Error::Format("truncated model file".into()));
    }
    if rest.len() > blob_len + 4 {
        return Err(Error::Format(format!("{} trailing bytes after checksum", rest.len() - blob_len - 4)));
    }
    let blobs = &rest[..blob_len];
    let stored = u32::from_le_bytes(rest[blob_len..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(blobs);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut named = BTreeMap::new();
    for (name, e) in &header.tensors {
        let numel: usize = e.shape.iter().product();
        let (start, len) = (e.offset as usize, e.length as usize);
        if len != numel * 4 || start.checked_add(len).is_none_or(|end| end > blobs.len()) {
            return Err(Error::Format(format!("manifest entry {name} out of bounds")));
        }
        let data = blobs[start..start + len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|_| Error::Format(format!("tensor {name} is not finite")))?;
        named.insert(name.clone(), t);
    }
    Model::from_named(header.config, named)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LinearSite, SiteKind};

    fn model() -> Model {
        let c = ModelConfig { vocab_size: 20, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 12, context_len: 6, seed: 4, ..Default::default() };
        let mut m = Model::init(&c).unwrap();
        m.weights.biases.insert(LinearSite::new(1, SiteKind::DownProj), Tensor::full(&[8], 0.25));
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.spon");
        save_model(&m, &p).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back.config, m.config);
        for ((na, a), (nb, b)) in m.named_tensors().iter().zip(back.named_tensors().iter()) {
            assert_eq!(na, nb);
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn header_layout() {
        let bytes = to_bytes(&model()).unwrap();
        assert_eq!(&bytes[..5], b"SPON1");
        let h = read_manifest(&bytes).unwrap();
        assert_eq!(h.schema_version, 1);
        assert_eq!(h.tensors["layers.1.down_proj.bias"].shape, vec![8]);
        let mut offset = 0;
        for e in h.tensors.values() {
            assert_eq!(e.offset, offset);
            offset += e.length;
        }
    }

    #[test]
    fn truncated_file_is_an_error() {
        let bytes = to_bytes(&model()).unwrap();
        for cut in [0, 3, 7, 40, bytes.len() - 5, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let mut bytes = to_bytes(&model()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(m)) if m.contains("magic")));
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let mut bytes = to_bytes(&model()).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 0x01;
        assert!(matches!(from_bytes(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn schema_version_is_checked() {
        let m = model();
        let bytes = to_bytes(&m).unwrap();
        let (header, rest) = split(&bytes).unwrap();
        let mut h = header;
        h.schema_version = 2;
        let json = serde_json::to_vec(&h).unwrap();
        let mut out = b"SPON1".to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(rest);
        assert!(matches!(from_bytes(&out), Err(Error::SchemaVersion { found: 2, expected: 1 })));
    }
}
