//! Flat tensor archive used for checkpoints and imported backbone weights.
//!
//! Layout: the 8-byte magic `GLCFTNSR`, a little-endian `u32` manifest length,
//! a UTF-8 JSON manifest, then the raw payload of little-endian `f32` values.
//! The manifest is a JSON object whose `tensors` array lists
//! `{name, shape, dtype, offset}` entries (offsets are relative to the start of
//! the payload). Any other top-level keys are carried through as metadata;
//! checkpoints store their configuration under `__config__`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{GlcfError, Result};

pub const MAGIC: &[u8; 8] = b"GLCFTNSR";
pub const CONFIG_KEY: &str = "__config__";

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ArchiveTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(GlcfError::Contract(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub tensors: BTreeMap<String, ArchiveTensor>,
    pub metadata: serde_json::Map<String, Value>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: ArchiveTensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveTensor> {
        self.tensors.get(name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                dtype: "f32".into(),
                offset,
            });
            offset += 4 * t.numel() as u64;
        }
        let mut manifest = self.metadata.clone();
        manifest.insert("tensors".into(), serde_json::to_value(&entries)?);
        let manifest = serde_json::to_vec(&Value::Object(manifest))?;
        let manifest_len = u32::try_from(manifest.len())
            .map_err(|_| GlcfError::Contract("manifest exceeds 4 GiB".into()))?;

        let mut out = Vec::with_capacity(12 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&manifest_len.to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(GlcfError::UnsupportedFormat(
                "missing GLCFTNSR header".into(),
            ));
        }
        let manifest_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let payload_start = 12usize
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                GlcfError::CorruptArchive(format!(
                    "manifest length {manifest_len} exceeds file size {}",
                    bytes.len()
                ))
            })?;
        let manifest: Value = serde_json::from_slice(&bytes[12..payload_start])
            .map_err(|e| GlcfError::CorruptArchive(format!("manifest does not parse: {e}")))?;
        let Value::Object(mut manifest) = manifest else {
            return Err(GlcfError::CorruptArchive("manifest is not an object".into()));
        };
        let entries: Vec<ManifestEntry> = match manifest.remove("tensors") {
            Some(v) => serde_json::from_value(v)
                .map_err(|e| GlcfError::CorruptArchive(format!("bad tensor entry: {e}")))?,
            None => Vec::new(),
        };
        let payload = &bytes[payload_start..];

        let mut tensors = BTreeMap::new();
        let mut used = 0usize;
        for e in entries {
            if e.dtype != "f32" {
                return Err(GlcfError::UnsupportedFormat(format!(
                    "tensor {} has dtype {}",
                    e.name, e.dtype
                )));
            }
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start
                .checked_add(numel * 4)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| {
                    GlcfError::CorruptArchive(format!(
                        "tensor {} spans bytes {start}..{} but payload holds {}",
                        e.name,
                        start + numel * 4,
                        payload.len()
                    ))
                })?;
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            used = used.max(end);
            if tensors
                .insert(e.name.clone(), ArchiveTensor { shape: e.shape, data })
                .is_some()
            {
                return Err(GlcfError::CorruptArchive(format!(
                    "duplicate tensor name {}",
                    e.name
                )));
            }
        }
        if used != payload.len() {
            return Err(GlcfError::CorruptArchive(format!(
                "payload holds {} bytes but manifest accounts for {used}",
                payload.len()
            )));
        }
        Ok(Self {
            tensors,
            metadata: manifest,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| GlcfError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(GlcfError::MissingInput(format!(
                "archive {} does not exist",
                path.display()
            )));
        }
        let bytes = fs::read(path).map_err(|e| GlcfError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Reads an archive and returns only its tensors.
pub fn load_tensor_archive(path: impl AsRef<Path>) -> Result<BTreeMap<String, ArchiveTensor>> {
    Ok(TensorArchive::load(path)?.tensors)
}
