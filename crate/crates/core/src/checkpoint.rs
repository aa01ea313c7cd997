//! Checkpoints: a JSON manifest next to one raw `f64` little-endian blob.
//!
//! Tensors are stored row-major in layout order; the manifest records each
//! tensor's name, shape and byte offset so the blob can be read without this
//! crate.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::ModelConfig;
use crate::error::{Error, Result};
use crate::params::DirectParams;
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f64-le";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub arch: String,
    pub config: ModelConfig,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub blob_bytes: usize,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// A model configuration with its direct parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: DirectParams<f64>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

impl Checkpoint {
    pub fn new<T: Scalar>(config: ModelConfig, params: &DirectParams<T>) -> Result<Self> {
        params.expect_layout(&config.layout())?;
        Ok(Self {
            config,
            params: params.cast(),
            metadata: BTreeMap::new(),
        })
    }

    pub fn manifest(&self, blob: &str) -> Manifest {
        let tensors = self
            .params
            .layout()
            .iter()
            .map(|(off, spec)| TensorEntry {
                name: spec.name.clone(),
                shape: [spec.rows, spec.cols],
                dtype: DTYPE.to_string(),
                offset: off * 8,
            })
            .collect();
        Manifest {
            format_version: FORMAT_VERSION,
            arch: self.config.tag().to_string(),
            config: self.config.clone(),
            blob: blob.to_string(),
            blob_bytes: self.params.len() * 8,
            tensors,
            metadata: self.metadata.clone(),
        }
    }

    pub fn blob_bytes(&self) -> Vec<u8> {
        self.params.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Writes the manifest to `path` and the blob beside it with extension `.bin`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let blob = blob_path(path);
        let name = blob
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Format(format!("bad checkpoint path {}", path.display())))?
            .to_string();
        std::fs::write(&blob, self.blob_bytes())?;
        std::fs::write(path, serde_json::to_string_pretty(&self.manifest(&name))?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let bytes = std::fs::read(dir.join(&manifest.blob))?;
        Self::from_parts(manifest, &bytes)
    }

    pub fn from_parts(manifest: Manifest, bytes: &[u8]) -> Result<Self> {
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        if manifest.arch != manifest.config.tag() {
            return Err(Error::Format(format!(
                "arch tag {} does not match config {}",
                manifest.arch,
                manifest.config.tag()
            )));
        }
        if bytes.len() != manifest.blob_bytes {
            return Err(Error::Format(format!(
                "blob has {} bytes, manifest says {}",
                bytes.len(),
                manifest.blob_bytes
            )));
        }
        let layout = manifest.config.layout();
        let matches = layout.specs().len() == manifest.tensors.len()
            && layout
                .specs()
                .iter()
                .zip(&manifest.tensors)
                .all(|(s, t)| s.name == t.name && [s.rows, s.cols] == t.shape);
        if !matches {
            return Err(Error::Format("tensor list does not match the configured layout".into()));
        }
        let mut theta = vec![0.0; layout.len()];
        for ((off, spec), entry) in layout.iter().zip(&manifest.tensors) {
            if entry.dtype != DTYPE {
                return Err(Error::Format(format!(
                    "tensor {} has dtype {}",
                    entry.name, entry.dtype
                )));
            }
            if entry.offset != off * 8 {
                return Err(Error::Format(format!(
                    "tensor {} at byte {}, expected {}",
                    entry.name,
                    entry.offset,
                    off * 8
                )));
            }
            for k in 0..spec.len() {
                let at = entry.offset + 8 * k;
                let raw: [u8; 8] = bytes[at..at + 8].try_into().expect("8-byte slice");
                theta[off + k] = f64::from_le_bytes(raw);
            }
        }
        Ok(Self {
            config: manifest.config,
            params: DirectParams::new(layout, theta)?,
            metadata: manifest.metadata,
        })
    }
}
