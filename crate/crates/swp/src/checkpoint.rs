//! Checkpoints: a JSON manifest plus one binary blob.
//!
//! The blob holds every parameter tensor as little-endian IEEE-754 values,
//! concatenated in manifest order. The manifest records the supernet spec so
//! a checkpoint can be checked against a run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use swp_core::slimnet::{Supernet, SupernetSpec};
use swp_core::tape::ParamStore;
use swp_core::{Real, Tensor};

use crate::error::{read, write, CliError, Result};

pub const FORMAT: &str = "swp-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub blob_bytes: u64,
    pub spec: SupernetSpec,
    pub tensors: Vec<TensorEntry>,
}

/// Element types with a fixed little-endian encoding.
pub trait LeBytes: Real {
    const WIDTH: usize;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

impl LeBytes for f32 {
    const WIDTH: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl LeBytes for f64 {
    const WIDTH: usize = 8;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Blob path next to a manifest: `x.json` pairs with `x.bin`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn encode<T: LeBytes>(net: &Supernet<T>, blob_name: &str) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in net.params().iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for &v in t.data() {
            v.put(&mut blob);
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: T::DTYPE.into(),
        blob: blob_name.into(),
        blob_bytes: blob.len() as u64,
        spec: net.spec().clone(),
        tensors,
    };
    (manifest, blob)
}

pub fn decode<T: LeBytes>(manifest: &Manifest, blob: &[u8]) -> Result<Supernet<T>> {
    let bad = |m: String| CliError::config(format!("checkpoint: {m}"));
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(bad(format!("unsupported format {} v{}", manifest.format, manifest.version)));
    }
    if manifest.dtype != T::DTYPE {
        return Err(bad(format!("dtype {} where {} was expected", manifest.dtype, T::DTYPE)));
    }
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(bad(format!("blob has {} bytes, manifest says {}", blob.len(), manifest.blob_bytes)));
    }
    let mut params = ParamStore::new();
    let mut expected = 0u64;
    for e in &manifest.tensors {
        if e.offset != expected {
            return Err(bad(format!("tensor {} at offset {}, expected {}", e.name, e.offset, expected)));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset as usize + n * T::WIDTH;
        let bytes = blob
            .get(e.offset as usize..end)
            .ok_or_else(|| bad(format!("tensor {} runs past the blob", e.name)))?;
        let data = bytes.chunks_exact(T::WIDTH).map(T::get).collect();
        params.push(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        expected = end as u64;
    }
    if expected != manifest.blob_bytes {
        return Err(bad(format!("{} trailing bytes", manifest.blob_bytes - expected)));
    }
    let mut net = Supernet::new(manifest.spec.clone(), 0)?;
    let names_match = net.params().iter().map(|(n, _)| n).eq(params.iter().map(|(n, _)| n));
    if !names_match {
        return Err(bad("tensor names do not match the spec".into()));
    }
    net.load_params(params).map_err(|e| bad(e.to_string()))?;
    Ok(net)
}

/// Writes `path` (manifest) and its blob.
pub fn save<T: LeBytes>(net: &Supernet<T>, path: &Path) -> Result<()> {
    let blob_file = blob_path(path);
    let name = blob_file
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| CliError::config(format!("bad checkpoint path {}", path.display())))?
        .to_string();
    let (manifest, blob) = encode(net, &name);
    write(&blob_file, blob)?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(path, text + "\n")
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

pub fn load<T: LeBytes>(path: &Path) -> Result<Supernet<T>> {
    let manifest = read_manifest(path)?;
    let dir = path.parent().unwrap_or(Path::new(""));
    let blob = read(&dir.join(&manifest.blob))?;
    decode(&manifest, &blob)
}
