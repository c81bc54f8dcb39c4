//! Tensor checkpoints: a JSON manifest followed by a little-endian blob.
//!
//! File layout: `PHCK` magic, `u32` format version, `u64` manifest length,
//! the manifest (UTF-8 JSON), then the blob. The manifest lists every
//! tensor's name, shape, dtype and byte range inside the blob, plus the
//! SHA-256 of the blob and free-form `config` / `meta` sections.

use std::path::Path;

use prompthub_core::backbone::{Backbone, BackboneConfig, BACKBONE_VERSION};
use prompthub_core::fusion::{FusionConfig, FusionModule};
use prompthub_core::{Real, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{AppError, Result};
use crate::fsutil;

const MAGIC: &[u8; 4] = b"PHCK";
const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub backbone_version: u32,
    pub tensors: Vec<TensorEntry>,
    pub blob_sha256: String,
    pub config: Value,
    #[serde(default)]
    pub meta: Value,
}

/// In-memory checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub blob: Vec<u8>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn from_tensors<T: Real>(
        kind: &str,
        tensors: &[(String, &Tensor<T>)],
        config: Value,
        meta: Value,
    ) -> Checkpoint {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(tensors.len());
        for (name, t) in tensors {
            let offset = blob.len();
            for &v in t.data() {
                v.write_le(&mut blob);
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: T::DTYPE.to_string(),
                offset,
                bytes: blob.len() - offset,
            });
        }
        Checkpoint {
            manifest: Manifest {
                kind: kind.to_string(),
                backbone_version: BACKBONE_VERSION,
                tensors: entries,
                blob_sha256: hex(&Sha256::digest(&blob)),
                config,
                meta,
            },
            blob,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(16 + manifest.len() + self.blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&self.blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |m: &str| AppError::Data(format!("not a checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing magic"));
        }
        let format = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if format != FORMAT {
            return Err(bad(&format!("unsupported format version {format}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let end = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..end])?;
        let blob = bytes[end..].to_vec();
        if hex(&Sha256::digest(&blob)) != manifest.blob_sha256 {
            return Err(bad("blob checksum mismatch"));
        }
        for e in &manifest.tensors {
            if e.offset.checked_add(e.bytes).is_none_or(|x| x > blob.len()) {
                return Err(bad(&format!("tensor {} out of range", e.name)));
            }
        }
        Ok(Checkpoint { manifest, blob })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Self::from_bytes(&fsutil::read(path)?)
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| AppError::Data(format!("checkpoint has no tensor {name}")))?;
        if e.dtype != T::DTYPE {
            return Err(AppError::Data(format!(
                "tensor {name} is {}, expected {}",
                e.dtype,
                T::DTYPE
            )));
        }
        let n: usize = e.shape.iter().product();
        if n * T::BYTES != e.bytes {
            return Err(AppError::Data(format!(
                "tensor {name}: shape and byte length disagree"
            )));
        }
        let raw = &self.blob[e.offset..e.offset + e.bytes];
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok(Tensor::new(&e.shape, data)?)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.manifest.kind != kind {
            return Err(AppError::Data(format!(
                "expected a {kind} checkpoint, found {}",
                self.manifest.kind
            )));
        }
        Ok(())
    }

    /// Copies every named tensor into `dst`, checking shapes.
    fn fill<T: Real>(&self, names: Vec<String>, dst: Vec<&mut Tensor<T>>) -> Result<()> {
        for (name, t) in names.into_iter().zip(dst) {
            let src = self.tensor::<T>(&name)?;
            if src.shape() != t.shape() {
                return Err(AppError::Data(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

pub fn backbone_checkpoint(bb: &Backbone<f32>, meta: Value) -> Result<Checkpoint> {
    Ok(Checkpoint::from_tensors(
        "backbone",
        &bb.named_tensors(),
        serde_json::to_value(bb.cfg)?,
        meta,
    ))
}

/// Restores a frozen backbone.
pub fn load_backbone(ck: &Checkpoint) -> Result<Backbone<f32>> {
    ck.expect_kind("backbone")?;
    if ck.manifest.backbone_version != BACKBONE_VERSION {
        return Err(AppError::Data(format!(
            "backbone version {} is not supported (expected {BACKBONE_VERSION})",
            ck.manifest.backbone_version
        )));
    }
    let cfg: BackboneConfig = serde_json::from_value(ck.manifest.config.clone())?;
    let mut bb = Backbone::<f32>::init(cfg, 0)?;
    let names = bb.named_tensors().into_iter().map(|(n, _)| n).collect();
    ck.fill(names, bb.tensors_mut())?;
    bb.freeze();
    Ok(bb)
}

/// Fusion checkpoint; `config` is the resolved training configuration.
pub fn fusion_checkpoint(
    module: &FusionModule<f32>,
    config: Value,
    meta: Value,
) -> Result<Checkpoint> {
    let mut meta = meta;
    let info = serde_json::json!({
        "fusion": module.cfg,
        "grid": [module.grid().0, module.grid().1],
        "dim": module.dim(),
    });
    match &mut meta {
        Value::Object(m) => {
            m.insert("model".into(), info);
        }
        _ => meta = serde_json::json!({ "model": info }),
    }
    Ok(Checkpoint::from_tensors(
        "fusion",
        &module.named_tensors(),
        config,
        meta,
    ))
}

pub fn load_fusion(ck: &Checkpoint) -> Result<FusionModule<f32>> {
    ck.expect_kind("fusion")?;
    let model = ck
        .manifest
        .meta
        .get("model")
        .ok_or_else(|| AppError::Data("fusion checkpoint lacks model metadata".into()))?;
    let cfg: FusionConfig = serde_json::from_value(model["fusion"].clone())?;
    let grid: (usize, usize) = serde_json::from_value(model["grid"].clone())?;
    let dim: usize = serde_json::from_value(model["dim"].clone())?;
    let mut m = FusionModule::<f32>::new(cfg, grid, dim, 0)?;
    let names = m.named_tensors().into_iter().map(|(n, _)| n).collect();
    ck.fill(names, m.params_mut())?;
    Ok(m)
}
