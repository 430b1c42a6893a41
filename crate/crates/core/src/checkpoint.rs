//! Checkpoint serialization and the vanilla-to-softmax-free weight
//! transfer.
//!
//! File layout, all little-endian:
//!
//! ```text
//! magic "SQNMVIT1" | version u32 | header_len u64 | header JSON
//! | zero padding to a 64-byte boundary | raw weight blob
//! ```
//!
//! The header carries the manifest (name, dtype, shape, byte offset per
//! parameter, packed contiguously in registration order) and metadata
//! (config echo, epoch, validation metric). Round-tripping a model is
//! bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Element;
use crate::shape::numel;
use crate::vit::{ViTConfig, ViTModel};

pub const MAGIC: [u8; 8] = *b"SQNMVIT1";
pub const VERSION: u32 = 1;
const BLOB_ALIGN: usize = 64;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

impl ManifestEntry {
    fn elem_size(&self) -> Result<usize> {
        match self.dtype.as_str() {
            "f32" => Ok(4),
            "f64" => Ok(8),
            other => Err(Error::Checkpoint(format!("unknown dtype {other:?} for {}", self.name))),
        }
    }

    fn byte_len(&self) -> Result<usize> {
        Ok(numel(&self.shape) * self.elem_size()?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ViTConfig,
    pub epoch: usize,
    pub val_metric: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    manifest: Vec<ManifestEntry>,
    meta: CheckpointMeta,
}

/// An in-memory checkpoint: manifest + metadata + raw weight bytes.
pub struct Checkpoint {
    pub manifest: Vec<ManifestEntry>,
    pub meta: CheckpointMeta,
    pub blob: Vec<u8>,
}

impl Checkpoint {
    pub fn from_model<T: Element>(model: &ViTModel<T>, epoch: usize, val_metric: f64) -> Checkpoint {
        let mut manifest = Vec::with_capacity(model.params.len());
        let mut blob = Vec::with_capacity(model.params.total_elements() * T::BYTES);
        for (name, param) in model.params.iter() {
            manifest.push(ManifestEntry {
                name: name.to_string(),
                dtype: T::DTYPE.to_string(),
                shape: param.shape.clone(),
                offset: blob.len() as u64,
            });
            for &v in &param.data {
                v.write_le(&mut blob);
            }
        }
        Checkpoint {
            manifest,
            meta: CheckpointMeta { config: model.config.clone(), epoch, val_metric },
            blob,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&Header {
            manifest: self.manifest.clone(),
            meta: self.meta.clone(),
        })?;
        let mut bytes = Vec::with_capacity(20 + header.len() + BLOB_ALIGN + self.blob.len());
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        while bytes.len() % BLOB_ALIGN != 0 {
            bytes.push(0);
        }
        bytes.extend_from_slice(&self.blob);
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 20 {
            return Err(Error::Checkpoint(format!("{}: file too short", path.display())));
        }
        if bytes[0..8] != MAGIC {
            return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if 20 + header_len > bytes.len() {
            return Err(Error::Checkpoint("header extends past end of file".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[20..20 + header_len])
            .map_err(|e| Error::Checkpoint(format!("header parse failed: {e}")))?;
        let blob_start = (20 + header_len).div_ceil(BLOB_ALIGN) * BLOB_ALIGN;
        if blob_start > bytes.len() {
            return Err(Error::Checkpoint("missing blob".into()));
        }
        let blob = bytes[blob_start..].to_vec();
        let ckpt = Checkpoint { manifest: header.manifest, meta: header.meta, blob };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Structural validation: unique names, known dtypes, contiguous
    /// packing, exact blob length.
    pub fn validate(&self) -> Result<()> {
        let mut expected_offset = 0u64;
        let mut seen = std::collections::HashSet::new();
        for entry in &self.manifest {
            if !seen.insert(entry.name.clone()) {
                return Err(Error::Checkpoint(format!("duplicate parameter {}", entry.name)));
            }
            if entry.offset != expected_offset {
                return Err(Error::Checkpoint(format!(
                    "{}: offset {} breaks contiguous packing (expected {expected_offset})",
                    entry.name, entry.offset
                )));
            }
            expected_offset += entry.byte_len()? as u64;
        }
        if expected_offset != self.blob.len() as u64 {
            return Err(Error::Checkpoint(format!(
                "blob length {} does not match manifest total {expected_offset}",
                self.blob.len()
            )));
        }
        Ok(())
    }

    /// Decodes the blob into a parameter store. Every entry's dtype must
    /// match `T`; cross-precision loading is not a checkpoint concern.
    pub fn to_store<T: Element>(&self) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for entry in &self.manifest {
            if entry.dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "{} has dtype {}, cannot load into a {} graph",
                    entry.name,
                    entry.dtype,
                    T::DTYPE
                )));
            }
            let start = entry.offset as usize;
            let len = entry.byte_len()?;
            let data: Vec<T> = self.blob[start..start + len]
                .chunks_exact(T::BYTES)
                .map(T::read_le)
                .collect();
            store.insert(&entry.name, data, &entry.shape)?;
        }
        Ok(store)
    }

    /// Reconstructs the model. With `config: None` the embedded config
    /// echo is used; otherwise the checkpoint must fit the given config
    /// (mismatches name the offending parameters).
    pub fn into_model<T: Element>(&self, config: Option<ViTConfig>) -> Result<ViTModel<T>> {
        let config = config.unwrap_or_else(|| self.meta.config.clone());
        let store = self.to_store::<T>()?;
        ViTModel::from_store(config, store)
    }
}

pub fn save_checkpoint<T: Element>(
    model: &ViTModel<T>,
    epoch: usize,
    val_metric: f64,
    path: &Path,
) -> Result<()> {
    Checkpoint::from_model(model, epoch, val_metric).write(path)
}

pub fn load_checkpoint<T: Element>(
    path: &Path,
    config: Option<ViTConfig>,
) -> Result<(ViTModel<T>, CheckpointMeta)> {
    let ckpt = Checkpoint::read(path)?;
    let meta = ckpt.meta.clone();
    Ok((ckpt.into_model(config)?, meta))
}

/// Outcome of [`transfer_weights`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferReport {
    /// Parameters copied from the source checkpoint.
    pub copied: Vec<String>,
    /// Target parameters absent in the source, left at their fresh
    /// initialization (the per-feature affines).
    pub fresh: Vec<String>,
    /// Source parameters with no place in the target (e.g. affines when
    /// transferring into a vanilla model).
    pub dropped: Vec<String>,
}

fn is_attention_affine(name: &str) -> bool {
    let Some((scope, last)) = name.rsplit_once('.') else { return false };
    scope.ends_with(".attn") && crate::attention::AFFINE_NAMES.contains(&last)
}

/// Copies every name-matching parameter from `source` into `target`;
/// attention-internal parameters missing on either side are reported
/// rather than copied. Anything else missing is an architecture mismatch.
pub fn transfer_weights<T: Element>(
    source: &Checkpoint,
    target: &mut ViTModel<T>,
) -> Result<TransferReport> {
    if !source.meta.config.transfer_compatible(&target.config) {
        return Err(Error::Config(
            "transfer requires identical architectures up to the attention internals".into(),
        ));
    }
    let src_store: ParamStore<T> = source.to_store()?;
    let mut report = TransferReport { copied: Vec::new(), fresh: Vec::new(), dropped: Vec::new() };

    let target_names: Vec<String> = target.params.names().map(str::to_string).collect();
    for name in &target_names {
        match src_store.get(name) {
            Some(src) => {
                let dst = target.params.get_mut(name).unwrap();
                if src.shape != dst.shape {
                    return Err(Error::ShapeVsConfig { names: vec![name.clone()] });
                }
                dst.data = src.data.clone();
                report.copied.push(name.clone());
            }
            None if is_attention_affine(name) => report.fresh.push(name.clone()),
            None => {
                return Err(Error::Config(format!(
                    "source checkpoint is missing non-attention parameter {name}"
                )))
            }
        }
    }
    for (name, _) in src_store.iter() {
        if !target.params.contains(name) {
            if is_attention_affine(name) {
                report.dropped.push(name.to_string());
            } else {
                return Err(Error::Config(format!(
                    "source parameter {name} has no counterpart in the target architecture"
                )));
            }
        }
    }
    Ok(report)
}
