use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{EntryKind, ParamStore};
use crate::model::{Model, ModelConfig};
use crate::objective::LossBreakdown;
use crate::simenv::SimConfig;
use crate::{Error, Result};

use super::Normalizer;

const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    /// Offset into the blob in `f32` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: usize,
    pub config: ModelConfig,
    pub config_digest: String,
    pub blob_sha256: String,
    pub blob_len: usize,
    pub entries: Vec<ManifestEntry>,
    pub sim: SimConfig,
    pub normalizer: Normalizer,
    pub metrics: Option<LossBreakdown>,
}

/// Everything besides the weights that a checkpoint records.
#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub step: usize,
    pub sim: SimConfig,
    pub normalizer: Normalizer,
    pub metrics: Option<LossBreakdown>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: Model,
    pub store: ParamStore<f32>,
}

/// `(ckpt_<step>.bin, ckpt_<step>.manifest.json)` inside `dir`.
pub fn checkpoint_paths(dir: &Path, step: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("ckpt_{step}.bin")),
        dir.join(format!("ckpt_{step}.manifest.json")),
    )
}

fn manifest_path(bin: &Path) -> PathBuf {
    let stem = bin
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    bin.with_file_name(format!("{stem}.manifest.json"))
}

fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(bin: &Path, model: &Model, store: &ParamStore<f32>, meta: &CheckpointMeta) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(store.entries().len());
    let mut offset = 0;
    for e in store.entries() {
        entries.push(ManifestEntry {
            name: e.name.clone(),
            kind: e.kind,
            shape: e.value.shape().to_vec(),
            offset,
        });
        offset += e.value.numel();
        for v in e.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        step: meta.step,
        config: model.config().clone(),
        config_digest: model.config().digest(),
        blob_sha256: hex_sha256(&blob),
        blob_len: offset,
        entries,
        sim: meta.sim.clone(),
        normalizer: meta.normalizer.clone(),
        metrics: meta.metrics,
    };
    fs::write(bin, &blob).map_err(|e| Error::io(bin, e))?;
    let mpath = manifest_path(bin);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&mpath, e))
}

/// Loads a checkpoint, rebuilding the model from its stored configuration.
pub fn load_checkpoint(bin: &Path) -> Result<Checkpoint> {
    let mpath = manifest_path(bin);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let cfg = manifest.config.clone();
    load_with(bin, manifest, &cfg)
}

/// Loads a checkpoint into a model built from `expected`, failing on the first
/// parameter whose name or shape differs.
pub fn load_checkpoint_as(bin: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let mpath = manifest_path(bin);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    load_with(bin, manifest, expected)
}

fn load_with(bin: &Path, manifest: CheckpointManifest, cfg: &ModelConfig) -> Result<Checkpoint> {
    let fail = |msg: String| Err(Error::Checkpoint(format!("{}: {msg}", bin.display())));
    if manifest.format_version != FORMAT_VERSION {
        return fail(format!("unsupported format version {}", manifest.format_version));
    }
    if manifest.config.digest() != manifest.config_digest {
        return fail("config digest does not match the stored configuration".into());
    }
    let bytes = fs::read(bin).map_err(|e| Error::io(bin, e))?;
    if bytes.len() != manifest.blob_len * 4 {
        return fail(format!(
            "blob holds {} bytes, manifest expects {}",
            bytes.len(),
            manifest.blob_len * 4
        ));
    }
    if hex_sha256(&bytes) != manifest.blob_sha256 {
        return fail("blob checksum mismatch".into());
    }
    let (model, mut store) = Model::init::<f32>(cfg, 0)?;
    if store.entries().len() != manifest.entries.len() {
        return fail(format!(
            "checkpoint has {} tensors, model expects {}",
            manifest.entries.len(),
            store.entries().len()
        ));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, m) in ids.into_iter().zip(&manifest.entries) {
        let e = store.entry(id);
        if e.name != m.name || e.value.shape() != m.shape.as_slice() || e.kind != m.kind {
            return fail(format!(
                "tensor {} has shape {:?} in the checkpoint but the model expects {} with shape {:?}",
                m.name,
                m.shape,
                e.name,
                e.value.shape()
            ));
        }
        let n = e.value.numel();
        if m.offset + n > manifest.blob_len {
            return fail(format!("tensor {} extends past the blob", m.name));
        }
        let src = &bytes[m.offset * 4..(m.offset + n) * 4];
        for (dst, b) in store.get_mut(id).data_mut().iter_mut().zip(src.chunks_exact(4)) {
            *dst = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    }
    Ok(Checkpoint { manifest, model, store })
}

impl Checkpoint {
    /// Writes the checkpoint back out unchanged.
    pub fn save(&self, bin: &Path) -> Result<()> {
        save_checkpoint(
            bin,
            &self.model,
            &self.store,
            &CheckpointMeta {
                step: self.manifest.step,
                sim: self.manifest.sim.clone(),
                normalizer: self.manifest.normalizer.clone(),
                metrics: self.manifest.metrics,
            },
        )
    }
}
