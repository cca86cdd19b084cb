//! On-disk container for checkpoints and Fisher estimates.
//!
//! Layout: an 8-byte little-endian manifest length, a UTF-8 JSON manifest,
//! then the tensor payloads concatenated in manifest order (raw little-endian
//! float64, row-major, no padding). Saving is canonical, so save -> load ->
//! save reproduces files byte for byte; a file's SHA-256 is its content
//! digest and is what cross-file references (Fisher -> checkpoint,
//! merged-checkpoint provenance) record.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fisher::{FullFisher, MaskFisher};
use crate::model::{Checkpoint, ModelConfig, Provenance, TaskHead, ACTIVATION, LAYER_NORM_EPS};
use crate::tensor::Tensor;

pub const FORMAT_TAG: &str = "maskmerge/container/v1";

pub const KIND_CHECKPOINT: &str = "checkpoint";
pub const KIND_MASK_FISHER: &str = "mask-fisher";
pub const KIND_FULL_FISHER: &str = "full-fisher";

const FISHER_MHA: &str = "fisher.mha";
const FISHER_MLP: &str = "fisher.mlp";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    kind: String,
    config: ModelConfig,
    activation: String,
    layer_norm_eps: f64,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    task_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_samples: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn assemble(manifest: &Manifest, payload: Vec<u8>) -> Result<Vec<u8>> {
    let manifest_bytes = serde_json::to_vec(manifest)?;
    let mut out = Vec::with_capacity(8 + manifest_bytes.len() + payload.len());
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn build_sections(named: &[(String, &Tensor)]) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::with_capacity(named.len());
    let mut payload = Vec::new();
    for (name, tensor) in named {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset: payload.len() as u64,
        });
        payload.extend_from_slice(&tensor.to_le_bytes());
    }
    (entries, payload)
}

fn split_file(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::BadContainer("file shorter than its header".into()));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 8 + len {
        return Err(Error::BadContainer("manifest length exceeds file size".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[8..8 + len])?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::BadContainer(format!(
            "unknown format tag {:?}",
            manifest.format
        )));
    }
    let payload = &bytes[8 + len..];
    let digest = sha256_hex(payload);
    if digest != manifest.payload_sha256 {
        return Err(Error::DigestMismatch {
            context: "payload".into(),
            expected: manifest.payload_sha256.clone(),
            found: digest,
        });
    }
    Ok((manifest, payload))
}

fn read_tensors(manifest: &Manifest, payload: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 8;
        if end > payload.len() {
            return Err(Error::BadContainer(format!(
                "tensor {} extends past the payload",
                entry.name
            )));
        }
        let tensor = Tensor::from_le_bytes(&entry.shape, &payload[start..end])?;
        if out.insert(entry.name.clone(), tensor).is_some() {
            return Err(Error::BadContainer(format!(
                "tensor {} listed twice",
                entry.name
            )));
        }
    }
    Ok(out)
}

fn expect_kind(manifest: &Manifest, kind: &str) -> Result<()> {
    if manifest.kind == kind {
        Ok(())
    } else {
        Err(Error::BadContainer(format!(
            "expected a {kind} file, found {:?}",
            manifest.kind
        )))
    }
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

/// Canonical serialization of a checkpoint.
pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.validate()?;
    let named = ckpt.named_tensors();
    let (tensors, payload) = build_sections(&named);
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        kind: KIND_CHECKPOINT.to_string(),
        config: ckpt.config.clone(),
        activation: ACTIVATION.to_string(),
        layer_norm_eps: LAYER_NORM_EPS,
        tensors,
        payload_sha256: sha256_hex(&payload),
        checkpoint_digest: None,
        task_id: None,
        n_samples: None,
        provenance: ckpt.provenance.clone(),
    };
    assemble(&manifest, payload)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (manifest, payload) = split_file(bytes)?;
    expect_kind(&manifest, KIND_CHECKPOINT)?;
    let mut tensors = read_tensors(&manifest, payload)?;

    let mut heads: BTreeMap<String, TaskHead> = BTreeMap::new();
    let head_names: Vec<String> = tensors
        .keys()
        .filter(|n| n.starts_with("heads."))
        .cloned()
        .collect();
    for name in &head_names {
        let rest = &name["heads.".len()..];
        if let Some(task) = rest.strip_suffix(".weight") {
            let weight = tensors.remove(name).expect("listed");
            let bias_name = format!("heads.{task}.bias");
            let bias = tensors
                .remove(&bias_name)
                .ok_or_else(|| Error::BadContainer(format!("missing {bias_name}")))?;
            heads.insert(task.to_string(), TaskHead { weight, bias });
        } else if !rest.ends_with(".bias") {
            return Err(Error::BadContainer(format!("unrecognized head tensor {name}")));
        }
    }
    // any remaining heads.* entry is a bias without its weight
    if let Some(orphan) = tensors.keys().find(|n| n.starts_with("heads.")) {
        return Err(Error::BadContainer(format!("orphan head tensor {orphan}")));
    }

    let ckpt = Checkpoint {
        config: manifest.config,
        params: tensors,
        heads,
        provenance: manifest.provenance,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

/// Content digest of a checkpoint: SHA-256 of its canonical file bytes.
pub fn checkpoint_digest(ckpt: &Checkpoint) -> Result<String> {
    Ok(sha256_hex(&checkpoint_to_bytes(ckpt)?))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<String> {
    let bytes = checkpoint_to_bytes(ckpt)?;
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Returns the checkpoint and the file's content digest.
pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, String)> {
    let bytes = fs::read(path)?;
    let ckpt = checkpoint_from_bytes(&bytes)?;
    Ok((ckpt, sha256_hex(&bytes)))
}

// ---------------------------------------------------------------------------
// fisher files
// ---------------------------------------------------------------------------

pub fn mask_fisher_to_bytes(mf: &MaskFisher, config: &ModelConfig) -> Result<Vec<u8>> {
    mf.matches(config)?;
    let named = vec![
        (FISHER_MHA.to_string(), &mf.f_mha),
        (FISHER_MLP.to_string(), &mf.f_mlp),
    ];
    let (tensors, payload) = build_sections(&named);
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        kind: KIND_MASK_FISHER.to_string(),
        config: config.clone(),
        activation: ACTIVATION.to_string(),
        layer_norm_eps: LAYER_NORM_EPS,
        tensors,
        payload_sha256: sha256_hex(&payload),
        checkpoint_digest: Some(mf.checkpoint_digest.clone()),
        task_id: Some(mf.task_id.clone()),
        n_samples: Some(mf.n_samples as u64),
        provenance: None,
    };
    assemble(&manifest, payload)
}

pub fn mask_fisher_from_bytes(bytes: &[u8]) -> Result<(MaskFisher, ModelConfig)> {
    let (manifest, payload) = split_file(bytes)?;
    expect_kind(&manifest, KIND_MASK_FISHER)?;
    let mut tensors = read_tensors(&manifest, payload)?;
    let f_mha = tensors
        .remove(FISHER_MHA)
        .ok_or_else(|| Error::BadContainer(format!("missing {FISHER_MHA}")))?;
    let f_mlp = tensors
        .remove(FISHER_MLP)
        .ok_or_else(|| Error::BadContainer(format!("missing {FISHER_MLP}")))?;
    let mf = MaskFisher {
        f_mha,
        f_mlp,
        n_samples: manifest.n_samples.unwrap_or(0) as usize,
        task_id: manifest.task_id.clone().unwrap_or_default(),
        checkpoint_digest: manifest.checkpoint_digest.clone().unwrap_or_default(),
    };
    mf.matches(&manifest.config)?;
    mf.validate()?;
    Ok((mf, manifest.config))
}

pub fn save_mask_fisher(path: &Path, mf: &MaskFisher, config: &ModelConfig) -> Result<String> {
    let bytes = mask_fisher_to_bytes(mf, config)?;
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_mask_fisher(path: &Path) -> Result<(MaskFisher, ModelConfig)> {
    mask_fisher_from_bytes(&fs::read(path)?)
}

pub fn full_fisher_to_bytes(ff: &FullFisher, config: &ModelConfig) -> Result<Vec<u8>> {
    let named: Vec<(String, &Tensor)> = ff.fisher.iter().map(|(n, t)| (n.clone(), t)).collect();
    let (tensors, payload) = build_sections(&named);
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        kind: KIND_FULL_FISHER.to_string(),
        config: config.clone(),
        activation: ACTIVATION.to_string(),
        layer_norm_eps: LAYER_NORM_EPS,
        tensors,
        payload_sha256: sha256_hex(&payload),
        checkpoint_digest: Some(ff.checkpoint_digest.clone()),
        task_id: Some(ff.task_id.clone()),
        n_samples: Some(ff.n_samples as u64),
        provenance: None,
    };
    assemble(&manifest, payload)
}

pub fn full_fisher_from_bytes(bytes: &[u8]) -> Result<(FullFisher, ModelConfig)> {
    let (manifest, payload) = split_file(bytes)?;
    expect_kind(&manifest, KIND_FULL_FISHER)?;
    let fisher = read_tensors(&manifest, payload)?;
    let ff = FullFisher {
        fisher,
        n_samples: manifest.n_samples.unwrap_or(0) as usize,
        task_id: manifest.task_id.clone().unwrap_or_default(),
        checkpoint_digest: manifest.checkpoint_digest.clone().unwrap_or_default(),
    };
    ff.validate()?;
    Ok((ff, manifest.config))
}

pub fn save_full_fisher(path: &Path, ff: &FullFisher, config: &ModelConfig) -> Result<String> {
    let bytes = full_fisher_to_bytes(ff, config)?;
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_full_fisher(path: &Path) -> Result<(FullFisher, ModelConfig)> {
    full_fisher_from_bytes(&fs::read(path)?)
}
