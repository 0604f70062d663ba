//! Versioned single-file parameter container.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, `u64` header
//! length, a JSON header, then every tensor listed in the header as
//! contiguous little-endian `f32` values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptor::{AdaptConfig, Adaptor, AdaptorInit, AdaptorVariant};
use crate::backbone::{Backbone, VitConfig};
use crate::clfa::{BranchVariant, PretrainConfig, PretrainModel, PretrainState};
use crate::error::{Error, Result};
use crate::nn::{Mlp2, Parameters};
use crate::optim::Adam;

const MAGIC: &[u8; 8] = b"CLFACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Pretrain,
    Adaptor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub model_config: VitConfig,
    pub seed: u64,
    /// The training configuration that produced the parameters.
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_variant: Option<BranchVariant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptor_variant: Option<AdaptorVariant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone_sha256: Option<String>,
    #[serde(default)]
    pub epochs_done: usize,
    #[serde(default)]
    pub optimizer_step: u64,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn encode(header: &Header, tensors: &[Tensor]) -> Vec<u8> {
    let mut header = header.clone();
    header.tensors = tensors
        .iter()
        .map(|t| TensorInfo {
            name: t.name.clone(),
            shape: t.shape.clone(),
        })
        .collect();
    let json = serde_json::to_vec(&header).expect("header serializes");
    let payload: usize = tensors.iter().map(|t| t.data.len() * 4).sum();
    let mut out = Vec::with_capacity(20 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(Header, Vec<Tensor>)> {
    let bad = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let mut offset = 20 + len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for info in &header.tensors {
        let n: usize = info.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 4 * n)
            .ok_or_else(|| Error::Format(format!("truncated tensor '{}'", info.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset += 4 * n;
        tensors.push(Tensor {
            name: info.name.clone(),
            shape: info.shape.clone(),
            data,
        });
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok((header, tensors))
}

fn collect(params: &impl Parameters<f32>, prefix: &str) -> Vec<Tensor> {
    let mut out = Vec::new();
    params.visit(prefix, &mut |name, shape, data| {
        out.push(Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: data.to_vec(),
        })
    });
    out
}

/// Fills `params` from the tensors named `<prefix>.<param>`; every
/// parameter must be present with the right size.
fn fill(params: &mut impl Parameters<f32>, prefix: &str, tensors: &[Tensor]) -> Result<()> {
    let mut missing = None;
    params.visit_mut(prefix, &mut |name, data| {
        match tensors.iter().find(|t| t.name == name) {
            Some(t) if t.data.len() == data.len() => data.copy_from_slice(&t.data),
            _ => {
                missing.get_or_insert_with(|| name.to_string());
            }
        }
    });
    match missing {
        Some(name) => Err(Error::Format(format!("checkpoint lacks a matching tensor '{name}'"))),
        None => Ok(()),
    }
}

fn flat_tensor(name: &str, data: &[f32]) -> Tensor {
    Tensor {
        name: name.to_string(),
        shape: vec![data.len()],
        data: data.to_vec(),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<String> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(bytes))
}

fn read(path: &Path) -> Result<(Header, Vec<Tensor>, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, tensors) = decode(&bytes)?;
    Ok((header, tensors, sha256_hex(&bytes)))
}

/// Serializes a pre-training state, including optimizer moments, so that
/// training can resume exactly.
pub fn pretrain_bytes(state: &PretrainState, config: &PretrainConfig) -> Vec<u8> {
    let mut tensors = collect(&state.model, "");
    tensors.push(flat_tensor("adam.m", &state.optimizer.m));
    tensors.push(flat_tensor("adam.v", &state.optimizer.v));
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::Pretrain,
        model_config: state.model.backbone.config.clone(),
        seed: config.seed,
        config: serde_json::to_value(config).expect("config serializes"),
        branch_variant: Some(config.variant),
        adaptor_variant: None,
        backbone_sha256: None,
        epochs_done: state.epochs_done,
        optimizer_step: state.optimizer.step,
        tensors: Vec::new(),
    };
    encode(&header, &tensors)
}

/// Returns the SHA-256 of the written file.
pub fn save_pretrain(path: &Path, state: &PretrainState, config: &PretrainConfig) -> Result<String> {
    write(path, &pretrain_bytes(state, config))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedPretrain {
    pub state: PretrainState,
    pub header: Header,
    pub sha256: String,
}

pub fn load_pretrain(path: &Path) -> Result<LoadedPretrain> {
    let (header, tensors, sha256) = read(path)?;
    if header.kind != CheckpointKind::Pretrain {
        return Err(Error::Format(format!("{} is not a pre-training checkpoint", path.display())));
    }
    let config: PretrainConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| Error::Format(format!("bad training config in header: {e}")))?;
    let mut backbone = Backbone::<f32>::zeros(&header.model_config).map_err(|e| Error::Format(e.to_string()))?;
    fill(&mut backbone, "", &tensors)?;
    let predictor = match tensors.iter().find(|t| t.name == "predictor.fc1.weight") {
        Some(t) if t.shape.len() == 2 => {
            let mut p = Mlp2::zeros(t.shape[0], t.shape[1]);
            fill(&mut p, "predictor", &tensors)?;
            Some(p)
        }
        Some(_) => return Err(Error::Format("malformed predictor tensor".into())),
        None => None,
    };
    let model = PretrainModel { backbone, predictor };
    let mut optimizer = Adam::new(config.optimizer.clone(), model.num_params());
    let moment = |name: &str| -> Result<Vec<f32>> {
        let t = tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks '{name}'")))?;
        if t.data.len() != model.num_params() {
            return Err(Error::Format(format!("'{name}' does not match the parameter count")));
        }
        Ok(t.data.clone())
    };
    optimizer.m = moment("adam.m")?;
    optimizer.v = moment("adam.v")?;
    optimizer.step = header.optimizer_step;
    Ok(LoadedPretrain {
        state: PretrainState {
            model,
            optimizer,
            epochs_done: header.epochs_done,
        },
        header,
        sha256,
    })
}

/// Loads only the backbone of a pre-training checkpoint, with the file hash.
pub fn load_backbone(path: &Path) -> Result<(Backbone<f32>, String)> {
    let loaded = load_pretrain(path)?;
    Ok((loaded.state.model.backbone, loaded.sha256))
}

pub fn adaptor_bytes(adaptor: &Adaptor<f32>, model_config: &VitConfig, backbone_sha256: &str, config: &AdaptConfig) -> Vec<u8> {
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::Adaptor,
        model_config: model_config.clone(),
        seed: config.seed,
        config: serde_json::to_value(config).expect("config serializes"),
        branch_variant: None,
        adaptor_variant: Some(adaptor.variant),
        backbone_sha256: Some(backbone_sha256.to_string()),
        epochs_done: config.epochs,
        optimizer_step: 0,
        tensors: Vec::new(),
    };
    encode(&header, &collect(adaptor, ""))
}

pub fn save_adaptor(
    path: &Path,
    adaptor: &Adaptor<f32>,
    model_config: &VitConfig,
    backbone_sha256: &str,
    config: &AdaptConfig,
) -> Result<String> {
    write(path, &adaptor_bytes(adaptor, model_config, backbone_sha256, config))
}

/// Loads an adaptor, refusing it unless it was trained against the
/// backbone whose checkpoint hash is `backbone_sha256`.
pub fn load_adaptor(path: &Path, backbone_sha256: &str) -> Result<(Adaptor<f32>, Header)> {
    let (header, tensors, _) = read(path)?;
    if header.kind != CheckpointKind::Adaptor {
        return Err(Error::Format(format!("{} is not an adaptor checkpoint", path.display())));
    }
    match header.backbone_sha256.as_deref() {
        Some(h) if h == backbone_sha256 => {}
        other => {
            return Err(Error::Data(format!(
                "adaptor {} was trained against backbone {}, not {backbone_sha256}",
                path.display(),
                other.unwrap_or("<unknown>")
            )))
        }
    }
    let variant = header
        .adaptor_variant
        .ok_or_else(|| Error::Format("adaptor checkpoint lacks its variant".into()))?;
    let c = &header.model_config;
    let mut adaptor = Adaptor::new(variant, AdaptorInit::Passthrough, c.embed_dim, c.heads, c.mlp_hidden(), 0)
        .map_err(|e| Error::Format(e.to_string()))?;
    fill(&mut adaptor, "", &tensors)?;
    Ok((adaptor, header))
}
