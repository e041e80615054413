//! Binary checkpoints.
//!
//! Layout: the magic `SRTC1`, a little-endian `u32` manifest length, a JSON
//! manifest, then the tensor payload as raw little-endian IEEE-754 values.
//! The manifest lists every tensor with its shape, dtype, byte offset into
//! the payload and byte length, plus the layer structure needed to rebuild
//! the networks.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use srtc::autodiff::Activation;
use srtc::data::RssNormalization;
use srtc::expert::{SourceInfo, TeacherBundle};
use srtc::nn::{Critic, Dense, Generator, LocationScale, Mlp, SpecializedNetwork};
use srtc::{DType, Tensor};
use thiserror::Error;

pub const MAGIC: &[u8; 5] = b"SRTC1";
const HEADER_LEN: usize = MAGIC.len() + 4;
const LOCATION_TENSOR: &str = "location";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("not a checkpoint (bad magic)")]
    BadMagic,

    #[error("truncated {section}: need {needed} bytes, have {available}")]
    Truncated {
        section: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("corrupt manifest at `{field}`: {message}")]
    Manifest { field: String, message: String },
}

fn manifest_err(field: impl Into<String>, message: impl Into<String>) -> CheckpointError {
    CheckpointError::Manifest {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Teacher,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub len: usize,
}

/// One MLP: its parameter prefix and per-layer activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkEntry {
    pub role: String,
    pub name: String,
    pub activations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: ArtifactKind,
    pub config_digest: String,
    pub normalization: Option<RssNormalization>,
    pub source: Option<SourceInfo>,
    pub networks: Vec<NetworkEntry>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    Teacher(TeacherBundle<f64>),
    /// A distilled or baseline localization model.
    Model(SpecializedNetwork<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_digest: String,
    /// Mapping the networks' inputs were trained under.
    pub normalization: Option<RssNormalization>,
    pub artifact: Artifact,
}

impl Checkpoint {
    pub fn teacher(self) -> Option<TeacherBundle<f64>> {
        match self.artifact {
            Artifact::Teacher(t) => Some(t),
            Artifact::Model(_) => None,
        }
    }

    pub fn model(self) -> Option<SpecializedNetwork<f64>> {
        match self.artifact {
            Artifact::Model(m) => Some(m),
            Artifact::Teacher(_) => None,
        }
    }
}

fn location_tensor(loc: &LocationScale<f64>) -> Tensor<f64> {
    Tensor::from_vec(1, 3, vec![loc.center[0], loc.center[1], loc.scale])
}

fn specialized_parts<'a>(s: &'a SpecializedNetwork<f64>, out: &mut Vec<(&'static str, &'a Mlp<f64>)>) {
    out.push(("specialized.framer", &s.framer));
    out.push(("specialized.extractor", &s.extractor));
    out.push(("specialized.regressor", &s.regressor));
}

/// Serializes `ckpt` with tensors stored at `dtype`.
pub fn encode(ckpt: &Checkpoint, dtype: DType) -> Result<Vec<u8>, CheckpointError> {
    let mut mlps = Vec::new();
    let (kind, source, location) = match &ckpt.artifact {
        Artifact::Teacher(t) => {
            specialized_parts(&t.specialized, &mut mlps);
            mlps.push(("generator.framer", &t.generator.framer));
            mlps.push(("generator.extractor", &t.generator.extractor));
            mlps.push(("critic", &t.critic.net));
            (ArtifactKind::Teacher, Some(t.source.clone()), &t.specialized.location)
        }
        Artifact::Model(m) => {
            specialized_parts(m, &mut mlps);
            (ArtifactKind::Model, None, &m.location)
        }
    };

    let loc = location_tensor(location);
    let mut named: Vec<(String, &Tensor<f64>)> = Vec::new();
    let mut networks = Vec::new();
    for (role, mlp) in &mlps {
        networks.push(NetworkEntry {
            role: role.to_string(),
            name: mlp.name().to_string(),
            activations: mlp.activations().iter().map(|a| a.name().to_string()).collect(),
        });
        for (l, layer) in mlp.layers().iter().enumerate() {
            named.push((format!("{}.{l}.weight", mlp.name()), &layer.weight));
            named.push((format!("{}.{l}.bias", mlp.name()), &layer.bias));
        }
    }
    named.push((LOCATION_TENSOR.to_string(), &loc));

    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in named {
        let offset = payload.len();
        for &v in t.data() {
            match dtype {
                DType::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                DType::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: dtype.name().to_string(),
            offset,
            len: payload.len() - offset,
        });
    }
    let manifest = Manifest {
        kind,
        config_digest: ckpt.config_digest.clone(),
        normalization: ckpt.normalization,
        source,
        networks,
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| manifest_err("<root>", e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Writes atomically: a sibling temporary file is renamed into place.
pub fn save_checkpoint(ckpt: &Checkpoint, dtype: DType, path: &Path) -> Result<(), CheckpointError> {
    let bytes = encode(ckpt, dtype)?;
    let tmp = path.with_extension("srtc.tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode(&fs::read(path)?)
}

/// Reads only the manifest.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8]), CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::Truncated {
            section: "header",
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let len = u32::from_le_bytes(bytes[MAGIC.len()..HEADER_LEN].try_into().unwrap()) as usize;
    let end = HEADER_LEN + len;
    if bytes.len() < end {
        return Err(CheckpointError::Truncated {
            section: "manifest",
            needed: end,
            available: bytes.len(),
        });
    }
    let mut de = serde_json::Deserializer::from_slice(&bytes[HEADER_LEN..end]);
    let manifest: Manifest = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        manifest_err(field, e.into_inner().to_string())
    })?;
    Ok((manifest, &bytes[end..]))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let (manifest, payload) = read_manifest(bytes)?;
    let tensors = read_tensors(&manifest, payload)?;
    let mut mlps: HashMap<&str, Mlp<f64>> = HashMap::new();
    for (i, net) in manifest.networks.iter().enumerate() {
        let mlp = rebuild_mlp(net, i, &tensors)?;
        if mlps.insert(net.role.as_str(), mlp).is_some() {
            return Err(manifest_err(
                format!("networks[{i}].role"),
                format!("duplicate role `{}`", net.role),
            ));
        }
    }
    let mut take = |role: &str| {
        mlps.remove(role)
            .ok_or_else(|| manifest_err("networks", format!("missing role `{role}`")))
    };
    let loc = tensors
        .get(LOCATION_TENSOR)
        .filter(|t| t.dims() == (1, 3))
        .ok_or_else(|| manifest_err("tensors", format!("missing 1x3 `{LOCATION_TENSOR}` tensor")))?;
    let specialized = SpecializedNetwork {
        framer: take("specialized.framer")?,
        extractor: take("specialized.extractor")?,
        regressor: take("specialized.regressor")?,
        location: LocationScale {
            center: [loc.data()[0], loc.data()[1]],
            scale: loc.data()[2],
        },
    };
    let artifact = match manifest.kind {
        ArtifactKind::Teacher => Artifact::Teacher(TeacherBundle {
            generator: Generator {
                framer: take("generator.framer")?,
                extractor: take("generator.extractor")?,
            },
            critic: Critic { net: take("critic")? },
            specialized,
            source: manifest
                .source
                .clone()
                .ok_or_else(|| manifest_err("source", "teacher checkpoints must name their source"))?,
        }),
        ArtifactKind::Model => Artifact::Model(specialized),
    };
    if let Some(role) = mlps.keys().next() {
        return Err(manifest_err("networks", format!("unexpected role `{role}`")));
    }
    Ok(Checkpoint {
        config_digest: manifest.config_digest,
        normalization: manifest.normalization,
        artifact,
    })
}

/// Validates the tensor table against the payload and decodes every entry.
fn read_tensors(manifest: &Manifest, payload: &[u8]) -> Result<HashMap<String, Tensor<f64>>, CheckpointError> {
    let mut spans: Vec<(usize, usize, usize)> = Vec::new();
    let mut out = HashMap::new();
    for (i, t) in manifest.tensors.iter().enumerate() {
        let field = |f: &str| format!("tensors[{i}].{f}");
        let dtype = DType::parse(&t.dtype)
            .ok_or_else(|| manifest_err(field("dtype"), format!("unknown dtype `{}`", t.dtype)))?;
        if t.shape.len() != 2 || t.shape.contains(&0) {
            return Err(manifest_err(
                field("shape"),
                format!("expected a nonempty matrix, got {:?}", t.shape),
            ));
        }
        let count = t.shape[0] * t.shape[1];
        if t.len != count * dtype.size() {
            return Err(manifest_err(
                field("len"),
                format!("{} bytes cannot hold {count} {} values", t.len, t.dtype),
            ));
        }
        let end = t
            .offset
            .checked_add(t.len)
            .ok_or_else(|| manifest_err(field("offset"), "overflow"))?;
        if end > payload.len() {
            return Err(CheckpointError::Truncated {
                section: "payload",
                needed: end,
                available: payload.len(),
            });
        }
        let raw = &payload[t.offset..end];
        let data: Vec<f64> = match dtype {
            DType::F64 => raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
        };
        if out
            .insert(t.name.clone(), Tensor::from_vec(t.shape[0], t.shape[1], data))
            .is_some()
        {
            return Err(manifest_err(field("name"), format!("duplicate tensor `{}`", t.name)));
        }
        spans.push((t.offset, end, i));
    }
    spans.sort_unstable_by_key(|&(start, _, i)| (start, i));
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(manifest_err(
                format!("tensors[{}].offset", w[1].2),
                "overlaps another tensor",
            ));
        }
    }
    let used: usize = manifest.tensors.iter().map(|t| t.len).sum();
    if used != payload.len() {
        return Err(manifest_err(
            "tensors",
            format!("payload has {} bytes, manifest covers {used}", payload.len()),
        ));
    }
    Ok(out)
}

fn rebuild_mlp(
    net: &NetworkEntry,
    i: usize,
    tensors: &HashMap<String, Tensor<f64>>,
) -> Result<Mlp<f64>, CheckpointError> {
    let mut layers = Vec::with_capacity(net.activations.len());
    for (l, a) in net.activations.iter().enumerate() {
        let activation = Activation::parse(a).ok_or_else(|| {
            manifest_err(
                format!("networks[{i}].activations[{l}]"),
                format!("unknown activation `{a}`"),
            )
        })?;
        let prefix = format!("{}.{l}", net.name);
        let get = |suffix: &str| {
            let key = format!("{prefix}.{suffix}");
            tensors
                .get(&key)
                .cloned()
                .ok_or_else(|| manifest_err("tensors", format!("missing `{key}`")))
        };
        let layer = Dense::from_parts(&prefix, get("weight")?, get("bias")?, activation)
            .map_err(|e| manifest_err(format!("networks[{i}]"), e.to_string()))?;
        layers.push(layer);
    }
    Mlp::from_layers(&net.name, layers).map_err(|e| manifest_err(format!("networks[{i}]"), e.to_string()))
}
