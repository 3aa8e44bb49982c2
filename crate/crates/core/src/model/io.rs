//! On-disk model format: a JSON `manifest` plus one raw little-endian `f32`
//! blob per tensor under `tensors/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BatchNorm, Conv, Dense, Layer, LayerKind, Model, Normalization, Op, Padding, Pool};
use crate::tensor::{Shape, WeightTensor};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest";
pub const TENSOR_DIR: &str = "tensors";
pub const MANIFEST_FORMAT: &str = "qsfm-model/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    name: String,
    input: Shape,
    classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normalization: Option<NormalizationEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    notes: Option<String>,
    layers: Vec<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormalizationEntry {
    mean: Vec<f32>,
    std: Vec<f32>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    name: String,
    kind: String,
    inputs: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epsilon: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cap: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    global: Option<bool>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    tensors: BTreeMap<String, TensorRef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRef {
    file: String,
    dims: Vec<usize>,
}

/// Reads a model directory and validates it.
pub fn load_model(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Manifest(format!(
            "unsupported format '{}', expected '{MANIFEST_FORMAT}'",
            manifest.format
        )));
    }

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (index, value) in manifest.layers.into_iter().enumerate() {
        let entry: LayerEntry = serde_json::from_value(value)
            .map_err(|e| Error::layer(index, "?", format!("malformed entry: {e}")))?;
        layers.push(decode_layer(dir, index, entry)?);
    }

    let model = Model {
        name: manifest.name,
        input: manifest.input,
        classes: manifest.classes,
        normalization: manifest.normalization.map(|n| Normalization {
            mean: n.mean,
            std: n.std,
        }),
        notes: manifest.notes,
        layers,
    };
    let violations = super::validate(&model);
    if !violations.is_empty() {
        return Err(Error::Invalid(violations));
    }
    Ok(model)
}

fn decode_layer(dir: &Path, index: usize, e: LayerEntry) -> Result<Layer> {
    let err = |msg: String| Error::layer(index, &e.name, msg);
    let kind = LayerKind::parse(&e.kind)
        .ok_or_else(|| err(format!("unsupported layer kind '{}'", e.kind)))?;
    let tensor = |role: &str| -> Result<WeightTensor> {
        let r = e
            .tensors
            .get(role)
            .ok_or_else(|| err(format!("missing tensor '{role}'")))?;
        read_blob(dir, r).map_err(|m| match m {
            Error::Io { .. } => m,
            other => err(format!("tensor '{role}': {other}")),
        })
    };
    let padding = || -> Result<Padding> {
        e.padding
            .as_deref()
            .unwrap_or("valid")
            .parse()
            .map_err(err)
    };
    let required = |v: Option<usize>, what: &str| v.ok_or_else(|| err(format!("missing '{what}'")));
    let optional_bias = || -> Result<Option<WeightTensor>> {
        match (e.bias.unwrap_or(false), e.tensors.contains_key("bias")) {
            (true, true) => tensor("bias").map(Some),
            (false, false) => Ok(None),
            (true, false) => Err(err("bias flag set but no bias tensor".into())),
            (false, true) => Err(err("bias tensor present but bias flag not set".into())),
        }
    };

    let op = match kind {
        LayerKind::Conv2D | LayerKind::DepthwiseConv2D => {
            let conv = Conv {
                kernel: required(e.kernel, "kernel")?,
                stride: e.stride.unwrap_or(1),
                padding: padding()?,
                weight: tensor("weight")?,
                bias: optional_bias()?,
            };
            if kind == LayerKind::Conv2D {
                Op::Conv2D(conv)
            } else {
                Op::DepthwiseConv2D(conv)
            }
        }
        LayerKind::BatchNorm => Op::BatchNorm(BatchNorm {
            epsilon: e.epsilon.ok_or_else(|| err("missing 'epsilon'".into()))?,
            scale: tensor("scale")?,
            shift: tensor("shift")?,
            mean: tensor("mean")?,
            variance: tensor("variance")?,
        }),
        LayerKind::ReLU => Op::ReLU { cap: e.cap },
        LayerKind::Add => Op::Add,
        LayerKind::AvgPool | LayerKind::MaxPool => {
            let global = e.global.unwrap_or(false);
            let pool = Pool {
                kernel: if global { 0 } else { required(e.kernel, "kernel")? },
                stride: e.stride.unwrap_or(1),
                padding: padding()?,
                global,
            };
            if kind == LayerKind::AvgPool {
                Op::AvgPool(pool)
            } else {
                Op::MaxPool(pool)
            }
        }
        LayerKind::Dense => Op::Dense(Dense {
            weight: tensor("weight")?,
            bias: optional_bias()?,
        }),
        LayerKind::Softmax => Op::Softmax,
        LayerKind::Flatten => Op::Flatten,
    };
    Ok(Layer {
        name: e.name.clone(),
        inputs: e.inputs.clone(),
        op,
    })
}

fn read_blob(dir: &Path, r: &TensorRef) -> Result<WeightTensor> {
    let path = dir.join(&r.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected: usize = r.dims.iter().product();
    if bytes.len() != expected * 4 {
        return Err(Error::Manifest(format!(
            "tensor size mismatch: dims {:?} need {} bytes, {} has {}",
            r.dims,
            expected * 4,
            r.file,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(WeightTensor::new(r.dims.clone(), data))
}

/// Writes `model` to `dir`, replacing any previous blobs in `dir/tensors`.
pub fn save_model(model: &Model, dir: impl AsRef<Path>) -> Result<()> {
    let violations = super::validate(model);
    if !violations.is_empty() {
        return Err(Error::Invalid(violations));
    }
    let dir = dir.as_ref();
    let tensor_dir = dir.join(TENSOR_DIR);
    fs::create_dir_all(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))?;
    for entry in fs::read_dir(&tensor_dir).map_err(|e| Error::io(&tensor_dir, e))? {
        let path = entry.map_err(|e| Error::io(&tensor_dir, e))?.path();
        if path.extension().is_some_and(|x| x == "bin") {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }

    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let mut entry = LayerEntry {
            name: layer.name.clone(),
            kind: layer.kind().as_str().to_string(),
            inputs: layer.inputs.clone(),
            ..Default::default()
        };
        match &layer.op {
            Op::Conv2D(c) | Op::DepthwiseConv2D(c) => {
                entry.kernel = Some(c.kernel);
                entry.stride = Some(c.stride);
                entry.padding = Some(c.padding.as_str().into());
                entry.bias = Some(c.bias.is_some());
            }
            Op::Dense(d) => entry.bias = Some(d.bias.is_some()),
            Op::BatchNorm(bn) => entry.epsilon = Some(bn.epsilon),
            Op::ReLU { cap } => entry.cap = *cap,
            Op::AvgPool(p) | Op::MaxPool(p) => {
                if p.global {
                    entry.global = Some(true);
                } else {
                    entry.kernel = Some(p.kernel);
                    entry.stride = Some(p.stride);
                    entry.padding = Some(p.padding.as_str().into());
                }
            }
            Op::Add | Op::Softmax | Op::Flatten => {}
        }
        for (role, t) in layer.op.tensors() {
            let file = format!("{TENSOR_DIR}/{i:04}_{}_{role}.bin", sanitize(&layer.name));
            let path = dir.join(&file);
            let mut bytes = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            entry.tensors.insert(
                role.to_string(),
                TensorRef {
                    file,
                    dims: t.dims.clone(),
                },
            );
        }
        layers.push(serde_json::to_value(entry).expect("layer entry serializes"));
    }

    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        name: model.name.clone(),
        input: model.input,
        classes: model.classes,
        normalization: model.normalization.as_ref().map(|n| NormalizationEntry {
            mean: n.mean.clone(),
            std: n.std.clone(),
        }),
        notes: model.notes.clone(),
        layers,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}
