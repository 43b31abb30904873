//! Binary weight container: load/save full model parameter sets and build
//! seeded-random toy models.
//!
//! File layout, bit-exact:
//!
//! ```text
//! [8 bytes]  little-endian u64: byte length of the JSON header
//! [N bytes]  UTF-8 JSON header (keys sorted)
//! [rest]     payload: concatenated raw little-endian row-major f32 tensors
//! ```
//!
//! The header maps each tensor name to `{dtype: "f32", shape: [...],
//! offset_begin, offset_end}` (offsets are payload-relative) and carries two
//! special keys: `__config__` (the model configuration) and `__crc32__`
//! (CRC-32 of the payload, checked on load). Loading validates everything
//! (presence, shapes, offsets, checksum, finiteness) before returning, so a
//! loaded model is never partially checked.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{LayerWeights, ModelConfig, ModelError, ModelWeights};
use crate::rng::CounterRng;
use crate::tensor::TensorF32;

/// Standard deviation of toy-model weight initialization.
pub const TOY_INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum WeightsIoError {
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed container header: {detail}")]
    MalformedHeader { detail: String },
    #[error("missing tensor {name:?}")]
    MissingTensor { name: String },
    #[error("unexpected tensor {name:?} in header")]
    UnexpectedTensor { name: String },
    #[error("tensor {name:?}: expected shape {expected:?}, header says {got:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("tensor {name:?}: unsupported dtype {dtype:?} (only \"f32\")")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor {name:?}: bad offsets: {detail}")]
    BadOffsets { name: String, detail: String },
    #[error("tensors {a:?} and {b:?} overlap in the payload")]
    OverlappingTensors { a: String, b: String },
    #[error("payload checksum mismatch: header says {expected:#010x}, payload hashes to {got:#010x}")]
    ChecksumMismatch { expected: u32, got: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset_begin: usize,
    offset_end: usize,
}

/// Canonical tensor names and shapes for `cfg`, in payload order.
fn tensor_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut specs = vec![
        ("token_embedding".to_string(), vec![cfg.vocab_size, d]),
        ("pos_embedding".to_string(), vec![cfg.max_seq_len, d]),
    ];
    for i in 0..cfg.n_layers {
        let layer = [
            ("ln1_gain", vec![d]),
            ("ln1_bias", vec![d]),
            ("w_q", vec![d, d]),
            ("b_q", vec![d]),
            ("w_k", vec![d, d]),
            ("b_k", vec![d]),
            ("w_v", vec![d, d]),
            ("b_v", vec![d]),
            ("w_o", vec![d, d]),
            ("b_o", vec![d]),
            ("ln2_gain", vec![d]),
            ("ln2_bias", vec![d]),
            ("w_ff1", vec![d, cfg.d_ff]),
            ("b_ff1", vec![cfg.d_ff]),
            ("w_ff2", vec![cfg.d_ff, d]),
            ("b_ff2", vec![d]),
        ];
        for (suffix, shape) in layer {
            specs.push((format!("layer{i}.{suffix}"), shape));
        }
    }
    specs.push(("ln_f_gain".to_string(), vec![d]));
    specs.push(("ln_f_bias".to_string(), vec![d]));
    specs.push(("unembed".to_string(), vec![d, cfg.vocab_size]));
    specs
}

/// Tensor data slices in the same order as [`tensor_specs`].
fn tensor_slices<'a>(w: &'a ModelWeights) -> Vec<&'a [f32]> {
    let mut out: Vec<&[f32]> = vec![w.token_embedding.data(), w.pos_embedding.data()];
    for l in &w.layers {
        out.extend([
            l.ln1_gain.as_slice(),
            l.ln1_bias.as_slice(),
            l.w_q.data(),
            l.b_q.as_slice(),
            l.w_k.data(),
            l.b_k.as_slice(),
            l.w_v.data(),
            l.b_v.as_slice(),
            l.w_o.data(),
            l.b_o.as_slice(),
            l.ln2_gain.as_slice(),
            l.ln2_bias.as_slice(),
            l.w_ff1.data(),
            l.b_ff1.as_slice(),
            l.w_ff2.data(),
            l.b_ff2.as_slice(),
        ]);
    }
    out.push(w.ln_f_gain.as_slice());
    out.push(w.ln_f_bias.as_slice());
    out.push(w.unembed.data());
    out
}

/// Serialize config and weights to `path` in the container format.
pub fn save(cfg: &ModelConfig, w: &ModelWeights, path: &Path) -> Result<(), WeightsIoError> {
    w.validate(cfg)?;
    let specs = tensor_specs(cfg);
    let slices = tensor_slices(w);

    let mut payload = Vec::new();
    let mut header: BTreeMap<String, Value> = BTreeMap::new();
    for ((name, shape), slice) in specs.iter().zip(&slices) {
        let begin = payload.len();
        for &v in *slice {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let entry = TensorEntry {
            dtype: "f32".into(),
            shape: shape.clone(),
            offset_begin: begin,
            offset_end: payload.len(),
        };
        header.insert(name.clone(), serde_json::to_value(entry).expect("entry serializes"));
    }
    header.insert("__config__".into(), serde_json::to_value(cfg).expect("config serializes"));
    header.insert("__crc32__".into(), Value::from(crc32fast::hash(&payload)));

    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let mut file = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    file.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    file.extend_from_slice(&header_bytes);
    file.extend_from_slice(&payload);
    std::fs::write(path, file)
        .map_err(|source| WeightsIoError::Io { path: path.display().to_string(), source })
}

/// Load and fully validate a container written by [`save`].
pub fn load(path: &Path) -> Result<(ModelConfig, ModelWeights), WeightsIoError> {
    let bytes = std::fs::read(path)
        .map_err(|source| WeightsIoError::Io { path: path.display().to_string(), source })?;
    if bytes.len() < 8 {
        return Err(WeightsIoError::MalformedHeader {
            detail: format!("file is {} bytes, need at least 8 for the length field", bytes.len()),
        });
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let payload_start = 8usize.checked_add(header_len).ok_or_else(|| {
        WeightsIoError::MalformedHeader { detail: "header length overflows".into() }
    })?;
    if payload_start > bytes.len() {
        return Err(WeightsIoError::MalformedHeader {
            detail: format!(
                "header claims {header_len} bytes but only {} remain",
                bytes.len() - 8
            ),
        });
    }
    let mut header: BTreeMap<String, Value> = serde_json::from_slice(&bytes[8..payload_start])
        .map_err(|e| WeightsIoError::MalformedHeader { detail: e.to_string() })?;

    let cfg: ModelConfig = serde_json::from_value(
        header
            .remove("__config__")
            .ok_or_else(|| WeightsIoError::MalformedHeader { detail: "missing __config__".into() })?,
    )
    .map_err(|e| WeightsIoError::MalformedHeader { detail: format!("bad __config__: {e}") })?;
    cfg.validate()?;
    let expected_crc: u32 = serde_json::from_value(
        header
            .remove("__crc32__")
            .ok_or_else(|| WeightsIoError::MalformedHeader { detail: "missing __crc32__".into() })?,
    )
    .map_err(|e| WeightsIoError::MalformedHeader { detail: format!("bad __crc32__: {e}") })?;

    let payload = &bytes[payload_start..];
    let got_crc = crc32fast::hash(payload);
    if got_crc != expected_crc {
        return Err(WeightsIoError::ChecksumMismatch { expected: expected_crc, got: got_crc });
    }

    // Decode each expected tensor, tracking extents for the overlap check.
    let specs = tensor_specs(&cfg);
    let mut extents: Vec<(usize, usize, String)> = Vec::with_capacity(specs.len());
    let mut tensors: BTreeMap<String, TensorF32> = BTreeMap::new();
    for (name, shape) in &specs {
        let value = header
            .remove(name)
            .ok_or_else(|| WeightsIoError::MissingTensor { name: name.clone() })?;
        let entry: TensorEntry = serde_json::from_value(value).map_err(|e| {
            WeightsIoError::MalformedHeader { detail: format!("tensor {name}: {e}") }
        })?;
        if entry.dtype != "f32" {
            return Err(WeightsIoError::UnsupportedDtype { name: name.clone(), dtype: entry.dtype });
        }
        if &entry.shape != shape {
            return Err(WeightsIoError::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                got: entry.shape,
            });
        }
        let numel: usize = shape.iter().product();
        if entry.offset_end < entry.offset_begin
            || entry.offset_end - entry.offset_begin != numel * 4
            || entry.offset_end > payload.len()
        {
            return Err(WeightsIoError::BadOffsets {
                name: name.clone(),
                detail: format!(
                    "[{}, {}) for {numel} f32 values in a payload of {} bytes",
                    entry.offset_begin,
                    entry.offset_end,
                    payload.len()
                ),
            });
        }
        extents.push((entry.offset_begin, entry.offset_end, name.clone()));
        let data: Vec<f32> = payload[entry.offset_begin..entry.offset_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = TensorF32::new(shape.clone(), data)
            .map_err(|e| ModelError::BadWeights { detail: e.to_string() })?;
        tensors.insert(name.clone(), tensor);
    }
    if let Some(name) = header.keys().next() {
        return Err(WeightsIoError::UnexpectedTensor { name: name.clone() });
    }
    extents.sort();
    for pair in extents.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(WeightsIoError::OverlappingTensors {
                a: pair[0].2.clone(),
                b: pair[1].2.clone(),
            });
        }
    }

    let weights = assemble(&cfg, &mut tensors);
    weights.validate(&cfg)?;
    Ok((cfg, weights))
}

fn take(tensors: &mut BTreeMap<String, TensorF32>, name: &str) -> TensorF32 {
    tensors.remove(name).expect("presence checked above")
}

fn take1(tensors: &mut BTreeMap<String, TensorF32>, name: &str) -> Vec<f32> {
    take(tensors, name).data().to_vec()
}

fn assemble(cfg: &ModelConfig, t: &mut BTreeMap<String, TensorF32>) -> ModelWeights {
    let layers = (0..cfg.n_layers)
        .map(|i| {
            let p = |s: &str| format!("layer{i}.{s}");
            LayerWeights {
                ln1_gain: take1(t, &p("ln1_gain")),
                ln1_bias: take1(t, &p("ln1_bias")),
                w_q: take(t, &p("w_q")),
                b_q: take1(t, &p("b_q")),
                w_k: take(t, &p("w_k")),
                b_k: take1(t, &p("b_k")),
                w_v: take(t, &p("w_v")),
                b_v: take1(t, &p("b_v")),
                w_o: take(t, &p("w_o")),
                b_o: take1(t, &p("b_o")),
                ln2_gain: take1(t, &p("ln2_gain")),
                ln2_bias: take1(t, &p("ln2_bias")),
                w_ff1: take(t, &p("w_ff1")),
                b_ff1: take1(t, &p("b_ff1")),
                w_ff2: take(t, &p("w_ff2")),
                b_ff2: take1(t, &p("b_ff2")),
            }
        })
        .collect();
    ModelWeights {
        token_embedding: take(t, "token_embedding"),
        pos_embedding: take(t, "pos_embedding"),
        layers,
        ln_f_gain: take1(t, "ln_f_gain"),
        ln_f_bias: take1(t, "ln_f_bias"),
        unembed: take(t, "unembed"),
    }
}

/// Seeded-random toy model: every value drawn from N(0, 0.02²).
///
/// Values fill tensors in the canonical container order (token embedding,
/// positional embedding, each layer's tensors, final layer norm,
/// unembedding) from a single [`CounterRng::new`]`(seed)` stream, so a given
/// (config, seed) pair always produces bit-identical weights.
pub fn make_toy_model(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights, ModelError> {
    make_toy_model_with_std(cfg, seed, TOY_INIT_STD)
}

/// [`make_toy_model`] with a chosen standard deviation. Values near the
/// default leave logits nearly uniform; larger values (0.2 to 0.5) give a
/// toy model whose continuations actually depend on the prompt.
pub fn make_toy_model_with_std(
    cfg: &ModelConfig,
    seed: u64,
    std: f64,
) -> Result<ModelWeights, ModelError> {
    cfg.validate()?;
    if !(std.is_finite() && std > 0.0) {
        return Err(ModelError::BadConfig {
            detail: format!("init std {std} must be finite and positive"),
        });
    }
    let mut rng = CounterRng::new(seed);
    let mut tensors: BTreeMap<String, TensorF32> = BTreeMap::new();
    for (name, shape) in tensor_specs(cfg) {
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = (0..numel).map(|_| (rng.next_gaussian() * std) as f32).collect();
        tensors.insert(name, TensorF32::new(shape, data).expect("shape matches data"));
    }
    let weights = assemble(cfg, &mut tensors);
    weights.validate(cfg)?;
    Ok(weights)
}
