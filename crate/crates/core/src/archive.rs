//! Bit-exact flat tensor archive, GPT-2 name mapping for importing
//! pretrained text weights, and full-experiment checkpoints.
//!
//! Container layout: an 8-byte little-endian unsigned header length, a
//! UTF-8 JSON header object mapping tensor name → `{"dtype":"F32",
//! "shape":[...],"data_offsets":[begin,end]}` with offsets relative to the
//! payload start, then the payload. This matches the de-facto flat-tensor
//! layout public GPT-2 weights are distributed in, so real small-preset
//! checkpoints can be ingested directly. Only F32 is accepted; endianness
//! is little regardless of host.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{GraftError, Result};
use crate::frontends::{Frontend, FrontendSpec};
use crate::heads::{ClassifierHead, HeadSpec};
use crate::lora::AdapterSet;
use crate::matrix::Matrix;
use crate::model::{ClassifierModel, TrainMode};
use crate::num::Rng;
use crate::transformer::{BackboneWeights, ModelConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Reserved header key for experiment metadata (ours).
pub const META_KEY: &str = "__meta__";
/// Header key used by the common flat-tensor format for string metadata;
/// tolerated and ignored on read.
const FOREIGN_META_KEY: &str = "__metadata__";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchiveEntry {
    pub shape: Vec<usize>,
    pub begin: usize,
    pub end: usize,
}

impl ArchiveEntry {
    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parsed archive: validated header plus the raw payload.
#[derive(Debug, Clone)]
pub struct TensorArchive {
    entries: BTreeMap<String, ArchiveEntry>,
    payload: Vec<u8>,
    pub meta: Option<Value>,
}

#[derive(Debug, Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Scans the top-level keys of a JSON object for duplicates, which
/// `serde_json` would otherwise silently collapse.
fn find_duplicate_top_level_key(header: &str) -> Result<Option<String>> {
    let bytes = header.as_bytes();
    let mut depth = 0i32;
    let mut i = 0usize;
    let mut seen = std::collections::BTreeSet::new();
    while i < bytes.len() {
        match bytes[i] {
            b'"' => {
                // consume the string, tracking escapes
                let start = i + 1;
                i += 1;
                while i < bytes.len() {
                    match bytes[i] {
                        b'\\' => i += 2,
                        b'"' => break,
                        _ => i += 1,
                    }
                }
                if i >= bytes.len() {
                    return Err(GraftError::ArchiveHeader(
                        "unterminated string in header".into(),
                    ));
                }
                let content = &header[start..i];
                // a key is a depth-1 string followed by ':'
                if depth == 1 {
                    let mut j = i + 1;
                    while j < bytes.len() && (bytes[j] as char).is_whitespace() {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j] == b':' && !seen.insert(content.to_string()) {
                        return Ok(Some(content.to_string()));
                    }
                }
            }
            b'{' | b'[' => depth += 1,
            b'}' | b']' => depth -= 1,
            _ => {}
        }
        i += 1;
    }
    Ok(None)
}

impl TensorArchive {
    pub fn read(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(GraftError::ArchiveHeader(format!(
                "file too short for header length prefix ({} bytes)",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let payload_start = 8usize
            .checked_add(header_len)
            .ok_or_else(|| GraftError::ArchiveHeader("header length overflows".into()))?;
        if payload_start > bytes.len() {
            return Err(GraftError::ArchiveHeader(format!(
                "declared header length {header_len} exceeds file size {}",
                bytes.len()
            )));
        }
        let header_str = std::str::from_utf8(&bytes[8..payload_start])
            .map_err(|e| GraftError::ArchiveHeader(format!("header is not UTF-8: {e}")))?;
        if let Some(dup) = find_duplicate_top_level_key(header_str)? {
            return Err(GraftError::ArchiveDuplicate(dup));
        }
        let header: BTreeMap<String, Value> = serde_json::from_str(header_str)
            .map_err(|e| GraftError::ArchiveHeader(format!("bad header JSON: {e}")))?;
        let payload = bytes[payload_start..].to_vec();

        let mut entries = BTreeMap::new();
        let mut meta = None;
        for (name, value) in header {
            if name == META_KEY {
                meta = Some(value);
                continue;
            }
            if name == FOREIGN_META_KEY {
                continue;
            }
            let raw: RawEntry = serde_json::from_value(value).map_err(|e| {
                GraftError::ArchiveHeader(format!("entry {name:?} malformed: {e}"))
            })?;
            if raw.dtype != "F32" {
                return Err(GraftError::ArchiveDtype {
                    name,
                    dtype: raw.dtype,
                });
            }
            let [begin, end] = raw.data_offsets;
            let elements: usize = raw.shape.iter().product();
            if end < begin || end - begin != elements * 4 {
                return Err(GraftError::ArchiveHeader(format!(
                    "entry {name:?}: byte range {begin}..{end} does not match shape {:?}",
                    raw.shape
                )));
            }
            if end > payload.len() {
                return Err(GraftError::ArchiveTruncated {
                    declared: end,
                    actual: payload.len(),
                });
            }
            entries.insert(
                name,
                ArchiveEntry {
                    shape: raw.shape,
                    begin,
                    end,
                },
            );
        }

        // non-overlap: sort ranges by begin, adjacent must not intersect
        let mut ranges: Vec<(&String, &ArchiveEntry)> = entries.iter().collect();
        ranges.sort_by_key(|(_, e)| e.begin);
        for pair in ranges.windows(2) {
            let (first_name, first) = pair[0];
            let (second_name, second) = pair[1];
            if second.begin < first.end {
                return Err(GraftError::ArchiveOverlap {
                    first: first_name.clone(),
                    second: second_name.clone(),
                });
            }
        }

        Ok(TensorArchive {
            entries,
            payload,
            meta,
        })
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        TensorArchive::read(&std::fs::read(path)?)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.get(name)
    }

    /// Decodes a tensor to f32, rejecting non-finite entries.
    pub fn tensor(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| GraftError::MissingTensor(name.to_string()))?;
        let raw = &self.payload[entry.begin..entry.end];
        let mut data = Vec::with_capacity(entry.elements());
        for chunk in raw.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(GraftError::NonFinite(name.to_string()));
            }
            data.push(v);
        }
        Ok((entry.shape.clone(), data))
    }

    /// Fetches a tensor as a `[rows × cols]` matrix. A 1-D tensor of length
    /// `cols` is accepted for single-row targets.
    pub fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix<f32>> {
        let (shape, data) = self.tensor(name)?;
        let ok = shape == [rows, cols] || (rows == 1 && shape == [cols]);
        if !ok {
            return Err(GraftError::TensorShape {
                name: name.to_string(),
                expected: vec![rows, cols],
                got: shape,
            });
        }
        Ok(Matrix::from_vec(rows, cols, data))
    }
}

/// One tensor headed for an archive.
#[derive(Debug, Clone)]
pub struct ArchiveTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ArchiveTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        let t = ArchiveTensor {
            name: name.into(),
            shape,
            data,
        };
        assert_eq!(
            t.shape.iter().product::<usize>(),
            t.data.len(),
            "tensor {} shape/data mismatch",
            t.name
        );
        t
    }

    pub fn from_matrix(name: impl Into<String>, m: &Matrix<f32>) -> Self {
        ArchiveTensor::new(name, vec![m.rows(), m.cols()], m.data().to_vec())
    }
}

/// Serializes tensors and optional metadata; payload is packed in the
/// given entry order and the header keys serialize sorted, so identical
/// inputs yield identical bytes.
pub fn write_archive(tensors: &[ArchiveTensor], meta: Option<&Value>) -> Result<Vec<u8>> {
    let mut header = BTreeMap::<String, Value>::new();
    let mut offset = 0usize;
    let mut payload = Vec::new();
    for t in tensors {
        if header.contains_key(&t.name) {
            return Err(GraftError::ArchiveDuplicate(t.name.clone()));
        }
        let begin = offset;
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.data.len() * 4;
        header.insert(
            t.name.clone(),
            serde_json::json!({
                "dtype": "F32",
                "shape": t.shape,
                "data_offsets": [begin, offset],
            }),
        );
    }
    if let Some(m) = meta {
        header.insert(META_KEY.to_string(), m.clone());
    }
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| GraftError::ArchiveHeader(format!("header serialization: {e}")))?;
    let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// The fixed correspondence between source GPT-2 tensor names and backbone
/// fields. Source matrices are conv-style `[in × out]`, which is also the
/// internal orientation; vectors are 1-D. `wte.weight` is deliberately
/// ignored: modality front-ends replace the token embedding.
pub fn gpt2_name_map(config: &ModelConfig) -> Vec<(String, String)> {
    let mut map = vec![("wpe.weight".to_string(), "backbone.pos".to_string())];
    for i in 0..config.n_layers {
        for (src, dst) in [
            ("ln_1.weight", "ln1_g"),
            ("ln_1.bias", "ln1_b"),
            ("attn.c_attn.weight", "qkv_w"),
            ("attn.c_attn.bias", "qkv_b"),
            ("attn.c_proj.weight", "attn_out_w"),
            ("attn.c_proj.bias", "attn_out_b"),
            ("ln_2.weight", "ln2_g"),
            ("ln_2.bias", "ln2_b"),
            ("mlp.c_fc.weight", "mlp_fc_w"),
            ("mlp.c_fc.bias", "mlp_fc_b"),
            ("mlp.c_proj.weight", "mlp_out_w"),
            ("mlp.c_proj.bias", "mlp_out_b"),
        ] {
            map.push((format!("h.{i}.{src}"), format!("backbone.h{i}.{dst}")));
        }
    }
    map.push(("ln_f.weight".to_string(), "backbone.lnf_g".to_string()));
    map.push(("ln_f.bias".to_string(), "backbone.lnf_b".to_string()));
    map
}

fn strip_transformer_prefix(name: &str) -> &str {
    name.strip_prefix("transformer.").unwrap_or(name)
}

/// Imports pretrained GPT-2 weights. Fused conv-style matrices stored
/// `[in × out]` are placed so the forward pass matches the reference GPT-2
/// computation; unmapped names (`wte.weight`, attention mask buffers) are
/// skipped. Errors name the offending tensor.
pub fn import_gpt2(archive: &TensorArchive, config: &ModelConfig) -> Result<BackboneWeights<f32>> {
    let d = config.d_model;
    let ff = config.d_ff;
    // source names may carry a "transformer." prefix depending on the dump
    let resolve = |src: &str| -> Option<String> {
        if archive.contains(src) {
            return Some(src.to_string());
        }
        let prefixed = format!("transformer.{src}");
        if archive.contains(&prefixed) {
            return Some(prefixed);
        }
        archive
            .names()
            .find(|n| strip_transformer_prefix(n) == src)
            .cloned()
    };
    let fetch = |src: &str, rows: usize, cols: usize| -> Result<Matrix<f32>> {
        let name = resolve(src).ok_or_else(|| GraftError::MissingTensor(src.to_string()))?;
        archive.matrix(&name, rows, cols)
    };

    let mut weights = BackboneWeights::zeros(config);
    weights.pos_embedding = fetch("wpe.weight", config.max_positions, d)?;
    for i in 0..config.n_layers {
        let layer = &mut weights.layers[i];
        layer.ln1_gain = fetch(&format!("h.{i}.ln_1.weight"), 1, d)?;
        layer.ln1_bias = fetch(&format!("h.{i}.ln_1.bias"), 1, d)?;
        layer.qkv_weight = fetch(&format!("h.{i}.attn.c_attn.weight"), d, 3 * d)?;
        layer.qkv_bias = fetch(&format!("h.{i}.attn.c_attn.bias"), 1, 3 * d)?;
        layer.attn_out_weight = fetch(&format!("h.{i}.attn.c_proj.weight"), d, d)?;
        layer.attn_out_bias = fetch(&format!("h.{i}.attn.c_proj.bias"), 1, d)?;
        layer.ln2_gain = fetch(&format!("h.{i}.ln_2.weight"), 1, d)?;
        layer.ln2_bias = fetch(&format!("h.{i}.ln_2.bias"), 1, d)?;
        layer.mlp_fc_weight = fetch(&format!("h.{i}.mlp.c_fc.weight"), d, ff)?;
        layer.mlp_fc_bias = fetch(&format!("h.{i}.mlp.c_fc.bias"), 1, ff)?;
        layer.mlp_out_weight = fetch(&format!("h.{i}.mlp.c_proj.weight"), ff, d)?;
        layer.mlp_out_bias = fetch(&format!("h.{i}.mlp.c_proj.bias"), 1, d)?;
    }
    weights.lnf_gain = fetch("ln_f.weight", 1, d)?;
    weights.lnf_bias = fetch("ln_f.bias", 1, d)?;
    weights.ensure_finite()?;
    weights.validate_shapes(config)?;
    Ok(weights)
}

/// Inverse of [`import_gpt2`]: writes a backbone in source orientation and
/// naming, usable as a synthetic pretrained-weights fixture.
pub fn export_gpt2(weights: &BackboneWeights<f32>, config: &ModelConfig) -> Result<Vec<u8>> {
    weights.validate_shapes(config)?;
    let vec1d = |m: &Matrix<f32>| ArchiveTensor::new("", vec![m.cols()], m.data().to_vec());
    let mut tensors = Vec::new();
    let mut push = |name: String, t: ArchiveTensor| {
        tensors.push(ArchiveTensor { name, ..t });
    };
    push(
        "wpe.weight".into(),
        ArchiveTensor::from_matrix("", &weights.pos_embedding),
    );
    for (i, l) in weights.layers.iter().enumerate() {
        push(format!("h.{i}.ln_1.weight"), vec1d(&l.ln1_gain));
        push(format!("h.{i}.ln_1.bias"), vec1d(&l.ln1_bias));
        push(
            format!("h.{i}.attn.c_attn.weight"),
            ArchiveTensor::from_matrix("", &l.qkv_weight),
        );
        push(format!("h.{i}.attn.c_attn.bias"), vec1d(&l.qkv_bias));
        push(
            format!("h.{i}.attn.c_proj.weight"),
            ArchiveTensor::from_matrix("", &l.attn_out_weight),
        );
        push(format!("h.{i}.attn.c_proj.bias"), vec1d(&l.attn_out_bias));
        push(format!("h.{i}.ln_2.weight"), vec1d(&l.ln2_gain));
        push(format!("h.{i}.ln_2.bias"), vec1d(&l.ln2_bias));
        push(
            format!("h.{i}.mlp.c_fc.weight"),
            ArchiveTensor::from_matrix("", &l.mlp_fc_weight),
        );
        push(format!("h.{i}.mlp.c_fc.bias"), vec1d(&l.mlp_fc_bias));
        push(
            format!("h.{i}.mlp.c_proj.weight"),
            ArchiveTensor::from_matrix("", &l.mlp_out_weight),
        );
        push(format!("h.{i}.mlp.c_proj.bias"), vec1d(&l.mlp_out_bias));
    }
    push("ln_f.weight".into(), vec1d(&weights.lnf_gain));
    push("ln_f.bias".into(), vec1d(&weights.lnf_bias));
    write_archive(&tensors, None)
}

/// Experiment metadata stored under the reserved `__meta__` header key.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentMeta {
    pub version: u32,
    pub config: ModelConfig,
    pub frontend: FrontendSpec,
    pub head: HeadSpec,
    pub mode: TrainMode,
    pub adapter_rank: usize,
    pub adapter_alpha: f64,
    pub step: u64,
    /// Free-form run context: task name, train config echo, seed.
    #[serde(default)]
    pub extra: Value,
}

/// Optimizer moments keyed by parameter name; sorted for determinism.
#[derive(Debug, Clone, Default)]
pub struct MomentMaps {
    pub m: BTreeMap<String, Matrix<f32>>,
    pub v: BTreeMap<String, Matrix<f32>>,
}

/// Serializes model + optimizer moments + metadata. Saving the same state
/// twice yields identical bytes.
pub fn save_experiment(
    model: &ClassifierModel<f32>,
    moments: &MomentMaps,
    meta: &ExperimentMeta,
) -> Result<Vec<u8>> {
    let mut tensors: BTreeMap<String, ArchiveTensor> = BTreeMap::new();
    model.visit(&mut |name, m| {
        tensors.insert(name.clone(), ArchiveTensor::from_matrix(name, m));
    });
    for (name, m) in &moments.m {
        tensors.insert(
            format!("opt.m.{name}"),
            ArchiveTensor::from_matrix(format!("opt.m.{name}"), m),
        );
    }
    for (name, m) in &moments.v {
        tensors.insert(
            format!("opt.v.{name}"),
            ArchiveTensor::from_matrix(format!("opt.v.{name}"), m),
        );
    }
    let ordered: Vec<ArchiveTensor> = tensors.into_values().collect();
    let meta_value = serde_json::to_value(meta)
        .map_err(|e| GraftError::ArchiveHeader(format!("meta serialization: {e}")))?;
    write_archive(&ordered, Some(&meta_value))
}

pub fn save_experiment_to(
    path: &std::path::Path,
    model: &ClassifierModel<f32>,
    moments: &MomentMaps,
    meta: &ExperimentMeta,
) -> Result<()> {
    let bytes = save_experiment(model, moments, meta)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Restores a model, optimizer moments and metadata from checkpoint bytes.
pub fn load_experiment(bytes: &[u8]) -> Result<(ClassifierModel<f32>, MomentMaps, ExperimentMeta)> {
    let archive = TensorArchive::read(bytes)?;
    let meta_value = archive
        .meta
        .clone()
        .ok_or_else(|| GraftError::ArchiveHeader("checkpoint missing __meta__".into()))?;
    let version = meta_value
        .get("version")
        .and_then(Value::as_u64)
        .unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(GraftError::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            got: version,
        });
    }
    let meta: ExperimentMeta = serde_json::from_value(meta_value)
        .map_err(|e| GraftError::ArchiveHeader(format!("corrupt __meta__ section: {e}")))?;
    meta.config.validate()?;

    // rebuild containers, then overwrite every tensor from the archive
    let mut scratch_rng = Rng::new(0);
    let frontend = Frontend::<f32>::build(&meta.frontend, meta.config.d_model, &mut scratch_rng)?;
    let head = ClassifierHead::<f32>::build(&meta.head, meta.config.d_model, &mut scratch_rng)?;
    let adapters = match meta.mode {
        TrainMode::Lora => Some(AdapterSet::<f32>::init(
            &meta.config,
            meta.adapter_rank,
            meta.adapter_alpha,
            &mut scratch_rng,
        )?),
        _ => None,
    };
    let mut model = ClassifierModel {
        config: meta.config.clone(),
        frontend,
        backbone: BackboneWeights::zeros(&meta.config),
        adapters,
        head,
    };
    let mut missing = Vec::new();
    let mut shape_err = None;
    model.visit_mut(&mut |name, m| {
        if shape_err.is_some() {
            return;
        }
        match archive.matrix(&name, m.rows(), m.cols()) {
            Ok(values) => *m = values,
            Err(GraftError::MissingTensor(n)) => missing.push(n),
            Err(e) => shape_err = Some(e),
        }
    });
    if let Some(e) = shape_err {
        return Err(e);
    }
    if let Some(name) = missing.first() {
        return Err(GraftError::MissingTensor(name.clone()));
    }

    let mut moments = MomentMaps::default();
    for name in archive.names() {
        if let Some(param) = name.strip_prefix("opt.m.") {
            let entry = archive.entry(name).unwrap();
            let (rows, cols) = two_d(&entry.shape, name)?;
            moments
                .m
                .insert(param.to_string(), archive.matrix(name, rows, cols)?);
        } else if let Some(param) = name.strip_prefix("opt.v.") {
            let entry = archive.entry(name).unwrap();
            let (rows, cols) = two_d(&entry.shape, name)?;
            moments
                .v
                .insert(param.to_string(), archive.matrix(name, rows, cols)?);
        }
    }
    Ok((model, moments, meta))
}

pub fn load_experiment_from(
    path: &std::path::Path,
) -> Result<(ClassifierModel<f32>, MomentMaps, ExperimentMeta)> {
    load_experiment(&std::fs::read(path)?)
}

fn two_d(shape: &[usize], name: &str) -> Result<(usize, usize)> {
    match shape {
        [rows, cols] => Ok((*rows, *cols)),
        other => Err(GraftError::TensorShape {
            name: name.to_string(),
            expected: vec![0, 0],
            got: other.to_vec(),
        }),
    }
}
