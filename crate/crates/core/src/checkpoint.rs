//! Model weights, seeded generation, and the single-file checkpoint format.
//!
//! Layout on disk:
//!
//! ```text
//! b"HARPCKPT" | u64 LE header length | UTF-8 JSON header | payload (LE f32)
//! ```
//!
//! The header carries the format version, the model config and a tensor
//! table (name, shape, byte offset into the payload, dtype). Tensors are
//! stored contiguously in a fixed order derived from the config.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{HarpError, Result};
use crate::pruning::PruneSpec;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"HARPCKPT";
pub const FORMAT_VERSION: u32 = 1;
pub const SUPPORTED_VERSIONS: &[u32] = &[1];

const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    /// `d × n_q·head_dim`; absent once stripped.
    pub wq: Option<Matrix>,
    /// `d × n_kv·head_dim`; absent once stripped.
    pub wk: Option<Matrix>,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f32>,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl LayerWeights {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.hidden_size;
        LayerWeights {
            attn_norm: vec![1.0; d],
            wq: Some(Matrix::zeros(d, config.q_dim())),
            wk: Some(Matrix::zeros(d, config.kv_dim())),
            wv: Matrix::zeros(d, config.kv_dim()),
            wo: Matrix::zeros(config.q_dim(), d),
            ffn_norm: vec![1.0; d],
            w_gate: Matrix::zeros(d, config.ffn_size),
            w_up: Matrix::zeros(d, config.ffn_size),
            w_down: Matrix::zeros(config.ffn_size, d),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let d = config.hidden_size;
        if self.attn_norm.len() != d || self.ffn_norm.len() != d {
            return Err(HarpError::contract("norm gain length differs from hidden_size"));
        }
        if let Some(wq) = &self.wq {
            wq.expect_shape((d, config.q_dim()), "W_Q")?;
        }
        if let Some(wk) = &self.wk {
            wk.expect_shape((d, config.kv_dim()), "W_K")?;
        }
        self.wv.expect_shape((d, config.kv_dim()), "W_V")?;
        self.wo.expect_shape((config.q_dim(), d), "W_O")?;
        self.w_gate.expect_shape((d, config.ffn_size), "W_gate")?;
        self.w_up.expect_shape((d, config.ffn_size), "W_up")?;
        self.w_down.expect_shape((config.ffn_size, d), "W_down")?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// `V × d` token embedding table.
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// `V × d` output projection; `None` means tied to `embedding`.
    pub output: Option<Matrix>,
    pub format_version: u32,
    pub seed: Option<u64>,
    /// Layers whose W_Q/W_K were removed by [`strip`].
    pub attention_skipped: Vec<usize>,
}

impl Checkpoint {
    /// An all-zero model with unit norm gains and an untied head.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab_size, config.hidden_size);
        Ok(Checkpoint {
            config: config.clone(),
            embedding: Matrix::zeros(v, d),
            layers: (0..config.num_layers).map(|_| LayerWeights::zeros(config)).collect(),
            final_norm: vec![1.0; d],
            output: Some(Matrix::zeros(v, d)),
            format_version: FORMAT_VERSION,
            seed: None,
            attention_skipped: Vec::new(),
        })
    }

    pub fn output_matrix(&self) -> &Matrix {
        self.output.as_ref().unwrap_or(&self.embedding)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.layers.len() != cfg.num_layers {
            return Err(HarpError::contract(format!(
                "{} layers but config declares {}",
                self.layers.len(),
                cfg.num_layers
            )));
        }
        self.embedding.expect_shape((cfg.vocab_size, cfg.hidden_size), "embedding")?;
        if let Some(out) = &self.output {
            out.expect_shape((cfg.vocab_size, cfg.hidden_size), "output")?;
        }
        if self.final_norm.len() != cfg.hidden_size {
            return Err(HarpError::contract("final norm length differs from hidden_size"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate(cfg)?;
            let stripped = self.attention_skipped.contains(&i);
            if stripped != (layer.wq.is_none() && layer.wk.is_none())
                || layer.wq.is_some() != layer.wk.is_some()
            {
                return Err(HarpError::contract(format!(
                    "layer {i}: Q/K presence disagrees with the attention-skipped list"
                )));
            }
        }
        Ok(())
    }

    /// Number of stored scalar parameters.
    pub fn param_count(&self) -> u64 {
        self.tensors().iter().map(|(_, t)| t.len() as u64).sum()
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out = vec![("embedding".to_string(), TensorRef::Matrix(&self.embedding))];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), TensorRef::Vector(&l.attn_norm)));
            if let Some(wq) = &l.wq {
                out.push((format!("layers.{i}.wq"), TensorRef::Matrix(wq)));
            }
            if let Some(wk) = &l.wk {
                out.push((format!("layers.{i}.wk"), TensorRef::Matrix(wk)));
            }
            out.push((format!("layers.{i}.wv"), TensorRef::Matrix(&l.wv)));
            out.push((format!("layers.{i}.wo"), TensorRef::Matrix(&l.wo)));
            out.push((format!("layers.{i}.ffn_norm"), TensorRef::Vector(&l.ffn_norm)));
            out.push((format!("layers.{i}.w_gate"), TensorRef::Matrix(&l.w_gate)));
            out.push((format!("layers.{i}.w_up"), TensorRef::Matrix(&l.w_up)));
            out.push((format!("layers.{i}.w_down"), TensorRef::Matrix(&l.w_down)));
        }
        out.push(("final_norm".to_string(), TensorRef::Vector(&self.final_norm)));
        if let Some(o) = &self.output {
            out.push(("output".to_string(), TensorRef::Matrix(o)));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let mut table = Vec::with_capacity(tensors.len());
        let mut offset = 0u64;
        for (name, t) in &tensors {
            table.push(TensorEntry {
                name: name.clone(),
                shape: t.shape(),
                offset,
                dtype: "f32".to_string(),
            });
            offset += 4 * t.len() as u64;
        }
        let header = Header {
            format_version: self.format_version,
            config: self.config.clone(),
            seed: self.seed,
            tied_output: self.output.is_none(),
            attention_skipped: self.attention_skipped.clone(),
            tensors: table,
        };
        let header_bytes = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::with_capacity(16 + header_bytes.len() + offset as usize);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header_bytes);
        for (_, t) in &tensors {
            for v in t.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(HarpError::corruption("file shorter than the fixed preamble"));
        }
        if &bytes[..8] != MAGIC {
            return Err(HarpError::corruption("bad magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = 16usize
            .checked_add(usize::try_from(header_len).map_err(|_| HarpError::corruption("header length overflow"))?)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| HarpError::corruption("header extends past end of file"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| HarpError::corruption(format!("unreadable header: {e}")))?;
        if !SUPPORTED_VERSIONS.contains(&header.format_version) {
            return Err(HarpError::VersionMismatch {
                found: header.format_version,
                supported: SUPPORTED_VERSIONS.to_vec(),
            });
        }
        let cfg = header.config;
        cfg.validate().map_err(|e| HarpError::corruption(format!("header config: {e}")))?;
        let mut skipped = header.attention_skipped.clone();
        skipped.sort_unstable();
        skipped.dedup();
        if skipped.len() != header.attention_skipped.len()
            || skipped.iter().any(|&l| l >= cfg.num_layers)
        {
            return Err(HarpError::corruption("invalid attention-skipped layer list"));
        }

        let expected = expected_tensors(&cfg, &skipped, header.tied_output);
        if header.tensors.len() != expected.len() {
            return Err(HarpError::corruption(format!(
                "tensor table has {} entries, config implies {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        let payload = &bytes[header_end..];
        let mut cursor = 0u64;
        let mut values: Vec<Vec<f32>> = Vec::with_capacity(expected.len());
        for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
            if &entry.name != name || &entry.shape != shape {
                return Err(HarpError::corruption(format!(
                    "tensor table mismatch: found {} {:?}, expected {} {:?}",
                    entry.name, entry.shape, name, shape
                )));
            }
            if entry.dtype != "f32" {
                return Err(HarpError::corruption(format!("{}: unsupported dtype {}", name, entry.dtype)));
            }
            if entry.offset != cursor {
                return Err(HarpError::corruption(format!("{name}: non-contiguous offset")));
            }
            let count: usize = shape.iter().product();
            let start = cursor as usize;
            let end = start + 4 * count;
            if end > payload.len() {
                return Err(HarpError::corruption(format!(
                    "payload truncated inside tensor {name} ({} of {} bytes present)",
                    payload.len(),
                    end
                )));
            }
            let data: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(HarpError::corruption(format!("{name}: non-finite value")));
            }
            values.push(data);
            cursor = end as u64;
        }
        if cursor as usize != payload.len() {
            return Err(HarpError::corruption(format!(
                "{} trailing payload bytes",
                payload.len() - cursor as usize
            )));
        }

        let mut it = values.into_iter();
        let mut mat = |r: usize, c: usize| Matrix::from_vec(r, c, it.next().unwrap()).unwrap();
        let (v, d) = (cfg.vocab_size, cfg.hidden_size);
        let embedding = mat(v, d);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let stripped = skipped.contains(&i);
            let attn_norm = mat(1, d).into_vec();
            let wq = (!stripped).then(|| mat(d, cfg.q_dim()));
            let wk = (!stripped).then(|| mat(d, cfg.kv_dim()));
            layers.push(LayerWeights {
                attn_norm,
                wq,
                wk,
                wv: mat(d, cfg.kv_dim()),
                wo: mat(cfg.q_dim(), d),
                ffn_norm: mat(1, d).into_vec(),
                w_gate: mat(d, cfg.ffn_size),
                w_up: mat(d, cfg.ffn_size),
                w_down: mat(cfg.ffn_size, d),
            });
        }
        let final_norm = mat(1, d).into_vec();
        let output = (!header.tied_output).then(|| mat(v, d));
        Ok(Checkpoint {
            config: cfg,
            embedding,
            layers,
            final_norm,
            output,
            format_version: header.format_version,
            seed: header.seed,
            attention_skipped: skipped,
        })
    }
}

enum TensorRef<'a> {
    Matrix(&'a Matrix),
    Vector(&'a [f32]),
}

impl TensorRef<'_> {
    fn shape(&self) -> Vec<usize> {
        match self {
            TensorRef::Matrix(m) => vec![m.rows(), m.cols()],
            TensorRef::Vector(v) => vec![v.len()],
        }
    }

    fn values(&self) -> &[f32] {
        match self {
            TensorRef::Matrix(m) => m.as_slice(),
            TensorRef::Vector(v) => v,
        }
    }

    fn len(&self) -> usize {
        self.values().len()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    seed: Option<u64>,
    tied_output: bool,
    attention_skipped: Vec<usize>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    dtype: String,
}

fn expected_tensors(cfg: &ModelConfig, skipped: &[usize], tied: bool) -> Vec<(String, Vec<usize>)> {
    let (v, d) = (cfg.vocab_size, cfg.hidden_size);
    let mut out = vec![("embedding".to_string(), vec![v, d])];
    for i in 0..cfg.num_layers {
        out.push((format!("layers.{i}.attn_norm"), vec![d]));
        if !skipped.contains(&i) {
            out.push((format!("layers.{i}.wq"), vec![d, cfg.q_dim()]));
            out.push((format!("layers.{i}.wk"), vec![d, cfg.kv_dim()]));
        }
        out.push((format!("layers.{i}.wv"), vec![d, cfg.kv_dim()]));
        out.push((format!("layers.{i}.wo"), vec![cfg.q_dim(), d]));
        out.push((format!("layers.{i}.ffn_norm"), vec![d]));
        out.push((format!("layers.{i}.w_gate"), vec![d, cfg.ffn_size]));
        out.push((format!("layers.{i}.w_up"), vec![d, cfg.ffn_size]));
        out.push((format!("layers.{i}.w_down"), vec![cfg.ffn_size, d]));
    }
    out.push(("final_norm".to_string(), vec![d]));
    if !tied {
        out.push(("output".to_string(), vec![v, d]));
    }
    out
}

/// Draws every weight from a seeded Gaussian (std 0.02, residual-output
/// projections additionally scaled by `1/sqrt(2L)`); norm gains are 1.
pub fn generate_model(config: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Normal::new(0.0f32, INIT_STD).expect("valid std");
    let residual = Normal::new(0.0f32, INIT_STD / (2.0 * config.num_layers as f32).sqrt())
        .expect("valid std");
    let mut draw = |rows: usize, cols: usize, dist: &Normal<f32>| {
        let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    };
    let (v, d) = (config.vocab_size, config.hidden_size);
    let embedding = draw(v, d, &base);
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        let wq = draw(d, config.q_dim(), &base);
        let wk = draw(d, config.kv_dim(), &base);
        let wv = draw(d, config.kv_dim(), &base);
        let wo = draw(config.q_dim(), d, &residual);
        let w_gate = draw(d, config.ffn_size, &base);
        let w_up = draw(d, config.ffn_size, &base);
        let w_down = draw(config.ffn_size, d, &residual);
        layers.push(LayerWeights {
            attn_norm: vec![1.0; d],
            wq: Some(wq),
            wk: Some(wk),
            wv,
            wo,
            ffn_norm: vec![1.0; d],
            w_gate,
            w_up,
            w_down,
        });
    }
    let output = draw(v, d, &base);
    Ok(Checkpoint {
        config: config.clone(),
        embedding,
        layers,
        final_norm: vec![1.0; d],
        output: Some(output),
        format_version: FORMAT_VERSION,
        seed: Some(seed),
        attention_skipped: Vec::new(),
    })
}

pub fn save(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint.to_bytes())?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Parameter accounting for a strip operation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StripReport {
    pub stripped_layers: Vec<usize>,
    pub removed_params: u64,
    pub total_params: u64,
}

impl StripReport {
    /// Removed fraction of the dense parameter count.
    pub fn ratio(&self) -> f64 {
        self.removed_params as f64 / self.total_params as f64
    }
}

/// Shape-only version of [`strip`]'s accounting: no weights required.
pub fn strip_report_for_config(
    config: &ModelConfig,
    layers: &[usize],
    tied_output: bool,
) -> Result<StripReport> {
    config.validate()?;
    if let Some(&bad) = layers.iter().find(|&&l| l >= config.num_layers) {
        return Err(HarpError::contract(format!(
            "layer {bad} out of range for {} layers",
            config.num_layers
        )));
    }
    Ok(StripReport {
        stripped_layers: layers.to_vec(),
        removed_params: layers.len() as u64 * config.qk_params_per_layer(),
        total_params: config.param_count(tied_output),
    })
}

/// Physically removes W_Q and W_K of the pruned layers. Retained tensors are
/// moved unchanged.
pub fn strip(checkpoint: &Checkpoint, spec: &PruneSpec) -> Result<(Checkpoint, StripReport)> {
    let cfg = &checkpoint.config;
    if let Some(&bad) = spec.layers().iter().find(|&&l| l >= cfg.num_layers) {
        return Err(HarpError::contract(format!(
            "layer {bad} out of range for {} layers",
            cfg.num_layers
        )));
    }
    let total_params = checkpoint.param_count();
    let mut out = checkpoint.clone();
    let mut removed = 0u64;
    for &l in spec.layers() {
        let layer = &mut out.layers[l];
        removed += layer.wq.take().map_or(0, |m| m.as_slice().len() as u64);
        removed += layer.wk.take().map_or(0, |m| m.as_slice().len() as u64);
        if !out.attention_skipped.contains(&l) {
            out.attention_skipped.push(l);
        }
    }
    out.attention_skipped.sort_unstable();
    let report = StripReport { stripped_layers: spec.layers().to_vec(), removed_params: removed, total_params };
    Ok((out, report))
}
