//! Binary checkpoints for quantized stacks and their adapters.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "MLRA"  u16 version
//! u32 len, JSON config
//! u32 n_layers, then per layer:
//!     name (u32 len + UTF-8)  rows u32  cols u32  bits u8  group_size u32
//!     packed code words u32[words_needed(rows·cols, bits)]
//!     scales f32[rows·cols/group_size]  zeros f32[same]
//!     bias f32[rows]
//! u32 n_adapters, then per adapter:
//!     name  r u32  alpha f32  A f64[rows·r]  B f64[cols·r]
//! ```
//!
//! Adapter dimensions come from the layer of the same name.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bitpack::{check_bits, words_needed, PackedCodes};
use crate::error::{Error, Result};
use crate::layer::{LoraAdapter, ModuLoraLayer};
use crate::lowprec::MaterializationStrategy;
use crate::quant::{quantizer_by_name, QuantizedMatrix};
use crate::tensor::DenseMatrix;
use crate::train::{Activation, Architecture, DenseStack, ToyModel};

pub const MAGIC: [u8; 4] = *b"MLRA";
pub const VERSION: u16 = 1;
pub const CONFIG_SCHEMA: &str = "modulora.model/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub schema: String,
    pub activation: Activation,
    pub quantizer: String,
    pub strategy: MaterializationStrategy,
    pub bias_trainable: bool,
    /// Free-form provenance such as the seed a model was generated from.
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub model: ToyModel,
}

impl Checkpoint {
    /// Wraps a quantized stack; transformers and dense bases have no slot in the layout.
    pub fn new(model: ToyModel, meta: BTreeMap<String, serde_json::Value>) -> Result<Self> {
        let Architecture::Stack { activation } = model.arch else {
            return Err(Error::config("only layer stacks can be checkpointed"));
        };
        if model.head.is_some() {
            return Err(Error::config(
                "models with a dense head cannot be checkpointed",
            ));
        }
        let mut quantizer = "rtn".to_owned();
        for (i, l) in model.layers.iter().enumerate() {
            match &l.base {
                crate::layer::FrozenWeights::Quantized { quantizer: qz, .. } if i == 0 => {
                    quantizer = qz.name().into()
                }
                crate::layer::FrozenWeights::Quantized { .. } => {}
                crate::layer::FrozenWeights::Dense(_) => {
                    return Err(Error::config(format!(
                        "layer {} has full-precision weights",
                        l.name
                    )));
                }
            }
        }
        let config = ModelConfig {
            schema: CONFIG_SCHEMA.into(),
            activation,
            quantizer,
            strategy: model.strategy().unwrap_or_default(),
            bias_trainable: model.layers.iter().any(|l| l.bias_trainable),
            meta,
        };
        Ok(Self { config, model })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json =
            serde_json::to_vec(&self.config).map_err(|e| Error::Format(format!("config: {e}")))?;
        put_len(&mut out, json.len())?;
        out.extend_from_slice(&json);

        put_len(&mut out, self.model.layers.len())?;
        for l in &self.model.layers {
            let q = l
                .quantized_weights()
                .ok_or_else(|| Error::config(format!("layer {} is not quantized", l.name)))?;
            put_str(&mut out, &l.name)?;
            put_len(&mut out, q.rows())?;
            put_len(&mut out, q.cols())?;
            out.push(q.bits());
            put_len(&mut out, q.group_size())?;
            q.codes()
                .words()
                .iter()
                .for_each(|w| out.extend_from_slice(&w.to_le_bytes()));
            put_f32s(&mut out, q.scales(), &l.name, "scale")?;
            put_f32s(&mut out, q.zeros(), &l.name, "zero")?;
            put_f32s(&mut out, l.bias.as_slice(), &l.name, "bias")?;
        }

        put_len(&mut out, self.model.layers.len())?;
        for l in &self.model.layers {
            put_str(&mut out, &l.name)?;
            put_len(&mut out, l.adapter.rank())?;
            put_f32s(&mut out, &[l.adapter.alpha], &l.name, "alpha")?;
            l.adapter
                .a
                .as_slice()
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            l.adapter
                .b
                .as_slice()
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        parse(bytes).map(|(ck, _)| ck)
    }

    /// Writes the checkpoint; identical models give identical bytes.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// The full-precision stack the checkpoint was quantized from, when the
    /// `model_seed` and `dims` metadata rebuild one of matching shape;
    /// otherwise the dequantized stack stands in.
    pub fn teacher(&self) -> Result<DenseStack> {
        let meta = &self.config.meta;
        if let (Some(seed), Some(dims)) = (
            meta.get("model_seed").and_then(|v| v.as_u64()),
            meta.get("dims"),
        ) {
            let dims: Vec<usize> = serde_json::from_value(dims.clone())
                .map_err(|e| Error::Format(format!("metadata dims: {e}")))?;
            let stack = DenseStack::random(&dims, self.config.activation, seed)?;
            if stack
                .weights
                .iter()
                .map(|w| w.shape())
                .eq(self.model.layer_shapes())
            {
                return Ok(stack);
            }
        }
        if self.model.layers.is_empty() {
            return Err(Error::config("checkpoint has no layers"));
        }
        Ok(DenseStack {
            weights: self.model.layers.iter().map(|l| l.base_weights()).collect(),
            biases: self
                .model
                .layers
                .iter()
                .map(|l| l.bias.as_slice().to_vec())
                .collect(),
            activation: self.config.activation,
        })
    }
}

/// Byte offset where the adapter section starts.
pub fn adapter_section_offset(bytes: &[u8]) -> Result<usize> {
    parse(bytes).map(|(_, off)| off)
}

/// SHA-256 of a byte string, hex encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    crate::train::hex(&Sha256::digest(bytes))
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n)
        .map_err(|_| Error::Range(format!("{n} does not fit the u32 length field")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_len(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f64], layer: &str, what: &str) -> Result<()> {
    for &v in vals {
        let f = v as f32;
        if f as f64 != v && !v.is_nan() {
            return Err(Error::Range(format!(
                "layer {layer}: {what} {v} has no exact f32 representation"
            )));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice of length N"))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    /// Checked `count × width` so a corrupt count cannot overflow.
    fn sized(&mut self, count: usize, width: usize) -> Result<&'a [u8]> {
        let n = count.checked_mul(width).ok_or_else(|| {
            Error::Format(format!(
                "element count {count} at offset {} overflows",
                self.pos
            ))
        })?;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format(format!("invalid UTF-8 name at offset {at}")))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f64>> {
        Ok(self
            .sized(count, 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        Ok(self
            .sized(count, 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn parse(bytes: &[u8]) -> Result<(Checkpoint, usize)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.array()?;
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = u16::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let n = r.u32()?;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::Format(format!("config JSON: {e}")))?;
    if config.schema != CONFIG_SCHEMA {
        return Err(Error::Format(format!(
            "unknown config schema {:?}",
            config.schema
        )));
    }
    let quantizer = quantizer_by_name(&config.quantizer)?;

    let n_layers = r.u32()?;
    let mut parts = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let at = r.pos;
        let name = r.string()?;
        let rows = r.u32()?;
        let cols = r.u32()?;
        let bits = r.array::<1>()?[0];
        check_bits(bits).map_err(|e| Error::config(format!("layer {name} at offset {at}: {e}")))?;
        let group_size = r.u32()?;
        if group_size == 0 || cols % group_size != 0 {
            return Err(Error::config(format!(
                "layer {name}: group size {group_size} does not divide {cols} columns"
            )));
        }
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format(format!("layer {name}: {rows}x{cols} overflows")))?;
        let words = r
            .sized(words_needed(count, bits), 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let groups = rows * (cols / group_size);
        let scales = r.f32s(groups)?;
        let zeros = r.f32s(groups)?;
        let bias = r.f32s(rows)?;
        let codes = PackedCodes::from_words(bits, count, words)?;
        let q = QuantizedMatrix::new(rows, cols, group_size, codes, scales, zeros)?;
        parts.push((name, q, bias));
    }

    let adapter_offset = r.pos;
    let n_adapters = r.u32()?;
    if n_adapters != n_layers {
        return Err(Error::Format(format!(
            "{n_adapters} adapter records for {n_layers} layers"
        )));
    }
    let mut layers = Vec::with_capacity(parts.len());
    for (name, q, bias) in parts {
        let at = r.pos;
        let adapter_name = r.string()?;
        if adapter_name != name {
            return Err(Error::Format(format!(
                "adapter {adapter_name:?} at offset {at} does not follow layer {name:?}"
            )));
        }
        let rank = r.u32()?;
        let alpha = r.f32s(1)?[0];
        let a = DenseMatrix::new(q.rows(), rank, r.f64s(q.rows().saturating_mul(rank))?)?;
        let b = DenseMatrix::new(q.cols(), rank, r.f64s(q.cols().saturating_mul(rank))?)?;
        let adapter = LoraAdapter::from_parts(a, b, alpha)?;
        let mut layer = ModuLoraLayer::quantized(name, q, adapter, bias)?
            .with_quantizer(Arc::clone(&quantizer));
        layer.set_strategy(config.strategy);
        layer.bias_trainable = config.bias_trainable;
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after offset {}",
            bytes.len() - r.pos,
            r.pos
        )));
    }
    let model = ToyModel::stack(layers, config.activation)?;
    Ok((Checkpoint { config, model }, adapter_offset))
}
