//! Toy models built from [`ModuLoraLayer`]s.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::task::{Targets, PARITY_VOCAB};
use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::layer::{FrozenWeights, LoraAdapter, ModuLoraLayer};
use crate::lowprec::{LedgerHandle, MaterializationStrategy};
use crate::quant::{QuantConfig, Quantizer};
use crate::tensor::DenseMatrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Gelu,
    Identity,
}

impl Activation {
    fn apply_dense(self, m: &DenseMatrix) -> DenseMatrix {
        match self {
            Activation::Tanh => m.map(f64::tanh),
            Activation::Relu => m.map(|v| v.max(0.0)),
            Activation::Gelu => {
                let mut t = Tape::new();
                let x = t.constant(m.clone());
                let y = t.gelu(x);
                t.value(y).clone()
            }
            Activation::Identity => m.clone(),
        }
    }

    fn apply(self, tape: &mut Tape, x: VarId) -> VarId {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
            Activation::Identity => x,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "identity" | "none" => Ok(Activation::Identity),
            other => Err(Error::config(format!("unknown activation {other:?}"))),
        }
    }
}

fn snap_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// A full-precision stack of linear layers standing in for a pretrained model.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseStack {
    /// Layer `i` maps `dims[i]` to `dims[i+1]`; stored `d_out × d_in`.
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
}

/// Adapter hyperparameters applied to every quantized linear.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
    pub bias_trainable: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 32.0,
            seed: 0,
            bias_trainable: false,
        }
    }
}

impl AdapterConfig {
    fn adapter_for(&self, layer: usize, d_in: usize, d_out: usize) -> Result<LoraAdapter> {
        LoraAdapter::init(
            d_in,
            d_out,
            self.rank,
            self.alpha,
            self.seed.wrapping_add(layer as u64),
        )
    }
}

impl DenseStack {
    /// Seeded random stack: weights `N(0, 1/d_in)`, biases `N(0, 0.1²)` rounded to `f32`.
    pub fn random(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::config(format!(
                "model dims {dims:?} need at least two positive entries"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in dims.windows(2) {
            let (d_in, d_out) = (pair[0], pair[1]);
            weights.push(DenseMatrix::randn(
                d_out,
                d_in,
                1.0 / (d_in as f64).sqrt(),
                &mut rng,
            ));
            biases.push(
                DenseMatrix::randn(1, d_out, 0.1, &mut rng)
                    .into_vec()
                    .into_iter()
                    .map(snap_f32)
                    .collect(),
            );
        }
        Ok(Self {
            weights,
            biases,
            activation,
        })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.weights[0].cols()];
        d.extend(self.weights.iter().map(|w| w.rows()));
        d
    }

    /// Plain forward pass; the activation is applied between layers only.
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.layer_inputs(x)?.pop().expect("at least one layer"))
    }

    /// Inputs to each layer followed by the final output (`len = layers + 1`).
    pub fn layer_inputs(&self, x: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
        let mut acts = vec![x.clone()];
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut h = acts[i].matmul_t(w)?.add_row_broadcast(&DenseMatrix::new(
                1,
                b.len(),
                b.clone(),
            )?)?;
            if i + 1 < self.weights.len() {
                h = self.activation.apply_dense(&h);
            }
            acts.push(h);
        }
        Ok(acts)
    }

    /// Quantizes every layer and attaches fresh adapters.
    ///
    /// With calibration inputs, layer `i` is calibrated on the activations the
    /// full-precision stack feeds it.
    pub fn quantize(
        &self,
        quantizer: Arc<dyn Quantizer>,
        cfg: &QuantConfig,
        calib: Option<&DenseMatrix>,
        adapters: &AdapterConfig,
        strategy: MaterializationStrategy,
    ) -> Result<ToyModel> {
        let calib_inputs = calib.map(|c| self.layer_inputs(c)).transpose()?;
        let mut layers = Vec::with_capacity(self.weights.len());
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let q = quantizer.quantize(w, calib_inputs.as_ref().map(|c| &c[i]), cfg)?;
            let adapter = adapters.adapter_for(i, w.cols(), w.rows())?;
            let mut layer = ModuLoraLayer::quantized(format!("layer{i}"), q, adapter, b.clone())?
                .with_quantizer(Arc::clone(&quantizer));
            layer.set_strategy(strategy);
            layer.bias_trainable = adapters.bias_trainable;
            layers.push(layer);
        }
        ToyModel::stack(layers, self.activation)
    }

    /// Same architecture with dense frozen weights: the plain LoRA reference.
    pub fn lora_reference(&self, adapters: &AdapterConfig) -> Result<ToyModel> {
        let mut layers = Vec::with_capacity(self.weights.len());
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let adapter = adapters.adapter_for(i, w.cols(), w.rows())?;
            let mut layer =
                ModuLoraLayer::dense(format!("layer{i}"), w.clone(), adapter, b.clone())?;
            layer.bias_trainable = adapters.bias_trainable;
            layers.push(layer);
        }
        ToyModel::stack(layers, self.activation)
    }
}

/// Trainable full-precision classifier/regressor on top of the body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseHead {
    /// `classes × d`.
    pub w: DenseMatrix,
    /// `1 × classes`.
    pub b: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerSpec {
    pub seq_len: usize,
    pub vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Frozen token embedding, `vocab × d_model`.
    pub embed: DenseMatrix,
    /// Frozen positional embedding, `seq_len × d_model`.
    pub pos: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Architecture {
    /// Linear layers with an activation between consecutive layers.
    Stack { activation: Activation },
    /// One pre-norm block: single-head attention (q, k, v, o) and a GeLU MLP (up, down).
    Transformer(TransformerSpec),
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    pub arch: Architecture,
    pub layers: Vec<ModuLoraLayer>,
    pub head: Option<DenseHead>,
}

const ATTN_MASK: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

impl ToyModel {
    pub fn stack(layers: Vec<ModuLoraLayer>, activation: Activation) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::dim(format!(
                    "{} outputs {} features but {} expects {}",
                    pair[0].name,
                    pair[0].d_out(),
                    pair[1].name,
                    pair[1].d_in()
                )));
            }
        }
        Ok(Self {
            arch: Architecture::Stack { activation },
            layers,
            head: None,
        })
    }

    /// One-block transformer over one-hot token sequences with a 2-class head.
    ///
    /// Base projections are random `N(0, 1/d_in)` weights quantized by
    /// `quantizer`; embeddings are frozen and full precision.
    pub fn tiny_transformer(
        seq_len: usize,
        d_model: usize,
        d_ff: usize,
        quantizer: Arc<dyn Quantizer>,
        cfg: &QuantConfig,
        adapters: &AdapterConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = DenseMatrix::randn(PARITY_VOCAB, d_model, 1.0, &mut rng);
        let pos = DenseMatrix::randn(seq_len, d_model, 1.0, &mut rng);
        let shapes = [
            ("attn.q", d_model, d_model),
            ("attn.k", d_model, d_model),
            ("attn.v", d_model, d_model),
            ("attn.o", d_model, d_model),
            ("mlp.up", d_ff, d_model),
            ("mlp.down", d_model, d_ff),
        ];
        let mut layers = Vec::new();
        for (i, (name, d_out, d_in)) in shapes.into_iter().enumerate() {
            let w = DenseMatrix::randn(d_out, d_in, 1.0 / (d_in as f64).sqrt(), &mut rng);
            let q = quantizer.quantize(&w, None, cfg)?;
            let adapter = adapters.adapter_for(i, d_in, d_out)?;
            let mut layer = ModuLoraLayer::quantized(name, q, adapter, vec![0.0; d_out])?
                .with_quantizer(Arc::clone(&quantizer));
            layer.bias_trainable = adapters.bias_trainable;
            layers.push(layer);
        }
        let head = DenseHead {
            w: DenseMatrix::randn(2, d_model, 1.0 / (d_model as f64).sqrt(), &mut rng),
            b: DenseMatrix::zeros(1, 2),
        };
        Ok(Self {
            arch: Architecture::Transformer(TransformerSpec {
                seq_len,
                vocab: PARITY_VOCAB,
                d_model,
                d_ff,
                embed,
                pos,
            }),
            layers,
            head: Some(head),
        })
    }

    pub fn input_dim(&self) -> usize {
        match &self.arch {
            Architecture::Stack { .. } => self.layers[0].d_in(),
            Architecture::Transformer(t) => t.seq_len * t.vocab,
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.head {
            Some(h) => h.w.rows(),
            None => self.layers.last().map_or(0, |l| l.d_out()),
        }
    }

    /// `(d_out, d_in)` of every quantized linear.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.d_out(), l.d_in())).collect()
    }

    pub fn set_strategy(&mut self, strategy: MaterializationStrategy) {
        self.layers
            .iter_mut()
            .for_each(|l| l.set_strategy(strategy));
    }

    /// Strategy of the first quantized layer, if any.
    pub fn strategy(&self) -> Option<MaterializationStrategy> {
        self.layers.iter().find_map(|l| match &l.base {
            FrozenWeights::Quantized { strategy, .. } => Some(*strategy),
            FrozenWeights::Dense(_) => None,
        })
    }

    /// Copy with every adapter's `A` zeroed, so each adapter is an exact no-op.
    pub fn without_adapters(&self) -> Self {
        let mut m = self.clone();
        for l in &mut m.layers {
            l.adapter.a = DenseMatrix::zeros(l.adapter.a.rows(), l.adapter.a.cols());
        }
        m
    }

    /// Hash of everything that must never change during finetuning.
    pub fn frozen_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for l in &self.layers {
            l.hash_frozen_into(&mut h);
        }
        if let Architecture::Transformer(t) = &self.arch {
            for v in t.embed.as_slice().iter().chain(t.pos.as_slice()) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Records the model on `tape`; returns predictions (stack) or logits (transformer).
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &DenseMatrix,
        ledger: &LedgerHandle,
    ) -> Result<VarId> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim(format!(
                "model expects {} input features, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let body = match &self.arch {
            Architecture::Stack { activation } => {
                let mut h = tape.constant(x.clone());
                for (i, layer) in self.layers.iter().enumerate() {
                    h = layer.forward(tape, h, ledger)?.output;
                    if i + 1 < self.layers.len() {
                        h = activation.apply(tape, h);
                    }
                }
                h
            }
            Architecture::Transformer(spec) => self.transformer_body(tape, x, spec, ledger)?,
        };
        match &self.head {
            None => Ok(body),
            Some(head) => {
                let w = tape.param("head.W", head.w.clone(), true);
                let b = tape.param("head.b", head.b.clone(), true);
                let wt = tape.transpose(w);
                let logits = tape.matmul(body, wt)?;
                tape.add_bias(logits, b)
            }
        }
    }

    fn transformer_body(
        &self,
        tape: &mut Tape,
        x: &DenseMatrix,
        spec: &TransformerSpec,
        ledger: &LedgerHandle,
    ) -> Result<VarId> {
        let (m, t, d) = (x.rows(), spec.seq_len, spec.d_model);
        let tokens = DenseMatrix::new(m * t, spec.vocab, x.as_slice().to_vec())?;
        let mut h0 = tokens.matmul(&spec.embed)?;
        for r in 0..m * t {
            for (v, p) in h0.row_mut(r).iter_mut().zip(spec.pos.row(r % t)) {
                *v += p;
            }
        }
        let mask = DenseMatrix::from_fn(
            m * t,
            m * t,
            |i, j| if i / t == j / t { 0.0 } else { ATTN_MASK },
        );
        let pool = DenseMatrix::from_fn(
            m,
            m * t,
            |i, j| if j / t == i { 1.0 / t as f64 } else { 0.0 },
        );
        let [lq, lk, lv, lo, up, down] = &self.layers[..] else {
            return Err(Error::Contract(format!(
                "transformer needs 6 linears, has {}",
                self.layers.len()
            )));
        };

        let h = tape.constant(h0);
        let n1 = tape.layer_norm(h, LN_EPS);
        let q = lq.forward(tape, n1, ledger)?.output;
        let k = lk.forward(tape, n1, ledger)?.output;
        let v = lv.forward(tape, n1, ledger)?.output;
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let mask = tape.constant(mask);
        let scores = tape.add(scores, mask)?;
        let attn = tape.softmax(scores);
        let mixed = tape.matmul(attn, v)?;
        let o = lo.forward(tape, mixed, ledger)?.output;
        let h1 = tape.add(h, o)?;
        let n2 = tape.layer_norm(h1, LN_EPS);
        let u = up.forward(tape, n2, ledger)?.output;
        let u = tape.gelu(u);
        let dn = down.forward(tape, u, ledger)?.output;
        let h2 = tape.add(h1, dn)?;
        let pool = tape.constant(pool);
        tape.matmul(pool, h2)
    }

    /// Scalar training loss: mean-squared error or cross-entropy.
    pub fn loss(
        &self,
        tape: &mut Tape,
        x: &DenseMatrix,
        targets: &Targets,
        ledger: &LedgerHandle,
    ) -> Result<VarId> {
        let out = self.forward(tape, x, ledger)?;
        match targets {
            Targets::Regression(y) => tape.mse(out, y),
            Targets::Classes(c) => tape.cross_entropy(out, c),
        }
    }

    /// Names of trainable parameters, in a fixed order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in &self.layers {
            names.push(l.param_name("A"));
            names.push(l.param_name("B"));
            if l.bias_trainable {
                names.push(l.param_name("bias"));
            }
        }
        if self.head.is_some() {
            names.push("head.W".into());
            names.push("head.b".into());
        }
        names
    }

    /// Mutable access to a trainable parameter by name.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut DenseMatrix> {
        if let Some(head) = &mut self.head {
            match name {
                "head.W" => return Some(&mut head.w),
                "head.b" => return Some(&mut head.b),
                _ => {}
            }
        }
        let (layer, which) = name.rsplit_once('.')?;
        let l = self.layers.iter_mut().find(|l| l.name == layer)?;
        match which {
            "A" => Some(&mut l.adapter.a),
            "B" => Some(&mut l.adapter.b),
            "bias" if l.bias_trainable => Some(&mut l.bias),
            _ => None,
        }
    }
}
