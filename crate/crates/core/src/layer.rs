//! Linear layers with a frozen base and a trainable low-rank adapter.
//!
//! Forward computes `x·Ŵᵀ + (α/r)·(x·B)·Aᵀ + b`. The base term goes through
//! [`LpLinear`] when the weights are quantized, so the tape never holds a
//! dequantized copy; the adapter term is ordinary dense tape ops, which is
//! how gradients reach `A` and `B`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::lowprec::{LedgerHandle, LpContext, LpLinear, MaterializationStrategy};
use crate::quant::{quantize_rtn, QuantizedMatrix, Quantizer, Rtn};
use crate::tensor::DenseMatrix;

/// Standard deviation of the Gaussian used for `B` at initialization.
pub const ADAPTER_INIT_STD: f64 = 0.02;

/// Trainable factors with `ΔW = (α/r)·A·Bᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// `d_out × r`, zero at initialization.
    pub a: DenseMatrix,
    /// `d_in × r`, small Gaussian at initialization.
    pub b: DenseMatrix,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn init(d_in: usize, d_out: usize, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::config("adapter rank must be at least 1"));
        }
        if !alpha.is_finite() {
            return Err(Error::config(format!(
                "adapter alpha must be finite, got {alpha}"
            )));
        }
        if rank > d_in.min(d_out) / 2 {
            log::warn!("adapter rank {rank} is large relative to a {d_out}x{d_in} layer");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            a: DenseMatrix::zeros(d_out, rank),
            b: DenseMatrix::randn(d_in, rank, ADAPTER_INIT_STD, &mut rng),
            alpha,
        })
    }

    /// Rebuilds an adapter from stored factors.
    pub fn from_parts(a: DenseMatrix, b: DenseMatrix, alpha: f64) -> Result<Self> {
        if a.cols() != b.cols() || a.cols() == 0 {
            return Err(Error::dim(format!(
                "adapter factors of rank {} and {}",
                a.cols(),
                b.cols()
            )));
        }
        Ok(Self { a, b, alpha })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    /// Multiplier `α/r` applied to the adapter path.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// Dense `(α/r)·A·Bᵀ`, shape `d_out × d_in`.
    pub fn delta(&self) -> DenseMatrix {
        self.a
            .matmul_t(&self.b)
            .expect("factor ranks match")
            .scale(self.scaling())
    }
}

/// The frozen part of a layer.
#[derive(Clone)]
pub enum FrozenWeights {
    Quantized {
        q: Arc<QuantizedMatrix>,
        quantizer: Arc<dyn Quantizer>,
        strategy: MaterializationStrategy,
    },
    /// Full-precision base, used as the plain LoRA reference.
    Dense(Arc<DenseMatrix>),
}

impl std::fmt::Debug for FrozenWeights {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FrozenWeights::Quantized {
                q,
                quantizer,
                strategy,
            } => f
                .debug_struct("Quantized")
                .field("shape", &q.shape())
                .field("bits", &q.bits())
                .field("quantizer", &quantizer.name())
                .field("strategy", strategy)
                .finish(),
            FrozenWeights::Dense(w) => f.debug_tuple("Dense").field(&w.shape()).finish(),
        }
    }
}

impl FrozenWeights {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            FrozenWeights::Quantized { q, .. } => q.shape(),
            FrozenWeights::Dense(w) => w.shape(),
        }
    }
}

/// Tape handles produced by one [`ModuLoraLayer::forward`].
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub a: VarId,
    pub b: VarId,
    pub bias: VarId,
    pub output: VarId,
}

#[derive(Clone, Debug)]
pub struct ModuLoraLayer {
    pub name: String,
    pub base: FrozenWeights,
    pub adapter: LoraAdapter,
    /// `1 × d_out`.
    pub bias: DenseMatrix,
    pub bias_trainable: bool,
}

impl ModuLoraLayer {
    pub fn quantized(
        name: impl Into<String>,
        q: QuantizedMatrix,
        adapter: LoraAdapter,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let base = FrozenWeights::Quantized {
            q: Arc::new(q),
            quantizer: Arc::new(Rtn),
            strategy: MaterializationStrategy::default(),
        };
        Self::with_base(name, base, adapter, bias)
    }

    pub fn dense(
        name: impl Into<String>,
        w: DenseMatrix,
        adapter: LoraAdapter,
        bias: Vec<f64>,
    ) -> Result<Self> {
        Self::with_base(name, FrozenWeights::Dense(Arc::new(w)), adapter, bias)
    }

    pub fn with_base(
        name: impl Into<String>,
        base: FrozenWeights,
        adapter: LoraAdapter,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let name = name.into();
        let (d_out, d_in) = base.shape();
        if adapter.a.rows() != d_out
            || adapter.b.rows() != d_in
            || adapter.a.cols() != adapter.b.cols()
        {
            return Err(Error::dim(format!(
                "layer {name}: adapter A {:?}, B {:?} do not fit a {d_out}x{d_in} weight",
                adapter.a.shape(),
                adapter.b.shape()
            )));
        }
        if bias.len() != d_out {
            return Err(Error::dim(format!(
                "layer {name}: bias of {} for {d_out} outputs",
                bias.len()
            )));
        }
        Ok(Self {
            name,
            base,
            adapter,
            bias: DenseMatrix::new(1, d_out, bias)?,
            bias_trainable: false,
        })
    }

    /// Sets the quantizer whose product routine backs the matvec strategy.
    pub fn with_quantizer(mut self, quantizer: Arc<dyn Quantizer>) -> Self {
        if let FrozenWeights::Quantized {
            quantizer: slot, ..
        } = &mut self.base
        {
            *slot = quantizer;
        }
        self
    }

    pub fn set_strategy(&mut self, strategy: MaterializationStrategy) {
        if let FrozenWeights::Quantized { strategy: slot, .. } = &mut self.base {
            *slot = strategy;
        }
    }

    pub fn d_in(&self) -> usize {
        self.base.shape().1
    }

    pub fn d_out(&self) -> usize {
        self.base.shape().0
    }

    pub fn quantized_weights(&self) -> Option<&QuantizedMatrix> {
        match &self.base {
            FrozenWeights::Quantized { q, .. } => Some(q),
            FrozenWeights::Dense(_) => None,
        }
    }

    /// High-precision view of the frozen weights (allocates).
    pub fn base_weights(&self) -> DenseMatrix {
        match &self.base {
            FrozenWeights::Quantized { q, .. } => q.dequantize(),
            FrozenWeights::Dense(w) => (**w).clone(),
        }
    }

    pub fn param_name(&self, which: &str) -> String {
        format!("{}.{which}", self.name)
    }

    /// Records the layer on `tape` and returns the handles it created.
    pub fn forward(&self, tape: &mut Tape, x: VarId, ledger: &LedgerHandle) -> Result<LayerVars> {
        let x_cols = tape.value(x).cols();
        if x_cols != self.d_in() {
            return Err(Error::dim(format!(
                "layer {}: input has {x_cols} features, expects {}",
                self.name,
                self.d_in()
            )));
        }
        let a = tape.param(self.param_name("A"), self.adapter.a.clone(), true);
        let b = tape.param(self.param_name("B"), self.adapter.b.clone(), true);
        let bias = tape.param(
            self.param_name("bias"),
            self.bias.clone(),
            self.bias_trainable,
        );

        let base = match &self.base {
            FrozenWeights::Quantized {
                q,
                quantizer,
                strategy,
            } => {
                let ctx = LpContext {
                    layer: self.name.clone(),
                    strategy: *strategy,
                    quantizer: Arc::clone(quantizer),
                    ledger: ledger.clone(),
                };
                tape.apply_custom(
                    LpLinear {
                        ctx,
                        q: Arc::clone(q),
                    },
                    &[x],
                )?
            }
            FrozenWeights::Dense(w) => {
                let w = tape.constant((**w).clone());
                let wt = tape.transpose(w);
                tape.matmul(x, wt)?
            }
        };
        let xb = tape.matmul(x, b)?;
        let at = tape.transpose(a);
        let low_rank = tape.matmul(xb, at)?;
        let low_rank = tape.scale(low_rank, self.adapter.scaling());
        let sum = tape.add(base, low_rank)?;
        let output = tape.add_bias(sum, bias)?;
        Ok(LayerVars { a, b, bias, output })
    }

    /// `(dL/dA, dL/dB)` after [`Tape::backward`] has run on a graph containing this layer.
    pub fn adapter_grads<'t>(&self, tape: &'t Tape) -> Result<(&'t DenseMatrix, &'t DenseMatrix)> {
        let get = |which: &str| {
            tape.grad_by_name(&self.param_name(which)).ok_or_else(|| {
                Error::Contract(format!(
                    "no gradient for {}; run backward first",
                    self.param_name(which)
                ))
            })
        };
        Ok((get("A")?, get("B")?))
    }

    /// SHA-256 of the frozen state: quantized codes, scales, zeros and bias.
    pub fn frozen_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        self.hash_frozen_into(&mut h);
        h.finalize().into()
    }

    pub(crate) fn hash_frozen_into(&self, h: &mut Sha256) {
        h.update(self.name.as_bytes());
        match &self.base {
            FrozenWeights::Quantized { q, .. } => q.hash_into(h),
            FrozenWeights::Dense(w) => w
                .as_slice()
                .iter()
                .for_each(|v| h.update(v.to_bits().to_le_bytes())),
        }
        if !self.bias_trainable {
            self.bias
                .as_slice()
                .iter()
                .for_each(|v| h.update(v.to_bits().to_le_bytes()));
        }
    }

    /// Explains why the adapter cannot be folded into the quantized weights,
    /// and prices the lossy alternative of re-quantizing `Ŵ + (α/r)·A·Bᵀ`.
    pub fn merge_check(&self) -> Result<MergeReport> {
        let FrozenWeights::Quantized { q, .. } = &self.base else {
            return Ok(MergeReport {
                exact_merge_possible: true,
                reason: "base weights are full precision; W + (α/r)·A·Bᵀ is exact".into(),
                lossy_merge: None,
            });
        };
        let merged = q.dequantize().add(&self.adapter.delta())?;
        let requantized = quantize_rtn(&merged, q.bits(), Some(q.group_size()))?;
        let residual = merged.sub(&requantized.dequantize())?;
        Ok(MergeReport {
            exact_merge_possible: false,
            reason: format!(
                "base weights are stored as {}-bit codes on a fixed grid; adding the dense adapter \
                 product moves them off that grid, so the sum has no exact {}-bit representation",
                q.bits(),
                q.bits()
            ),
            lossy_merge: Some(LossyMerge {
                quantizer: "rtn".into(),
                codes_unchanged: requantized.codes() == q.codes(),
                error_estimate: residual.frobenius_sq().sqrt(),
                max_abs_error: residual.max_abs(),
            }),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub exact_merge_possible: bool,
    pub reason: String,
    pub lossy_merge: Option<LossyMerge>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossyMerge {
    pub quantizer: String,
    /// Whether re-quantization reproduced the original codes.
    pub codes_unchanged: bool,
    /// Frobenius norm of the merged weights minus their re-quantization.
    pub error_estimate: f64,
    pub max_abs_error: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitpack::PackedCodes;
    use crate::lowprec::{lp_forward, relative_error};
    use crate::tensor::finite_diff_grad;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_layer(seed: u64, d_in: usize, d_out: usize, rank: usize, bits: u8) -> ModuLoraLayer {
        let mut r = rng(seed);
        let w = DenseMatrix::randn(d_out, d_in, 1.0, &mut r);
        let q = quantize_rtn(&w, bits, None).unwrap();
        let mut adapter = LoraAdapter::init(d_in, d_out, rank, 2.0 * rank as f64, seed).unwrap();
        adapter.a = DenseMatrix::randn(d_out, rank, 0.5, &mut r);
        adapter.b = DenseMatrix::randn(d_in, rank, 0.5, &mut r);
        let bias = DenseMatrix::randn(1, d_out, 1.0, &mut r).into_vec();
        ModuLoraLayer::quantized("layer", q, adapter, bias).unwrap()
    }

    #[test]
    fn init_is_a_no_op() {
        for (d_in, d_out, r, seed) in [(4, 6, 1, 0), (16, 8, 4, 7), (3, 3, 2, 9)] {
            let a = LoraAdapter::init(d_in, d_out, r, 16.0, seed).unwrap();
            assert_eq!(a.delta(), DenseMatrix::zeros(d_out, d_in));
            assert_eq!(a.rank(), r);
        }
        assert!(LoraAdapter::init(4, 4, 0, 1.0, 0).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = LoraAdapter::init(8, 8, 2, 1.0, 42).unwrap();
        let b = LoraAdapter::init(8, 8, 2, 1.0, 42).unwrap();
        let c = LoraAdapter::init(8, 8, 2, 1.0, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.b, c.b);
    }

    #[test]
    fn fresh_adapter_output_is_base_plus_bias() {
        let mut r = rng(1);
        let q = quantize_rtn(&DenseMatrix::randn(5, 4, 1.0, &mut r), 4, None).unwrap();
        let adapter = LoraAdapter::init(4, 5, 2, 8.0, 3).unwrap();
        let bias = vec![0.5, -1.0, 0.0, 2.0, 0.25];
        let layer = ModuLoraLayer::quantized("l", q.clone(), adapter, bias.clone()).unwrap();
        let xv = DenseMatrix::randn(3, 4, 1.0, &mut r);
        let mut tape = Tape::new();
        let x = tape.constant(xv.clone());
        let ledger = LedgerHandle::new();
        let vars = layer.forward(&mut tape, x, &ledger).unwrap();
        let ctx = LpContext {
            layer: "ref".into(),
            strategy: MaterializationStrategy::WeightMaterialize,
            quantizer: Arc::new(Rtn),
            ledger: LedgerHandle::new(),
        };
        let want = lp_forward(&ctx, &xv, &q)
            .unwrap()
            .add_row_broadcast(&DenseMatrix::new(1, 5, bias).unwrap())
            .unwrap();
        assert_eq!(tape.value(vars.output), &want);
    }

    #[test]
    fn zero_base_leaves_adapter_path() {
        let codes = PackedCodes::pack(&[0; 12], 4).unwrap();
        let q = QuantizedMatrix::new(3, 4, 4, codes, vec![1.0; 3], vec![0.0; 3]).unwrap();
        let mut r = rng(2);
        let mut adapter = LoraAdapter::init(4, 3, 2, 4.0, 0).unwrap();
        adapter.a = DenseMatrix::randn(3, 2, 1.0, &mut r);
        let layer = ModuLoraLayer::quantized("l", q, adapter.clone(), vec![0.0; 3]).unwrap();
        let xv = DenseMatrix::randn(2, 4, 1.0, &mut r);
        let mut tape = Tape::new();
        let x = tape.constant(xv.clone());
        let out = layer
            .forward(&mut tape, x, &LedgerHandle::new())
            .unwrap()
            .output;
        let want = xv
            .matmul(&adapter.b)
            .unwrap()
            .matmul_t(&adapter.a)
            .unwrap()
            .scale(2.0);
        assert!(relative_error(tape.value(out), &want) < 1e-15);
    }

    #[test]
    fn forward_matches_dense_oracle() {
        for seed in 0..10 {
            let layer = random_layer(seed, 6, 5, 2, [2, 3, 4, 8][seed as usize % 4]);
            let xv = DenseMatrix::randn(3, 6, 1.0, &mut rng(100 + seed));
            let mut tape = Tape::new();
            let x = tape.constant(xv.clone());
            let out = layer
                .forward(&mut tape, x, &LedgerHandle::new())
                .unwrap()
                .output;
            let w_eff = layer.base_weights().add(&layer.adapter.delta()).unwrap();
            let want = xv
                .matmul_t(&w_eff)
                .unwrap()
                .add_row_broadcast(&layer.bias)
                .unwrap();
            assert!(relative_error(tape.value(out), &want) <= 1e-10);
        }
    }

    fn loss_with(layer: &ModuLoraLayer, xv: &DenseMatrix, up: &DenseMatrix) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(xv.clone());
        let out = layer
            .forward(&mut tape, x, &LedgerHandle::new())
            .unwrap()
            .output;
        tape.value(out).hadamard(up).unwrap().sum()
    }

    #[test]
    fn adapter_grads_closed_form_and_fd() {
        let layer = random_layer(3, 5, 4, 2, 4);
        let mut r = rng(4);
        let xv = DenseMatrix::randn(3, 5, 1.0, &mut r);
        let upstream = DenseMatrix::randn(3, 4, 1.0, &mut r);
        let mut tape = Tape::new();
        let x = tape.constant(xv.clone());
        let out = layer
            .forward(&mut tape, x, &LedgerHandle::new())
            .unwrap()
            .output;
        // L = trace(out·upstreamᵀ) = sum(out ⊙ upstream)
        let ut = tape.constant(upstream.transpose());
        let proj = tape.matmul(out, ut).unwrap();
        let loss = trace_var(&mut tape, proj);
        tape.backward(loss).unwrap();
        let (ga, gb) = layer.adapter_grads(&tape).unwrap();

        let s = layer.adapter.scaling();
        let xb = xv.matmul(&layer.adapter.b).unwrap();
        let want_a = upstream.transpose().matmul(&xb).unwrap().scale(s);
        let want_b = xv
            .transpose()
            .matmul(&upstream)
            .unwrap()
            .matmul(&layer.adapter.a)
            .unwrap()
            .scale(s);
        assert!(relative_error(ga, &want_a) < 1e-12);
        assert!(relative_error(gb, &want_b) < 1e-12);

        let fd_a = finite_diff_grad(
            |a| {
                let mut l = layer.clone();
                l.adapter.a = a.clone();
                Ok(loss_with(&l, &xv, &upstream))
            },
            &layer.adapter.a,
            1e-5,
        )
        .unwrap();
        assert!(relative_error(ga, &fd_a) <= 1e-4);
    }

    /// Trace of a square matrix, as a custom tape function.
    fn trace_var(tape: &mut Tape, v: VarId) -> VarId {
        struct Trace;
        impl crate::autodiff::CustomFunction for Trace {
            type Context = usize;
            fn forward(&self, i: &[&DenseMatrix]) -> Result<(DenseMatrix, usize)> {
                let n = i[0].rows();
                Ok((
                    DenseMatrix::filled(1, 1, (0..n).map(|k| i[0].get(k, k)).sum()),
                    n,
                ))
            }
            fn backward(&self, n: &usize, g: &DenseMatrix) -> Result<Vec<Option<DenseMatrix>>> {
                Ok(vec![Some(DenseMatrix::identity(*n).scale(g.get(0, 0)))])
            }
        }
        tape.apply_custom(Trace, &[v]).unwrap()
    }

    #[test]
    fn grads_before_backward_is_contract_error() {
        let layer = random_layer(5, 4, 4, 1, 4);
        let mut tape = Tape::new();
        let x = tape.constant(DenseMatrix::zeros(1, 4));
        layer.forward(&mut tape, x, &LedgerHandle::new()).unwrap();
        assert!(matches!(
            layer.adapter_grads(&tape),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_input_zero_grads() {
        let layer = random_layer(6, 4, 3, 2, 3);
        let mut tape = Tape::new();
        let x = tape.constant(DenseMatrix::zeros(2, 4));
        let out = layer
            .forward(&mut tape, x, &LedgerHandle::new())
            .unwrap()
            .output;
        let l = tape.sum(out);
        tape.backward(l).unwrap();
        let (ga, gb) = layer.adapter_grads(&tape).unwrap();
        assert_eq!(ga, &DenseMatrix::zeros(3, 2));
        assert_eq!(gb, &DenseMatrix::zeros(4, 2));
    }

    #[test]
    fn quantized_base_gets_no_gradient_and_bias_frozen() {
        let layer = random_layer(7, 4, 3, 2, 3);
        let mut tape = Tape::new();
        let x = tape.leaf(DenseMatrix::filled(2, 4, 0.3));
        let vars = layer.forward(&mut tape, x, &LedgerHandle::new()).unwrap();
        let l = tape.sum(vars.output);
        tape.backward(l).unwrap();
        assert!(tape.grad(vars.bias).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn merge_check_reports() {
        let mut r = rng(8);
        let q = quantize_rtn(&DenseMatrix::randn(4, 8, 1.0, &mut r), 4, None).unwrap();
        let adapter = LoraAdapter::init(8, 4, 2, 8.0, 1).unwrap();
        let mut layer = ModuLoraLayer::quantized("l", q, adapter, vec![0.0; 4]).unwrap();
        let before = layer.frozen_hash();
        let report = layer.merge_check().unwrap();
        assert!(!report.exact_merge_possible);
        assert!(report.lossy_merge.as_ref().unwrap().codes_unchanged);
        assert_eq!(layer.frozen_hash(), before);

        layer.adapter.a = DenseMatrix::randn(4, 2, 1.0, &mut r);
        let report = layer.merge_check().unwrap();
        assert!(report.lossy_merge.unwrap().error_estimate > 0.0);
        assert_eq!(layer.frozen_hash(), before);
    }
}
