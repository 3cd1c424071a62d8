//! The low-precision linear map `x ↦ x·Ŵᵀ` with recompute-in-backward.
//!
//! Neither pass keeps a dequantized weight around: forward materializes
//! `Ŵ` (or one row of it, or nothing at all, depending on the
//! [`MaterializationStrategy`]), multiplies, and frees it; backward does the
//! same again to form `grad·Ŵ`. Every materialized buffer is a
//! [`TrackedBuffer`] that reports its allocation and release to a
//! [`MemoryLedger`], so the peak-memory bound can be checked after the fact.

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::autodiff::CustomFunction;
use crate::error::{Error, Result};
use crate::quant::{QuantizedMatrix, Quantizer};
use crate::tensor::{dot, DenseMatrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaterializationStrategy {
    /// Dequantize the whole matrix for one multiply, then free it.
    #[default]
    WeightMaterialize,
    /// Dequantize and consume one row at a time.
    RowMaterialize,
    /// Delegate to the quantizer's own matrix-vector product.
    QuantizerMatvec,
}

impl MaterializationStrategy {
    pub const ALL: [MaterializationStrategy; 3] = [
        MaterializationStrategy::WeightMaterialize,
        MaterializationStrategy::RowMaterialize,
        MaterializationStrategy::QuantizerMatvec,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MaterializationStrategy::WeightMaterialize => "weight",
            MaterializationStrategy::RowMaterialize => "row",
            MaterializationStrategy::QuantizerMatvec => "matvec",
        }
    }
}

impl fmt::Display for MaterializationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaterializationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight" => Ok(Self::WeightMaterialize),
            "row" => Ok(Self::RowMaterialize),
            "matvec" => Ok(Self::QuantizerMatvec),
            other => Err(Error::config(format!(
                "unknown materialization strategy {other:?}; expected weight, row or matvec"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Backward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Alloc,
    Free,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub layer: String,
    pub phase: Phase,
    pub bytes: usize,
    pub kind: EventKind,
    /// Live materialized bytes right after this event.
    pub live_after: usize,
}

/// Running account of materialized high-precision weight bytes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryLedger {
    current: usize,
    peak: usize,
    events: Vec<LedgerEvent>,
}

impl MemoryLedger {
    pub fn current_bytes(&self) -> usize {
        self.current
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    fn record(&mut self, layer: &str, phase: Phase, bytes: usize, kind: EventKind) {
        match kind {
            EventKind::Alloc => {
                self.current += bytes;
                self.peak = self.peak.max(self.current);
            }
            EventKind::Free => {
                // a free is always paired with an earlier alloc of the same size
                self.current = self
                    .current
                    .checked_sub(bytes)
                    .expect("ledger freed more than allocated");
            }
        }
        self.events.push(LedgerEvent {
            layer: layer.to_owned(),
            phase,
            bytes,
            kind,
            live_after: self.current,
        });
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// Shared handle to one ledger; cloning shares the same account.
#[derive(Clone, Debug, Default)]
pub struct LedgerHandle(Arc<Mutex<MemoryLedger>>);

impl LedgerHandle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lock(&self) -> MutexGuard<'_, MemoryLedger> {
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn snapshot(&self) -> MemoryLedger {
        self.lock().clone()
    }

    pub fn peak_bytes(&self) -> usize {
        self.lock().peak
    }

    pub fn reset(&self) {
        self.lock().reset();
    }
}

/// A materialized weight buffer whose lifetime is recorded on a ledger.
pub struct TrackedBuffer<'a, T> {
    value: T,
    bytes: usize,
    ledger: &'a LedgerHandle,
    layer: &'a str,
    phase: Phase,
}

impl<'a, T> TrackedBuffer<'a, T> {
    fn new(value: T, bytes: usize, ledger: &'a LedgerHandle, layer: &'a str, phase: Phase) -> Self {
        ledger.lock().record(layer, phase, bytes, EventKind::Alloc);
        Self {
            value,
            bytes,
            ledger,
            layer,
            phase,
        }
    }
}

impl<T> std::ops::Deref for TrackedBuffer<'_, T> {
    type Target = T;
    fn deref(&self) -> &T {
        &self.value
    }
}

impl<T> std::ops::DerefMut for TrackedBuffer<'_, T> {
    fn deref_mut(&mut self) -> &mut T {
        &mut self.value
    }
}

impl<T> Drop for TrackedBuffer<'_, T> {
    fn drop(&mut self) {
        self.ledger
            .lock()
            .record(self.layer, self.phase, self.bytes, EventKind::Free);
    }
}

/// Everything a low-precision multiply needs besides its operands.
#[derive(Clone)]
pub struct LpContext {
    pub layer: String,
    pub strategy: MaterializationStrategy,
    pub quantizer: Arc<dyn Quantizer>,
    pub ledger: LedgerHandle,
}

impl fmt::Debug for LpContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LpContext")
            .field("layer", &self.layer)
            .field("strategy", &self.strategy)
            .field("quantizer", &self.quantizer.name())
            .finish()
    }
}

const F64_BYTES: usize = std::mem::size_of::<f64>();

/// `x·Ŵᵀ` for `x: m×d_in`, `q: d_out×d_in`.
pub fn lp_forward(ctx: &LpContext, x: &DenseMatrix, q: &QuantizedMatrix) -> Result<DenseMatrix> {
    if x.cols() != q.cols() {
        return Err(Error::dim(format!(
            "input has {} features, layer {} expects {}",
            x.cols(),
            ctx.layer,
            q.cols()
        )));
    }
    let (m, d_out, d_in) = (x.rows(), q.rows(), q.cols());
    match ctx.strategy {
        MaterializationStrategy::WeightMaterialize => {
            let w = TrackedBuffer::new(
                q.dequantize(),
                d_out * d_in * F64_BYTES,
                &ctx.ledger,
                &ctx.layer,
                Phase::Forward,
            );
            x.matmul_t(&w)
        }
        MaterializationStrategy::RowMaterialize => {
            let mut out = DenseMatrix::zeros(m, d_out);
            for i in 0..d_out {
                let row = TrackedBuffer::new(
                    q.dequantize_row(i)?,
                    d_in * F64_BYTES,
                    &ctx.ledger,
                    &ctx.layer,
                    Phase::Forward,
                );
                for s in 0..m {
                    out.set(s, i, dot(x.row(s), &row));
                }
            }
            Ok(out)
        }
        MaterializationStrategy::QuantizerMatvec => {
            let mut out = DenseMatrix::zeros(m, d_out);
            for s in 0..m {
                let y = ctx.quantizer.matvec(q, x.row(s))?;
                out.row_mut(s).copy_from_slice(&y);
            }
            Ok(out)
        }
    }
}

/// `grad_out·Ŵ`, re-dequantizing `Ŵ` from `q`.
pub fn lp_backward(
    ctx: &LpContext,
    grad_out: &DenseMatrix,
    q: &QuantizedMatrix,
) -> Result<DenseMatrix> {
    if grad_out.cols() != q.rows() {
        return Err(Error::dim(format!(
            "output gradient has {} columns, layer {} produces {}",
            grad_out.cols(),
            ctx.layer,
            q.rows()
        )));
    }
    let (m, d_out, d_in) = (grad_out.rows(), q.rows(), q.cols());
    match ctx.strategy {
        MaterializationStrategy::WeightMaterialize => {
            let w = TrackedBuffer::new(
                q.dequantize(),
                d_out * d_in * F64_BYTES,
                &ctx.ledger,
                &ctx.layer,
                Phase::Backward,
            );
            grad_out.matmul(&w)
        }
        MaterializationStrategy::RowMaterialize => {
            let mut out = DenseMatrix::zeros(m, d_in);
            for i in 0..d_out {
                let row = TrackedBuffer::new(
                    q.dequantize_row(i)?,
                    d_in * F64_BYTES,
                    &ctx.ledger,
                    &ctx.layer,
                    Phase::Backward,
                );
                for s in 0..m {
                    let g = grad_out.get(s, i);
                    if g == 0.0 {
                        continue;
                    }
                    for (o, w) in out.row_mut(s).iter_mut().zip(row.iter()) {
                        *o += g * w;
                    }
                }
            }
            Ok(out)
        }
        MaterializationStrategy::QuantizerMatvec => {
            let mut out = DenseMatrix::zeros(m, d_in);
            for s in 0..m {
                let y = ctx.quantizer.rmatvec(q, grad_out.row(s))?;
                out.row_mut(s).copy_from_slice(&y);
            }
            Ok(out)
        }
    }
}

/// The low-precision linear map as a tape function of one input, `x`.
///
/// The recorded context is only a shared reference to the quantized
/// weights; the backward rule returns a gradient for `x` alone.
pub struct LpLinear {
    pub ctx: LpContext,
    pub q: Arc<QuantizedMatrix>,
}

impl CustomFunction for LpLinear {
    type Context = Arc<QuantizedMatrix>;

    fn name(&self) -> &str {
        "lp_linear"
    }

    fn forward(&self, inputs: &[&DenseMatrix]) -> Result<(DenseMatrix, Self::Context)> {
        let [x] = inputs else {
            return Err(Error::Contract(format!(
                "lp_linear takes 1 input, got {}",
                inputs.len()
            )));
        };
        let out = lp_forward(&self.ctx, x, &self.q)?;
        Ok((out, Arc::clone(&self.q)))
    }

    fn backward(
        &self,
        q: &Self::Context,
        grad_output: &DenseMatrix,
    ) -> Result<Vec<Option<DenseMatrix>>> {
        Ok(vec![Some(lp_backward(&self.ctx, grad_output, q)?)])
    }
}

/// Outcome of checking a ledger against the single-materialization bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterializationReport {
    pub strategy: MaterializationStrategy,
    pub passed: bool,
    pub peak_materialized_bytes: usize,
    pub expected_peak_bytes: usize,
    /// What the peak would be if every layer's weights were live at once.
    pub sum_of_layers_bytes: usize,
    pub live_at_end: usize,
    pub offending: Vec<LedgerEvent>,
}

/// Expected peak for a set of `(d_out, d_in)` layers under `strategy`.
pub fn expected_peak_bytes(layers: &[(usize, usize)], strategy: MaterializationStrategy) -> usize {
    layers
        .iter()
        .map(|&(d_out, d_in)| match strategy {
            MaterializationStrategy::WeightMaterialize => d_out * d_in * F64_BYTES,
            MaterializationStrategy::RowMaterialize => d_in * F64_BYTES,
            MaterializationStrategy::QuantizerMatvec => 0,
        })
        .max()
        .unwrap_or(0)
}

/// Checks that the recorded peak equals the single largest materialization.
pub fn ledger_assert_single_materialization(
    ledger: &MemoryLedger,
    layers: &[(usize, usize)],
    strategy: MaterializationStrategy,
) -> MaterializationReport {
    let expected = expected_peak_bytes(layers, strategy);
    let offending: Vec<LedgerEvent> = ledger
        .events
        .iter()
        .filter(|e| e.live_after > expected)
        .cloned()
        .collect();
    let sum_of_layers = layers.iter().map(|&(o, i)| o * i * F64_BYTES).sum();
    let passed = offending.is_empty() && ledger.peak == expected && ledger.current == 0;
    MaterializationReport {
        strategy,
        passed,
        peak_materialized_bytes: ledger.peak,
        expected_peak_bytes: expected,
        sum_of_layers_bytes: sum_of_layers,
        live_at_end: ledger.current,
        offending,
    }
}

/// `max|a-b| / max|b|`, the agreement measure used between strategies.
pub fn relative_error(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    let scale = b.max_abs().max(a.max_abs());
    if scale == 0.0 {
        return 0.0;
    }
    a.sub(b)
        .map(|d| d.max_abs() / scale)
        .unwrap_or(f64::INFINITY)
}
