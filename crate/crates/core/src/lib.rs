//! Low-rank adapter finetuning over bit-packed low-precision weights.
//!
//! The base weights of every linear layer are quantized once by a
//! black-box [`quant::Quantizer`] and then frozen. Training only updates
//! small adapter factors. The low-precision linear map
//! ([`lowprec::LpLinear`]) re-dequantizes its weights in both the forward
//! and backward pass instead of caching them, so at most one layer's worth
//! of high-precision weights is ever live.

// NaN must fail range checks, and index loops read closer to the math in kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod bitpack;
pub mod checkpoint;
pub mod error;
pub mod layer;
pub mod lowprec;
pub mod quant;
pub mod tensor;
pub mod train;

pub use autodiff::{CustomFunction, Tape, VarId};
pub use bitpack::PackedCodes;
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use layer::{LoraAdapter, ModuLoraLayer};
pub use lowprec::{LedgerHandle, MaterializationStrategy, MemoryLedger};
pub use quant::{quantize_optq, quantize_rtn, QuantConfig, QuantizedMatrix, Quantizer};
pub use tensor::DenseMatrix;
pub use train::{train, SyntheticTask, ToyModel, TrainConfig, TrainReport};
