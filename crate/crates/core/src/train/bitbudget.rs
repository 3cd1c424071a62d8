//! Fixed bit budget comparison: a wide low-bit model against a narrow 8-bit one.
//!
//! Both candidates come from the same two-layer teacher. The narrow model
//! keeps the first half of the hidden units, so at 8 bits it stores as many
//! code bits as the full-width model does at 4 bits. Each candidate is
//! quantized, evaluated without adapters, finetuned and evaluated again on a
//! task planted on top of the full teacher.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::model::{Activation, AdapterConfig, DenseStack};
use super::optim::TrainConfig;
use super::task::{make_regression_task, planted_delta};
use super::train;
use crate::error::{Error, Result};
use crate::quant::{QuantConfig, Rtn};

pub const BIT_BUDGET_SCHEMA: &str = "modulora.bit_budget/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitBudgetConfig {
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub rank: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BitBudgetConfig {
    fn default() -> Self {
        Self {
            d_in: 16,
            hidden: 64,
            d_out: 8,
            n_train: 256,
            n_test: 128,
            rank: 4,
            steps: 150,
            lr: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitBudgetRow {
    pub label: String,
    pub bits: u8,
    pub hidden: usize,
    /// `bits × weight count`.
    pub code_bits: usize,
    /// Packed codes plus `f32` scales and zeros.
    pub storage_bytes: usize,
    pub baseline_mse: f64,
    pub finetuned_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitBudgetReport {
    pub schema: String,
    pub config: BitBudgetConfig,
    pub rows: Vec<BitBudgetRow>,
    /// Which side wins each wide-vs-narrow comparison after finetuning.
    pub direction: Vec<String>,
}

fn truncate_hidden(teacher: &DenseStack, keep: usize) -> Result<DenseStack> {
    let (w0, w1) = (&teacher.weights[0], &teacher.weights[1]);
    let w0 = crate::tensor::DenseMatrix::from_fn(keep, w0.cols(), |i, j| w0.get(i, j));
    let w1 = crate::tensor::DenseMatrix::from_fn(w1.rows(), keep, |i, j| w1.get(i, j));
    Ok(DenseStack {
        weights: vec![w0, w1],
        biases: vec![
            teacher.biases[0][..keep].to_vec(),
            teacher.biases[1].clone(),
        ],
        activation: teacher.activation,
    })
}

pub fn run_bit_budget(cfg: &BitBudgetConfig) -> Result<BitBudgetReport> {
    if cfg.hidden < 2 || !cfg.hidden.is_multiple_of(2) {
        return Err(Error::config(format!(
            "hidden width must be even and at least 2, got {}",
            cfg.hidden
        )));
    }
    let teacher = DenseStack::random(
        &[cfg.d_in, cfg.hidden, cfg.d_out],
        Activation::Tanh,
        cfg.seed,
    )?;
    let delta = planted_delta(cfg.d_out, cfg.hidden, 2, 1.0, cfg.seed);
    let task = make_regression_task(&teacher, &delta, cfg.seed, cfg.n_train, cfg.n_test)?;
    let narrow = truncate_hidden(&teacher, cfg.hidden / 2)?;
    let candidates = [
        ("wide-4bit", &teacher, 4u8),
        ("wide-3bit", &teacher, 3),
        ("narrow-8bit", &narrow, 8),
    ];

    let train_cfg = TrainConfig {
        steps: cfg.steps,
        lr: cfg.lr,
        seed: cfg.seed,
        ..Default::default()
    };
    let adapters = AdapterConfig {
        rank: cfg.rank,
        seed: cfg.seed,
        ..Default::default()
    };
    let mut rows = Vec::new();
    for (label, stack, bits) in candidates {
        let mut model = stack.quantize(
            Arc::new(Rtn),
            &QuantConfig::new(bits),
            None,
            &adapters,
            Default::default(),
        )?;
        let (code_bits, storage_bytes) = model
            .layers
            .iter()
            .filter_map(|l| l.quantized_weights())
            .fold((0, 0), |acc, q| {
                (
                    acc.0 + q.rows() * q.cols() * bits as usize,
                    acc.1 + q.storage_bytes(),
                )
            });
        let report = train(&mut model, &task, &train_cfg)?;
        rows.push(BitBudgetRow {
            label: label.into(),
            bits,
            hidden: stack.weights[0].rows(),
            code_bits,
            storage_bytes,
            baseline_mse: report.baseline.mse.unwrap_or(f64::NAN),
            finetuned_mse: report.final_eval.mse.unwrap_or(f64::NAN),
        });
    }
    let narrow_row = &rows[2];
    let direction = rows[..2]
        .iter()
        .map(|wide| {
            let winner = if wide.finetuned_mse < narrow_row.finetuned_mse {
                &wide.label
            } else {
                &narrow_row.label
            };
            format!(
                "{} vs {}: {} has lower finetuned mse",
                wide.label, narrow_row.label, winner
            )
        })
        .collect();
    Ok(BitBudgetReport {
        schema: BIT_BUDGET_SCHEMA.into(),
        config: cfg.clone(),
        rows,
        direction,
    })
}

impl BitBudgetReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>4} {:>6} {:>9} {:>9} {:>12} {:>12}\n",
            "model", "bits", "hidden", "code_bits", "bytes", "baseline_mse", "final_mse"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:>4} {:>6} {:>9} {:>9} {:>12.6} {:>12.6}",
                r.label,
                r.bits,
                r.hidden,
                r.code_bits,
                r.storage_bytes,
                r.baseline_mse,
                r.finetuned_mse
            );
        }
        for d in &self.direction {
            let _ = writeln!(s, "{d}");
        }
        s
    }
}
