//! Toy models, synthetic tasks and a deterministic AdamW training loop.

pub mod bitbudget;
pub mod model;
pub mod optim;
pub mod task;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::lowprec::LedgerHandle;

pub use model::{
    Activation, AdapterConfig, Architecture, DenseHead, DenseStack, ToyModel, TransformerSpec,
};
pub use optim::{AdamW, Schedule, TrainConfig};
pub use task::{make_task, Example, SyntheticTask, Target, Targets, TaskDims, TaskKind};

pub const TRAIN_REPORT_SCHEMA: &str = "modulora.train_report/1";

const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    /// Regression tasks only.
    pub mse: Option<f64>,
    /// Classification tasks only.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema: String,
    pub task: TaskKind,
    pub config: TrainConfig,
    pub strategy: Option<String>,
    /// Mini-batch loss before each update.
    pub loss_curve: Vec<f64>,
    /// Full training-set loss before the first update.
    pub initial_loss: f64,
    pub final_train_loss: f64,
    /// Test metrics of the same model with every adapter zeroed.
    pub baseline: EvalMetrics,
    pub initial_eval: EvalMetrics,
    pub final_eval: EvalMetrics,
    pub peak_materialized_bytes: usize,
    pub frozen_hash: String,
    pub frozen_hash_unchanged: bool,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn check_dims(model: &ToyModel, task: &SyntheticTask) -> Result<()> {
    if model.input_dim() != task.input_dim || model.output_dim() != task.output_dim {
        return Err(Error::dim(format!(
            "model maps {} -> {} but task {} has {} inputs and {} outputs",
            model.input_dim(),
            model.output_dim(),
            task.kind,
            task.input_dim,
            task.output_dim
        )));
    }
    Ok(())
}

/// Loss, MSE and accuracy over `examples`, evaluated in chunks.
pub fn evaluate(
    model: &ToyModel,
    task: &SyntheticTask,
    examples: &[Example],
    ledger: &LedgerHandle,
) -> Result<EvalMetrics> {
    check_dims(model, task)?;
    if examples.is_empty() {
        return Err(Error::config("cannot evaluate on an empty split"));
    }
    let (mut loss, mut sq, mut correct) = (0.0, 0.0, 0usize);
    let idx: Vec<usize> = (0..examples.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, targets) = task.batch(examples, chunk)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &x, ledger)?;
        let pred = tape.value(out).clone();
        let l = match &targets {
            Targets::Regression(y) => tape.mse(out, y)?,
            Targets::Classes(c) => tape.cross_entropy(out, c)?,
        };
        loss += tape.value(l).get(0, 0) * chunk.len() as f64;
        match &targets {
            Targets::Regression(y) => sq += pred.sub(y)?.frobenius_sq(),
            Targets::Classes(c) => {
                for (r, &label) in c.iter().enumerate() {
                    let row = pred.row(r);
                    let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                    correct += usize::from(best == label);
                }
            }
        }
    }
    let n = examples.len() as f64;
    Ok(match task.kind {
        TaskKind::TeacherResidualRegression => EvalMetrics {
            loss: loss / n,
            mse: Some(sq / (n * task.output_dim as f64)),
            accuracy: None,
        },
        TaskKind::SequenceParityClassification => EvalMetrics {
            loss: loss / n,
            mse: None,
            accuracy: Some(correct as f64 / n),
        },
    })
}

/// Finetunes the adapters (and head, if any) of `model` on `task`.
///
/// Batches are drawn by reshuffling the training split every epoch with a
/// generator seeded from `cfg.seed`. Fails on a non-finite loss, reporting
/// the last step that produced a finite one.
pub fn train(model: &mut ToyModel, task: &SyntheticTask, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_dims(model, task)?;
    if task.train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let ledger = LedgerHandle::new();
    let frozen_before = model.frozen_hash();
    let baseline = evaluate(&model.without_adapters(), task, &task.test, &ledger)?;
    let initial_eval = evaluate(model, task, &task.test, &ledger)?;
    let initial_loss = evaluate(model, task, &task.train, &ledger)?.loss;
    ledger.reset();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg);
    let names = model.trainable_names();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let batch = cfg.batch_size.min(task.train.len());
    for step in 0..cfg.steps {
        if cursor + batch > order.len() {
            order = (0..task.train.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let (x, targets) = task.batch(&task.train, idx)?;
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, &x, &targets, &ledger)?;
        let value = tape.value(loss).get(0, 0);
        if !value.is_finite() {
            let last_good = match step {
                0 => "none".to_owned(),
                s => (s - 1).to_string(),
            };
            return Err(Error::Numeric(format!(
                "loss diverged to {value} at step {step}; last good step {last_good}"
            )));
        }
        loss_curve.push(value);
        tape.backward(loss)?;
        let lr = cfg.lr_at(step);
        for name in &names {
            let Some(grad) = tape.grad_by_name(name) else {
                continue;
            };
            let param = model
                .param_mut(name)
                .ok_or_else(|| Error::Contract(format!("no parameter {name}")))?;
            opt.step(name, param, grad, lr, step + 1)?;
        }
    }
    let peak_materialized_bytes = ledger.peak_bytes();

    let final_eval = evaluate(model, task, &task.test, &ledger)?;
    let final_train_loss = evaluate(model, task, &task.train, &ledger)?.loss;
    let frozen_after = model.frozen_hash();
    if frozen_after != frozen_before {
        return Err(Error::Contract(
            "frozen weights changed during training".into(),
        ));
    }
    log::debug!(
        "trained {} steps, final test loss {}",
        cfg.steps,
        final_eval.loss
    );
    Ok(TrainReport {
        schema: TRAIN_REPORT_SCHEMA.into(),
        task: task.kind,
        config: cfg.clone(),
        strategy: model.strategy().map(|s| s.as_str().to_owned()),
        loss_curve,
        initial_loss,
        final_train_loss,
        baseline,
        initial_eval,
        final_eval,
        peak_materialized_bytes,
        frozen_hash: hex(&frozen_after),
        frozen_hash_unchanged: true,
    })
}
