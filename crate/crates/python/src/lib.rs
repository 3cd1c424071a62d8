//! Python bindings: quantizers, bit packing, quantized models, finetuning and benchmarks.

use std::collections::BTreeMap;
use std::path::PathBuf;

use modulora::bitpack::PackedCodes;
use modulora::checkpoint::{sha256_hex, Checkpoint};
use modulora::lowprec::{expected_peak_bytes, ledger_assert_single_materialization};
use modulora::quant::{proxy_loss, quantizer_by_name, DEFAULT_DAMPING};
use modulora::train::bitbudget::{run_bit_budget, BitBudgetConfig};
use modulora::train::task::{make_regression_task, planted_delta};
use modulora::train::{hex, train, Activation, AdapterConfig, DenseStack, Targets, TrainConfig};
use modulora::{
    quantize_optq, quantize_rtn, DenseMatrix, Error, LedgerHandle, MaterializationStrategy,
    QuantConfig, Tape,
};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io { .. }
        | Error::Format(_)
        | Error::BadMagic { .. }
        | Error::UnsupportedVersion { .. }
        | Error::Truncated { .. } => PyOSError::new_err(msg),
        Error::Numeric(_) | Error::Contract(_) => PyArithmeticError::new_err(msg),
        Error::Config(_) | Error::Dimension(_) | Error::Range(_) | Error::Index(_) => {
            PyValueError::new_err(msg)
        }
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for modulora::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DenseMatrix> {
    DenseMatrix::from_rows(&rows).py()
}

/// Serializes through JSON so reports arrive as plain dicts and lists.
fn json_obj<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let s = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (s,))?.unbind())
}

fn strategy(name: &str) -> PyResult<MaterializationStrategy> {
    name.parse().py()
}

#[pyclass(name = "QuantizedMatrix", module = "modulora_py", frozen)]
struct PyQuantizedMatrix(modulora::QuantizedMatrix);

#[pymethods]
impl PyQuantizedMatrix {
    #[getter]
    fn rows(&self) -> usize {
        self.0.rows()
    }

    #[getter]
    fn cols(&self) -> usize {
        self.0.cols()
    }

    #[getter]
    fn bits(&self) -> u8 {
        self.0.bits()
    }

    #[getter]
    fn group_size(&self) -> usize {
        self.0.group_size()
    }

    #[getter]
    fn storage_bytes(&self) -> usize {
        self.0.storage_bytes()
    }

    #[getter]
    fn words(&self) -> Vec<u32> {
        self.0.codes().words().to_vec()
    }

    #[getter]
    fn scales(&self) -> Vec<f64> {
        self.0.scales().to_vec()
    }

    #[getter]
    fn zeros(&self) -> Vec<f64> {
        self.0.zeros().to_vec()
    }

    fn codes(&self) -> Vec<u32> {
        self.0.codes().unpack()
    }

    fn dequantize(&self) -> Vec<Vec<f64>> {
        self.0.dequantize().to_rows()
    }

    fn matvec(&self, v: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.matvec_fused(&v).py()
    }

    fn rmatvec(&self, u: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.rmatvec_fused(&u).py()
    }

    /// `‖X·Wᵀ − X·Ŵᵀ‖²` against the original weights.
    fn proxy_loss(&self, w: Vec<Vec<f64>>, calib: Vec<Vec<f64>>) -> PyResult<f64> {
        proxy_loss(&matrix(w)?, &self.0, &matrix(calib)?).py()
    }

    fn content_hash(&self) -> String {
        hex(&self.0.content_hash())
    }

    fn __repr__(&self) -> String {
        format!(
            "QuantizedMatrix(rows={}, cols={}, bits={}, group_size={})",
            self.0.rows(),
            self.0.cols(),
            self.0.bits(),
            self.0.group_size()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (w, bits, group_size=None))]
fn rtn(w: Vec<Vec<f64>>, bits: u8, group_size: Option<usize>) -> PyResult<PyQuantizedMatrix> {
    Ok(PyQuantizedMatrix(
        quantize_rtn(&matrix(w)?, bits, group_size).py()?,
    ))
}

#[pyfunction]
#[pyo3(signature = (w, calib, bits, group_size=None, damping=DEFAULT_DAMPING))]
fn optq(
    w: Vec<Vec<f64>>,
    calib: Vec<Vec<f64>>,
    bits: u8,
    group_size: Option<usize>,
    damping: f64,
) -> PyResult<PyQuantizedMatrix> {
    Ok(PyQuantizedMatrix(
        quantize_optq(&matrix(w)?, &matrix(calib)?, bits, group_size, damping).py()?,
    ))
}

#[pyfunction]
fn pack(codes: Vec<u32>, bits: u8) -> PyResult<Vec<u32>> {
    Ok(PackedCodes::pack(&codes, bits).py()?.words().to_vec())
}

#[pyfunction]
fn unpack(words: Vec<u32>, bits: u8, count: usize) -> PyResult<Vec<u32>> {
    Ok(PackedCodes::from_words(bits, count, words).py()?.unpack())
}

/// Bytes one training step should materialize for `(d_out, d_in)` layers.
#[pyfunction(name = "expected_peak_bytes")]
fn py_expected_peak_bytes(layers: Vec<(usize, usize)>, materialize: &str) -> PyResult<usize> {
    Ok(expected_peak_bytes(&layers, strategy(materialize)?))
}

#[pyfunction]
#[pyo3(signature = (hidden=64, steps=150, rank=4, seed=0))]
fn bench_bits(
    py: Python<'_>,
    hidden: usize,
    steps: usize,
    rank: usize,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let cfg = BitBudgetConfig {
        hidden,
        steps,
        rank,
        seed,
        ..Default::default()
    };
    json_obj(py, &run_bit_budget(&cfg).py()?)
}

/// A quantized layer stack with LoRA adapters, in its checkpoint form.
#[pyclass(name = "Model", module = "modulora_py")]
struct PyModel(Checkpoint);

#[pymethods]
impl PyModel {
    /// Quantizes a seeded random stack. `calib` is a list of input rows or a
    /// count of random rows; OPTQ requires it.
    #[staticmethod]
    #[pyo3(signature = (
        dims, bits=4, quantizer="rtn", activation="tanh", group_size=None, calib=None,
        rank=8, alpha=32.0, materialize="weight", seed=0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn random(
        dims: Vec<usize>,
        bits: u8,
        quantizer: &str,
        activation: &str,
        group_size: Option<usize>,
        calib: Option<Bound<'_, PyAny>>,
        rank: usize,
        alpha: f64,
        materialize: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let act: Activation = activation.parse().py()?;
        let stack = DenseStack::random(&dims, act, seed).py()?;
        let calib = match calib {
            None => None,
            Some(c) => Some(match c.extract::<usize>() {
                Ok(n) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xca11_b000);
                    DenseMatrix::randn(n, dims[0], 1.0, &mut rng)
                }
                Err(_) => matrix(c.extract()?)?,
            }),
        };
        let cfg = QuantConfig {
            bits,
            group_size,
            damping: DEFAULT_DAMPING,
        };
        let adapters = AdapterConfig {
            rank,
            alpha,
            seed,
            bias_trainable: false,
        };
        let model = stack
            .quantize(
                quantizer_by_name(quantizer).py()?,
                &cfg,
                calib.as_ref(),
                &adapters,
                strategy(materialize)?,
            )
            .py()?;
        let meta = BTreeMap::from([
            ("model_seed".to_owned(), serde_json::json!(seed)),
            ("dims".to_owned(), serde_json::json!(dims)),
            ("bits".to_owned(), serde_json::json!(bits)),
            ("group_size".to_owned(), serde_json::json!(group_size)),
        ]);
        Ok(Self(Checkpoint::new(model, meta).py()?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(Checkpoint::load(&path).py()?))
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self(Checkpoint::from_bytes(data).py()?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).py()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &self.0.to_bytes().py()?))
    }

    fn sha256(&self) -> PyResult<String> {
        Ok(sha256_hex(&self.0.to_bytes().py()?))
    }

    #[getter]
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.0.model.layer_shapes()
    }

    #[getter]
    fn frozen_hash(&self) -> String {
        hex(&self.0.model.frozen_hash())
    }

    #[getter]
    fn materialize(&self) -> &'static str {
        self.0.config.strategy.as_str()
    }

    #[setter]
    fn set_materialize(&mut self, name: &str) -> PyResult<()> {
        let s = strategy(name)?;
        self.0.model.set_strategy(s);
        self.0.config.strategy = s;
        Ok(())
    }

    fn quantized(&self, index: usize) -> PyResult<PyQuantizedMatrix> {
        let layer = self
            .0
            .model
            .layers
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no layer {index}")))?;
        let q = layer
            .quantized_weights()
            .expect("checkpoints hold quantized layers");
        Ok(PyQuantizedMatrix(q.clone()))
    }

    fn forward(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix(x)?;
        let mut tape = Tape::new();
        let y = self
            .0
            .model
            .forward(&mut tape, &x, &LedgerHandle::new())
            .py()?;
        Ok(tape.value(y).to_rows())
    }

    /// Trains the adapters on a teacher regression task with a planted
    /// low-rank residual on the last layer; returns the training report.
    #[pyo3(signature = (
        steps=300, lr=1e-2, batch_size=32, seed=0, task_seed=None, delta_rank=2,
        n_train=192, n_test=64, weight_decay=0.0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn finetune(
        &mut self,
        py: Python<'_>,
        steps: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
        task_seed: Option<u64>,
        delta_rank: usize,
        n_train: usize,
        n_test: usize,
        weight_decay: f64,
    ) -> PyResult<Py<PyAny>> {
        let cfg = TrainConfig {
            steps,
            lr,
            batch_size,
            seed,
            weight_decay,
            ..Default::default()
        };
        let task_seed = task_seed.unwrap_or(seed);
        let teacher = self.0.teacher().py()?;
        let last = teacher.weights.last().expect("non-empty");
        let delta = planted_delta(last.rows(), last.cols(), delta_rank, 1.0, task_seed);
        let task = make_regression_task(&teacher, &delta, task_seed, n_train, n_test).py()?;
        let mut model = self.0.model.clone();
        let report = train(&mut model, &task, &cfg).py()?;
        self.0.model = model;
        json_obj(py, &report)
    }

    /// Peak materialized bytes of one forward and backward pass per strategy.
    #[pyo3(signature = (batch=8, seed=0))]
    fn bench_memory(&self, py: Python<'_>, batch: usize, seed: u64) -> PyResult<Py<PyAny>> {
        let mut model = self.0.model.clone();
        let shapes = model.layer_shapes();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DenseMatrix::randn(batch, model.input_dim(), 1.0, &mut rng);
        let y = Targets::Regression(DenseMatrix::zeros(batch, model.output_dim()));
        let mut rows = Vec::new();
        for s in MaterializationStrategy::ALL {
            model.set_strategy(s);
            let ledger = LedgerHandle::new();
            let mut tape = Tape::new();
            let loss = model.loss(&mut tape, &x, &y, &ledger).py()?;
            tape.backward(loss).py()?;
            rows.push(ledger_assert_single_materialization(
                &ledger.snapshot(),
                &shapes,
                s,
            ));
        }
        json_obj(py, &rows)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(layers={:?}, materialize={})",
            self.0.model.layer_shapes(),
            self.0.config.strategy.as_str()
        )
    }
}

#[pymodule]
fn modulora_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyQuantizedMatrix>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(rtn, m)?)?;
    m.add_function(wrap_pyfunction!(optq, m)?)?;
    m.add_function(wrap_pyfunction!(pack, m)?)?;
    m.add_function(wrap_pyfunction!(unpack, m)?)?;
    m.add_function(wrap_pyfunction!(py_expected_peak_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(bench_bits, m)?)?;
    Ok(())
}
