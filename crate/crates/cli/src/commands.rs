use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use modulora::checkpoint::{sha256_hex, Checkpoint, VERSION};
use modulora::lowprec::{ledger_assert_single_materialization, MaterializationReport};
use modulora::quant::{proxy_loss, quantizer_by_name};
use modulora::train::bitbudget::{run_bit_budget, BitBudgetConfig};
use modulora::train::task::{make_regression_task, planted_delta, PARITY_VOCAB};
use modulora::train::{
    evaluate, hex, make_task, train, AdapterConfig, DenseStack, EvalMetrics, SyntheticTask,
    Targets, TaskDims, TaskKind, TrainConfig, TrainReport,
};
use modulora::{DenseMatrix, LedgerHandle, MaterializationStrategy, QuantConfig, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::CliError;
use crate::{
    BenchBitsArgs, BenchMemoryArgs, EvalArgs, FinetuneArgs, InspectArgs, Output, QuantizeArgs,
    ReportFormat, TaskArgs,
};

fn emit<T: Serialize>(
    out: &Output,
    report: &T,
    text: impl FnOnce() -> String,
) -> Result<(), CliError> {
    let pretty =
        serde_json::to_string_pretty(report).map_err(|e| CliError::numeric(e.to_string()))?;
    if let Some(path) = &out.file {
        std::fs::write(path, format!("{pretty}\n")).map_err(|e| CliError::io(path, e))?;
    }
    match out.format {
        ReportFormat::Json => println!("{pretty}"),
        ReportFormat::Text => print!("{}", text()),
    }
    Ok(())
}

#[derive(Deserialize)]
struct CalibLine {
    x: Vec<f64>,
}

fn load_calib(spec: &str, d_in: usize, seed: u64) -> Result<DenseMatrix, CliError> {
    if let Some(n) = spec.strip_prefix("random:") {
        let n: usize = n.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            CliError::config(format!("--calib random:N needs a positive N, got {n:?}"))
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xca11b);
        return Ok(DenseMatrix::randn(n, d_in, 1.0, &mut rng));
    }
    let path = Path::new(spec);
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CalibLine = serde_json::from_str(&line)
            .map_err(|e| CliError::io(path, format!("line {}: {e}", n + 1)))?;
        if rec.x.len() != d_in {
            return Err(CliError::config(format!(
                "{}: line {} has {} features, model expects {d_in}",
                path.display(),
                n + 1,
                rec.x.len()
            )));
        }
        rows.push(rec.x);
    }
    if rows.is_empty() {
        return Err(CliError::config(format!(
            "{}: no calibration rows",
            path.display()
        )));
    }
    Ok(DenseMatrix::from_rows(&rows)?)
}

#[derive(Serialize)]
struct QuantizeLayer {
    name: String,
    rows: usize,
    cols: usize,
    bits: u8,
    group_size: usize,
    storage_bytes: usize,
    dense_bytes: usize,
    proxy_loss: Option<f64>,
}

#[derive(Serialize)]
struct QuantizeReport {
    schema: &'static str,
    checkpoint: String,
    sha256: String,
    frozen_hash: String,
    quantizer: String,
    bits: u8,
    calibration_samples: Option<usize>,
    layers: Vec<QuantizeLayer>,
}

pub fn quantize(args: &QuantizeArgs, seed: u64, out: &Output) -> Result<(), CliError> {
    if args.quantizer == "optq" && args.calib.is_none() {
        return Err(CliError::config(
            "--quantizer optq needs calibration inputs; pass --calib PATH or --calib random:N",
        ));
    }
    if args.dims.len() < 2 || args.dims.contains(&0) {
        return Err(CliError::config(
            "--dims needs at least two positive widths, e.g. 16,32,16",
        ));
    }
    if let Some(g) = args.group_size {
        if let Some(bad) = args.dims[..args.dims.len() - 1]
            .iter()
            .find(|&&d| g == 0 || d % g != 0)
        {
            return Err(CliError::config(format!(
                "--group-size {g} does not divide layer input width {bad}"
            )));
        }
    }
    if args.adapter.rank == 0 || args.adapter.alpha.is_nan() || args.adapter.alpha <= 0.0 {
        return Err(CliError::config("--rank and --alpha must be positive"));
    }
    if args.damping < 0.0 {
        return Err(CliError::config("--damping must be non-negative"));
    }

    let stack = DenseStack::random(&args.dims, args.activation, seed)?;
    let calib = args
        .calib
        .as_deref()
        .map(|c| load_calib(c, args.dims[0], seed))
        .transpose()?;
    let quantizer = quantizer_by_name(&args.quantizer)?;
    let cfg = QuantConfig {
        bits: args.bits,
        group_size: args.group_size,
        damping: args.damping,
    };
    let adapters = AdapterConfig {
        rank: args.adapter.rank,
        alpha: args.adapter.alpha,
        seed,
        bias_trainable: false,
    };
    let model = stack.quantize(
        quantizer,
        &cfg,
        calib.as_ref(),
        &adapters,
        args.adapter.materialize,
    )?;

    let inputs = calib.as_ref().map(|c| stack.layer_inputs(c)).transpose()?;
    let mut layers = Vec::new();
    for (i, l) in model.layers.iter().enumerate() {
        let q = l.quantized_weights().expect("freshly quantized");
        let proxy = match &inputs {
            Some(x) => Some(proxy_loss(&stack.weights[i], q, &x[i])?),
            None => None,
        };
        layers.push(QuantizeLayer {
            name: l.name.clone(),
            rows: q.rows(),
            cols: q.cols(),
            bits: q.bits(),
            group_size: q.group_size(),
            storage_bytes: q.storage_bytes(),
            dense_bytes: q.materialized_bytes(),
            proxy_loss: proxy,
        });
    }

    let meta = BTreeMap::from([
        ("model_seed".to_owned(), json!(seed)),
        ("dims".to_owned(), json!(args.dims)),
        ("bits".to_owned(), json!(args.bits)),
        ("group_size".to_owned(), json!(args.group_size)),
        ("calib".to_owned(), json!(args.calib)),
    ]);
    let frozen_hash = hex(&model.frozen_hash());
    let ck = Checkpoint::new(model, meta)?;
    let bytes = ck.to_bytes()?;
    std::fs::write(&args.out, &bytes).map_err(|e| CliError::io(&args.out, e))?;

    let report = QuantizeReport {
        schema: "modulora.quantize_report/1",
        checkpoint: args.out.display().to_string(),
        sha256: sha256_hex(&bytes),
        frozen_hash,
        quantizer: args.quantizer.clone(),
        bits: args.bits,
        calibration_samples: calib.as_ref().map(|c| c.rows()),
        layers,
    };
    emit(out, &report, || {
        let mut s = format!(
            "wrote {} ({} bytes, sha256 {})\n",
            report.checkpoint,
            bytes.len(),
            report.sha256
        );
        let _ = writeln!(
            s,
            "{:<8} {:>9} {:>4} {:>6} {:>8} {:>8} {:>14}",
            "layer", "shape", "bits", "group", "bytes", "dense", "proxy_loss"
        );
        for l in &report.layers {
            let proxy = l.proxy_loss.map_or("-".to_owned(), |p| format!("{p:.6e}"));
            let _ = writeln!(
                s,
                "{:<8} {:>9} {:>4} {:>6} {:>8} {:>8} {:>14}",
                l.name,
                format!("{}x{}", l.rows, l.cols),
                l.bits,
                l.group_size,
                l.storage_bytes,
                l.dense_bytes,
                proxy
            );
        }
        s
    })
}

fn build_task(ck: &Checkpoint, args: &TaskArgs, seed: u64) -> Result<SyntheticTask, CliError> {
    let task_seed = args.task_seed.unwrap_or(seed);
    if let Some(path) = &args.data {
        if path.exists() {
            return Ok(SyntheticTask::read_jsonl(args.task, task_seed, path)?);
        }
    }
    let task = match args.task {
        TaskKind::TeacherResidualRegression => {
            let teacher = ck.teacher()?;
            let last = teacher.weights.last().expect("non-empty");
            let delta = planted_delta(last.rows(), last.cols(), args.delta_rank, 1.0, task_seed);
            make_regression_task(&teacher, &delta, task_seed, args.n_train, args.n_test)?
        }
        TaskKind::SequenceParityClassification => {
            let d_in = ck.model.input_dim();
            if !d_in.is_multiple_of(PARITY_VOCAB) || ck.model.output_dim() != 2 {
                return Err(CliError::config(format!(
                    "parity task needs input width divisible by {PARITY_VOCAB} and 2 outputs; model is {d_in} -> {}",
                    ck.model.output_dim()
                )));
            }
            let dims = TaskDims {
                n_train: args.n_train,
                n_test: args.n_test,
                seq_len: d_in / PARITY_VOCAB,
                ..Default::default()
            };
            make_task(args.task, task_seed, &dims)?
        }
    };
    if let Some(path) = &args.data {
        task.write_jsonl(path)?;
    }
    Ok(task)
}

fn load(path: &Path) -> Result<(Checkpoint, Vec<u8>), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let ck = Checkpoint::from_bytes(&bytes).map_err(|e| CliError::from(e).prefixed(path))?;
    Ok((ck, bytes))
}

impl CliError {
    fn prefixed(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

#[derive(Serialize)]
struct FinetuneReport {
    schema: &'static str,
    input: String,
    output: String,
    input_sha256: String,
    output_sha256: String,
    baseline_mse: Option<f64>,
    final_mse: Option<f64>,
    baseline_accuracy: Option<f64>,
    final_accuracy: Option<f64>,
    train: TrainReport,
}

pub fn finetune(args: &FinetuneArgs, seed: u64, out: &Output) -> Result<(), CliError> {
    let cfg = TrainConfig {
        steps: args.steps,
        batch_size: args.batch_size,
        lr: args.lr,
        weight_decay: args.weight_decay,
        seed,
        warmup_ratio: args.warmup_ratio,
        schedule: args.schedule,
        ..Default::default()
    };
    cfg.validate()?;
    let (ck, in_bytes) = load(&args.checkpoint)?;
    let task = build_task(&ck, &args.task, seed)?;
    let mut model = ck.model.clone();
    if let Some(s) = args.materialize {
        model.set_strategy(s);
    }
    let report = train(&mut model, &task, &cfg)?;
    if model.frozen_hash() != ck.model.frozen_hash() {
        return Err(CliError::numeric(
            "frozen weights changed during finetuning",
        ));
    }
    let mut model = model;
    model.set_strategy(ck.config.strategy);
    let updated = Checkpoint {
        config: ck.config.clone(),
        model,
    };
    let out_bytes = updated.to_bytes()?;
    std::fs::write(&args.out, &out_bytes).map_err(|e| CliError::io(&args.out, e))?;

    let report = FinetuneReport {
        schema: "modulora.finetune_report/1",
        input: args.checkpoint.display().to_string(),
        output: args.out.display().to_string(),
        input_sha256: sha256_hex(&in_bytes),
        output_sha256: sha256_hex(&out_bytes),
        baseline_mse: report.baseline.mse,
        final_mse: report.final_eval.mse,
        baseline_accuracy: report.baseline.accuracy,
        final_accuracy: report.final_eval.accuracy,
        train: report,
    };
    emit(out, &report, || {
        let t = &report.train;
        let mut s = format!(
            "finetuned {} steps on {} -> {}\n",
            t.config.steps, t.task, report.output
        );
        let _ = writeln!(
            s,
            "train loss      {:.6e} -> {:.6e}",
            t.initial_loss, t.final_train_loss
        );
        let _ = writeln!(s, "test (no adapt) {}", metrics_line(&t.baseline));
        let _ = writeln!(s, "test (final)    {}", metrics_line(&t.final_eval));
        let _ = writeln!(s, "peak materialized bytes {}", t.peak_materialized_bytes);
        let _ = writeln!(s, "frozen hash {} unchanged", t.frozen_hash);
        s
    })
}

fn metrics_line(m: &EvalMetrics) -> String {
    let mut s = format!("loss {:.6e}", m.loss);
    if let Some(mse) = m.mse {
        let _ = write!(s, "  mse {mse:.6e}");
    }
    if let Some(acc) = m.accuracy {
        let _ = write!(s, "  accuracy {acc:.4}");
    }
    s
}

#[derive(Serialize)]
struct EvalReport {
    schema: &'static str,
    checkpoint: String,
    task: TaskKind,
    n_test: usize,
    baseline: EvalMetrics,
    metrics: EvalMetrics,
}

pub fn eval(args: &EvalArgs, seed: u64, out: &Output) -> Result<(), CliError> {
    let (ck, _) = load(&args.checkpoint)?;
    let task = build_task(&ck, &args.task, seed)?;
    let ledger = LedgerHandle::new();
    let report = EvalReport {
        schema: "modulora.eval_report/1",
        checkpoint: args.checkpoint.display().to_string(),
        task: task.kind,
        n_test: task.test.len(),
        baseline: evaluate(&ck.model.without_adapters(), &task, &task.test, &ledger)?,
        metrics: evaluate(&ck.model, &task, &task.test, &ledger)?,
    };
    emit(out, &report, || {
        format!(
            "{} on {} test examples\nno adapters  {}\nwith adapters {}\n",
            report.task,
            report.n_test,
            metrics_line(&report.baseline),
            metrics_line(&report.metrics)
        )
    })
}

#[derive(Serialize)]
struct InspectLayer {
    name: String,
    rows: usize,
    cols: usize,
    bits: u8,
    group_size: usize,
    storage_bytes: usize,
    dense_bytes: usize,
    rank: usize,
    alpha: f64,
    content_hash: String,
}

#[derive(Serialize)]
struct InspectReport {
    schema: &'static str,
    checkpoint: String,
    version: u16,
    file_bytes: usize,
    sha256: String,
    frozen_hash: String,
    config: modulora::checkpoint::ModelConfig,
    layers: Vec<InspectLayer>,
}

pub fn inspect(args: &InspectArgs, out: &Output) -> Result<(), CliError> {
    let (ck, bytes) = load(&args.checkpoint)?;
    let layers = ck
        .model
        .layers
        .iter()
        .map(|l| {
            let q = l
                .quantized_weights()
                .expect("checkpoints hold quantized layers");
            InspectLayer {
                name: l.name.clone(),
                rows: q.rows(),
                cols: q.cols(),
                bits: q.bits(),
                group_size: q.group_size(),
                storage_bytes: q.storage_bytes(),
                dense_bytes: q.materialized_bytes(),
                rank: l.adapter.rank(),
                alpha: l.adapter.alpha,
                content_hash: hex(&q.content_hash()),
            }
        })
        .collect();
    let report = InspectReport {
        schema: "modulora.inspect_report/1",
        checkpoint: args.checkpoint.display().to_string(),
        version: VERSION,
        file_bytes: bytes.len(),
        sha256: sha256_hex(&bytes),
        frozen_hash: hex(&ck.model.frozen_hash()),
        config: ck.config.clone(),
        layers,
    };
    emit(out, &report, || {
        let mut s = format!(
            "{} (format v{}, {} bytes)\nsha256 {}\nfrozen {}\nquantizer {}, activation {:?}, strategy {}\n",
            report.checkpoint,
            report.version,
            report.file_bytes,
            report.sha256,
            report.frozen_hash,
            report.config.quantizer,
            report.config.activation,
            report.config.strategy
        );
        let _ = writeln!(
            s,
            "{:<8} {:>9} {:>4} {:>6} {:>8} {:>8} {:>4} {:>6}",
            "layer", "shape", "bits", "group", "bytes", "dense", "r", "alpha"
        );
        for l in &report.layers {
            let _ = writeln!(
                s,
                "{:<8} {:>9} {:>4} {:>6} {:>8} {:>8} {:>4} {:>6}",
                l.name,
                format!("{}x{}", l.rows, l.cols),
                l.bits,
                l.group_size,
                l.storage_bytes,
                l.dense_bytes,
                l.rank,
                l.alpha
            );
        }
        s
    })
}

#[derive(Serialize)]
struct BenchMemoryReport {
    schema: &'static str,
    checkpoint: String,
    layers: Vec<(usize, usize)>,
    sum_of_layers_bytes: usize,
    rows: Vec<MaterializationReport>,
}

pub fn bench_memory(args: &BenchMemoryArgs, seed: u64, out: &Output) -> Result<(), CliError> {
    if args.batch == 0 {
        return Err(CliError::config("--batch must be positive"));
    }
    let (ck, _) = load(&args.checkpoint)?;
    let strategies = if args.materialize.is_empty() {
        MaterializationStrategy::ALL.to_vec()
    } else {
        args.materialize.clone()
    };
    let mut model = ck.model.clone();
    let shapes = model.layer_shapes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DenseMatrix::randn(args.batch, model.input_dim(), 1.0, &mut rng);
    let y = Targets::Regression(DenseMatrix::zeros(args.batch, model.output_dim()));
    let mut rows = Vec::new();
    for strategy in strategies {
        model.set_strategy(strategy);
        let ledger = LedgerHandle::new();
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, &x, &y, &ledger)?;
        tape.backward(loss)?;
        rows.push(ledger_assert_single_materialization(
            &ledger.snapshot(),
            &shapes,
            strategy,
        ));
    }
    let sum_of_layers_bytes = shapes.iter().map(|(o, i)| o * i * 8).sum();
    let report = BenchMemoryReport {
        schema: "modulora.bench_memory/1",
        checkpoint: args.checkpoint.display().to_string(),
        layers: shapes,
        sum_of_layers_bytes,
        rows,
    };
    emit(out, &report, || {
        let mut s = format!(
            "{:<8} {:>12} {:>12} {:>6}\n",
            "strategy", "peak_bytes", "expected", "ok"
        );
        for r in &report.rows {
            let _ = writeln!(
                s,
                "{:<8} {:>12} {:>12} {:>6}",
                r.strategy.as_str(),
                r.peak_materialized_bytes,
                r.expected_peak_bytes,
                r.passed
            );
        }
        let never = report.rows.iter().all(|r| {
            r.peak_materialized_bytes < report.sum_of_layers_bytes || report.layers.len() <= 1
        });
        let _ = writeln!(
            s,
            "sum of layers {} bytes {}",
            report.sum_of_layers_bytes,
            if never { "never reached" } else { "REACHED" }
        );
        s
    })?;
    match report.rows.iter().find(|r| !r.passed) {
        Some(bad) => Err(CliError::numeric(format!(
            "{} strategy peaked at {} bytes, expected {}",
            bad.strategy, bad.peak_materialized_bytes, bad.expected_peak_bytes
        ))),
        None => Ok(()),
    }
}

pub fn bench_bits(args: &BenchBitsArgs, seed: u64, out: &Output) -> Result<(), CliError> {
    let cfg = BitBudgetConfig {
        hidden: args.hidden,
        steps: args.steps,
        rank: args.rank,
        seed,
        ..Default::default()
    };
    if cfg.rank == 0 {
        return Err(CliError::config("--rank must be positive"));
    }
    let report = run_bit_budget(&cfg)?;
    emit(out, &report, || report.to_table())
}
