use std::sync::Arc;

use modulora::quant::{Optq, Rtn};
use modulora::train::{
    make_task, train, Activation, AdapterConfig, DenseStack, SyntheticTask, TaskDims, TaskKind,
    ToyModel, TrainConfig,
};
use modulora::{MaterializationStrategy, QuantConfig};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    (v[(n - 1) / 2] + v[n / 2]) / 2.0
}

fn planted(seed: u64) -> (DenseStack, SyntheticTask) {
    let dims = TaskDims::default();
    let task = make_task(TaskKind::TeacherResidualRegression, seed, &dims).unwrap();
    let teacher = DenseStack::random(&[dims.d_in, dims.d_out], Activation::Identity, seed).unwrap();
    (teacher, task)
}

fn final_mse(
    teacher: &DenseStack,
    task: &SyntheticTask,
    bits: Option<u8>,
    rank: usize,
    seed: u64,
) -> f64 {
    let adapters = AdapterConfig {
        rank,
        seed,
        ..Default::default()
    };
    let mut model = match bits {
        Some(b) => teacher
            .quantize(
                Arc::new(Rtn),
                &QuantConfig::new(b),
                None,
                &adapters,
                Default::default(),
            )
            .unwrap(),
        None => teacher.lora_reference(&adapters).unwrap(),
    };
    let cfg = TrainConfig {
        seed,
        ..Default::default()
    };
    train(&mut model, task, &cfg)
        .unwrap()
        .final_eval
        .mse
        .unwrap()
}

#[test]
fn rank_four_reaches_planted_solution_at_full_precision() {
    let (teacher, task) = planted(11);
    let mse = final_mse(&teacher, &task, None, 4, 11);
    assert!(mse <= 1e-3, "dense LoRA r=4 test mse {mse}");
}

#[test]
fn median_loss_non_increasing_in_rank() {
    let mut medians = Vec::new();
    for rank in [1, 2, 4, 8] {
        let runs = (0..20)
            .map(|seed| {
                let (teacher, task) = planted(seed);
                final_mse(&teacher, &task, Some(4), rank, seed)
            })
            .collect();
        medians.push(median(runs));
    }
    for w in medians.windows(2) {
        assert!(w[1] <= w[0], "medians by rank 1,2,4,8: {medians:?}");
    }
    assert!(
        medians[0] > medians[2],
        "rank 1 should be strictly worse than rank 4: {medians:?}"
    );
}

#[test]
fn optq_calibrated_stack_trains() {
    let (teacher, task) = planted(3);
    let calib = modulora::DenseMatrix::from_rows(
        &task
            .train
            .iter()
            .map(|e| e.x.as_slice())
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let mut model = teacher
        .quantize(
            Arc::new(Optq),
            &QuantConfig::new(3),
            Some(&calib),
            &AdapterConfig::default(),
            MaterializationStrategy::QuantizerMatvec,
        )
        .unwrap();
    let report = train(&mut model, &task, &TrainConfig::default()).unwrap();
    assert_eq!(report.peak_materialized_bytes, 0);
    assert!(report.final_eval.mse.unwrap() * 10.0 < report.baseline.mse.unwrap());
}

#[test]
fn tiny_transformer_learns_parity() {
    let dims = TaskDims::default();
    let task = make_task(TaskKind::SequenceParityClassification, 1, &dims).unwrap();
    let mut model = ToyModel::tiny_transformer(
        dims.seq_len,
        16,
        32,
        Arc::new(Rtn),
        &QuantConfig::new(4),
        &AdapterConfig::default(),
        1,
    )
    .unwrap();
    let cfg = TrainConfig {
        steps: 400,
        lr: 1e-2,
        seed: 1,
        ..Default::default()
    };
    let report = train(&mut model, &task, &cfg).unwrap();
    let acc = report.final_eval.accuracy.unwrap();
    assert!(
        acc >= 0.9,
        "test accuracy {acc}, loss {:?}",
        report.final_eval.loss
    );
    assert!(report.frozen_hash_unchanged);
}

#[test]
fn jsonl_cache_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [
        TaskKind::TeacherResidualRegression,
        TaskKind::SequenceParityClassification,
    ] {
        let task = make_task(kind, 4, &TaskDims::default()).unwrap();
        let path = dir.path().join(format!("{kind}.jsonl"));
        task.write_jsonl(&path).unwrap();
        assert_eq!(SyntheticTask::read_jsonl(kind, 4, &path).unwrap(), task);
    }
}
