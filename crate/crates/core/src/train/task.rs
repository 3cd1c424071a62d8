//! Synthetic tasks with a known low-rank solution.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Activation, DenseStack};
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Targets from a teacher whose last layer carries a planted low-rank perturbation.
    TeacherResidualRegression,
    /// Binary label = parity of the bits at a fixed set of marked positions.
    SequenceParityClassification,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::TeacherResidualRegression => "teacher_residual_regression",
            TaskKind::SequenceParityClassification => "sequence_parity_classification",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher_residual_regression" | "regression" => Ok(TaskKind::TeacherResidualRegression),
            "sequence_parity_classification" | "parity" => Ok(TaskKind::SequenceParityClassification),
            other => Err(Error::config(format!(
                "unknown task {other:?}; expected teacher_residual_regression or sequence_parity_classification"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Class(usize),
    Vector(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDims {
    pub d_in: usize,
    pub d_out: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub delta_rank: usize,
    /// Entries of the planted perturbation have variance `delta_scale² / d_in`.
    pub delta_scale: f64,
    pub seq_len: usize,
    pub marked: usize,
}

impl Default for TaskDims {
    fn default() -> Self {
        Self {
            d_in: 16,
            d_out: 16,
            n_train: 192,
            n_test: 64,
            delta_rank: 2,
            delta_scale: 1.0,
            seq_len: 8,
            marked: 2,
        }
    }
}

/// Token alphabet for the parity task: `2·marked + bit`.
pub const PARITY_VOCAB: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub seed: u64,
    /// Feature count of `x`.
    pub input_dim: usize,
    /// Target width (regression) or class count (classification).
    pub output_dim: usize,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

/// Mini-batch in matrix form.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Regression(DenseMatrix),
    Classes(Vec<usize>),
}

impl SyntheticTask {
    pub fn batch(&self, examples: &[Example], idx: &[usize]) -> Result<(DenseMatrix, Targets)> {
        let rows: Vec<&[f64]> = idx.iter().map(|&i| examples[i].x.as_slice()).collect();
        let x = DenseMatrix::from_rows(&rows)?;
        let targets = match self.kind {
            TaskKind::TeacherResidualRegression => {
                let ys = idx
                    .iter()
                    .map(|&i| match &examples[i].y {
                        Target::Vector(v) => Ok(v.as_slice()),
                        Target::Class(_) => {
                            Err(Error::Format("class label in a regression task".into()))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Targets::Regression(DenseMatrix::from_rows(&ys)?)
            }
            TaskKind::SequenceParityClassification => Targets::Classes(
                idx.iter()
                    .map(|&i| match examples[i].y {
                        Target::Class(c) => Ok(c),
                        Target::Vector(_) => Err(Error::Format(
                            "vector target in a classification task".into(),
                        )),
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        Ok((x, targets))
    }

    pub fn all(&self, examples: &[Example]) -> Result<(DenseMatrix, Targets)> {
        let idx: Vec<usize> = (0..examples.len()).collect();
        self.batch(examples, &idx)
    }

    /// Writes one JSON object per line: `{"x": [...], "y": ..., "split": "train"|"test"}`.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let io = |source| Error::Io {
            path: path.to_owned(),
            source,
        };
        let mut out = BufWriter::new(std::fs::File::create(path).map_err(io)?);
        for (split, examples) in [("train", &self.train), ("test", &self.test)] {
            for ex in examples.iter() {
                let line = serde_json::to_string(&CacheLine {
                    x: ex.x.clone(),
                    y: ex.y.clone(),
                    split: split.into(),
                })
                .map_err(|e| Error::Format(e.to_string()))?;
                writeln!(out, "{line}").map_err(io)?;
            }
        }
        out.flush().map_err(io)
    }

    /// Reads a cache written by [`SyntheticTask::write_jsonl`].
    pub fn read_jsonl(kind: TaskKind, seed: u64, path: &Path) -> Result<Self> {
        let io = |source| Error::Io {
            path: path.to_owned(),
            source,
        };
        let reader = BufReader::new(std::fs::File::open(path).map_err(io)?);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CacheLine = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
            let ex = Example { x: rec.x, y: rec.y };
            match rec.split.as_str() {
                "train" => train.push(ex),
                "test" => test.push(ex),
                other => {
                    return Err(Error::Format(format!(
                        "line {}: unknown split {other:?}",
                        n + 1
                    )))
                }
            }
        }
        let first = train
            .first()
            .or(test.first())
            .ok_or_else(|| Error::Format("empty dataset cache".into()))?;
        let input_dim = first.x.len();
        let output_dim = match (&first.y, kind) {
            (Target::Vector(v), TaskKind::TeacherResidualRegression) => v.len(),
            (Target::Class(_), TaskKind::SequenceParityClassification) => 2,
            _ => {
                return Err(Error::Format(format!(
                    "dataset targets do not match task {kind}"
                )))
            }
        };
        Ok(Self {
            kind,
            seed,
            input_dim,
            output_dim,
            train,
            test,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    x: Vec<f64>,
    y: Target,
    split: String,
}

/// Planted perturbation `U·Vᵀ·scale/√(rank·d_in)` with Gaussian `U`, `V`.
pub fn planted_delta(d_out: usize, d_in: usize, rank: usize, scale: f64, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xde17_a000);
    let u = DenseMatrix::randn(d_out, rank, 1.0, &mut rng);
    let v = DenseMatrix::randn(d_in, rank, 1.0, &mut rng);
    u.matmul_t(&v)
        .expect("rank matches")
        .scale(scale / ((rank * d_in) as f64).sqrt())
}

/// Regression task against `teacher` with `delta` added to its last layer.
pub fn make_regression_task(
    teacher: &DenseStack,
    delta: &DenseMatrix,
    seed: u64,
    n_train: usize,
    n_test: usize,
) -> Result<SyntheticTask> {
    let mut target = teacher.clone();
    let last = target
        .weights
        .last_mut()
        .ok_or_else(|| Error::config("teacher has no layers"))?;
    *last = last.add(delta)?;
    let d_in = teacher.weights[0].cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let x = DenseMatrix::randn(n_train + n_test, d_in, 1.0, &mut rng);
    let y = target.forward(&x)?;
    let examples: Vec<Example> = (0..x.rows())
        .map(|i| Example {
            x: x.row(i).to_vec(),
            y: Target::Vector(y.row(i).to_vec()),
        })
        .collect();
    let (train, test) = examples.split_at(n_train);
    Ok(SyntheticTask {
        kind: TaskKind::TeacherResidualRegression,
        seed,
        input_dim: d_in,
        output_dim: y.cols(),
        train: train.to_vec(),
        test: test.to_vec(),
    })
}

/// Builds a task from a seed alone. For regression the teacher is a single
/// random linear layer, so targets are `x·Wᵀ + x·ΔWᵀ + b`.
pub fn make_task(kind: TaskKind, seed: u64, dims: &TaskDims) -> Result<SyntheticTask> {
    match kind {
        TaskKind::TeacherResidualRegression => {
            if dims.d_in == 0 || dims.d_out == 0 || dims.delta_rank == 0 {
                return Err(Error::config(
                    "regression task needs positive d_in, d_out and delta rank",
                ));
            }
            let teacher = DenseStack::random(&[dims.d_in, dims.d_out], Activation::Identity, seed)?;
            let delta = planted_delta(
                dims.d_out,
                dims.d_in,
                dims.delta_rank,
                dims.delta_scale,
                seed,
            );
            make_regression_task(&teacher, &delta, seed, dims.n_train, dims.n_test)
        }
        TaskKind::SequenceParityClassification => make_parity_task(seed, dims),
    }
}

fn make_parity_task(seed: u64, dims: &TaskDims) -> Result<SyntheticTask> {
    let t = dims.seq_len;
    if t == 0 || t > 20 || dims.marked == 0 || dims.marked > t {
        return Err(Error::config(format!(
            "parity task needs 1 ≤ marked ≤ seq_len ≤ 20, got {} of {t}",
            dims.marked
        )));
    }
    let patterns = 1usize << t;
    if dims.n_train + dims.n_test > patterns {
        return Err(Error::config(format!(
            "only {patterns} distinct sequences of length {t}; cannot split {} + {}",
            dims.n_train, dims.n_test
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<usize> = (0..t).collect();
    positions.shuffle(&mut rng);
    let mut marked = vec![false; t];
    positions[..dims.marked]
        .iter()
        .for_each(|&p| marked[p] = true);

    let mut order: Vec<usize> = (0..patterns).collect();
    order.shuffle(&mut rng);
    let example = |bits: usize| {
        let mut x = vec![0.0; t * PARITY_VOCAB];
        let mut parity = 0;
        for (p, &m) in marked.iter().enumerate() {
            let bit = (bits >> p) & 1;
            x[p * PARITY_VOCAB + 2 * usize::from(m) + bit] = 1.0;
            if m {
                parity ^= bit;
            }
        }
        Example {
            x,
            y: Target::Class(parity),
        }
    };
    let train = order[..dims.n_train].iter().map(|&b| example(b)).collect();
    let test = order[dims.n_train..dims.n_train + dims.n_test]
        .iter()
        .map(|&b| example(b))
        .collect();
    Ok(SyntheticTask {
        kind: TaskKind::SequenceParityClassification,
        seed,
        input_dim: t * PARITY_VOCAB,
        output_dim: 2,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        for kind in [
            TaskKind::TeacherResidualRegression,
            TaskKind::SequenceParityClassification,
        ] {
            let dims = TaskDims {
                n_train: 64,
                n_test: 32,
                ..Default::default()
            };
            assert_eq!(
                make_task(kind, 3, &dims).unwrap(),
                make_task(kind, 3, &dims).unwrap()
            );
            assert_ne!(
                make_task(kind, 3, &dims).unwrap().train,
                make_task(kind, 4, &dims).unwrap().train
            );
        }
    }

    #[test]
    fn splits_are_disjoint() {
        for kind in [
            TaskKind::TeacherResidualRegression,
            TaskKind::SequenceParityClassification,
        ] {
            let task = make_task(kind, 1, &TaskDims::default()).unwrap();
            for a in &task.test {
                assert!(task.train.iter().all(|b| b.x != a.x));
            }
        }
    }

    #[test]
    fn planted_delta_has_requested_rank() {
        let d = planted_delta(8, 10, 2, 1.0, 0);
        // rank ≤ 2: every 3x3 minor built from rows 0..3 of Δ·Δᵀ vanishes
        let g = d.matmul_t(&d).unwrap();
        let det3 = |m: &DenseMatrix| {
            m.get(0, 0) * (m.get(1, 1) * m.get(2, 2) - m.get(1, 2) * m.get(2, 1))
                - m.get(0, 1) * (m.get(1, 0) * m.get(2, 2) - m.get(1, 2) * m.get(2, 0))
                + m.get(0, 2) * (m.get(1, 0) * m.get(2, 1) - m.get(1, 1) * m.get(2, 0))
        };
        assert!(det3(&g).abs() < 1e-12);
        assert!(g.get(0, 0) > 0.0);
    }

    #[test]
    fn parity_labels() {
        let dims = TaskDims {
            seq_len: 4,
            marked: 4,
            n_train: 12,
            n_test: 4,
            ..Default::default()
        };
        let task = make_task(TaskKind::SequenceParityClassification, 0, &dims).unwrap();
        for ex in task.train.iter().chain(&task.test) {
            // every position marked: label is parity of all bits
            let ones = (0..4).filter(|&p| ex.x[p * 4 + 3] == 1.0).count();
            assert_eq!(ex.y, Target::Class(ones % 2));
        }
        let too_many = TaskDims {
            seq_len: 3,
            n_train: 8,
            n_test: 1,
            ..Default::default()
        };
        assert!(make_task(TaskKind::SequenceParityClassification, 0, &too_many).is_err());
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [
            TaskKind::TeacherResidualRegression,
            TaskKind::SequenceParityClassification,
        ] {
            let task = make_task(
                kind,
                9,
                &TaskDims {
                    n_train: 20,
                    n_test: 5,
                    ..Default::default()
                },
            )
            .unwrap();
            let path = dir.path().join(format!("{kind}.jsonl"));
            task.write_jsonl(&path).unwrap();
            let back = SyntheticTask::read_jsonl(kind, 9, &path).unwrap();
            assert_eq!(back, task);
        }
    }

    #[test]
    fn kind_names() {
        assert_eq!(
            "teacher_residual_regression".parse::<TaskKind>().unwrap(),
            TaskKind::TeacherResidualRegression
        );
        assert!("mnli".parse::<TaskKind>().is_err());
    }
}
