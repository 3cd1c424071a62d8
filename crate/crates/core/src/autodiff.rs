//! Minimal reverse-mode autodiff over [`DenseMatrix`] values.
//!
//! A [`Tape`] owns every recorded value. Operations return [`VarId`]
//! handles; [`Tape::backward`] walks the tape in reverse recording order,
//! which is a valid topological order because inputs are always recorded
//! before the nodes that consume them.
//!
//! Operations that need their own backward rule (the low-precision linear
//! map is the motivating case) implement [`CustomFunction`] and are recorded
//! with [`Tape::apply_custom`].

use std::any::type_name;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation with a user-supplied backward rule.
///
/// `forward` returns the output together with whatever context the backward
/// rule needs; the tape hands exactly that context back to `backward`.
/// `backward` must return one slot per forward input, `None` where the
/// input is not differentiable.
pub trait CustomFunction: Send + 'static {
    type Context: Send + 'static;

    fn name(&self) -> &str {
        type_name::<Self>()
    }

    fn forward(&self, inputs: &[&DenseMatrix]) -> Result<(DenseMatrix, Self::Context)>;

    fn backward(
        &self,
        ctx: &Self::Context,
        grad_output: &DenseMatrix,
    ) -> Result<Vec<Option<DenseMatrix>>>;
}

trait RecordedFunction: Send {
    fn name(&self) -> &str;
    fn backward(&self, grad_output: &DenseMatrix) -> Result<Vec<Option<DenseMatrix>>>;
}

struct Recorded<F: CustomFunction> {
    func: F,
    ctx: F::Context,
}

impl<F: CustomFunction> RecordedFunction for Recorded<F> {
    fn name(&self) -> &str {
        self.func.name()
    }

    fn backward(&self, grad_output: &DenseMatrix) -> Result<Vec<Option<DenseMatrix>>> {
        self.func.backward(&self.ctx, grad_output)
    }
}

enum Op {
    Leaf,
    MatMul(VarId, VarId),
    Add(VarId, VarId),
    AddBias(VarId, VarId),
    Tanh(VarId),
    Relu(VarId),
    Gelu(VarId),
    Softmax(VarId),
    CrossEntropy {
        logits: VarId,
        probs: DenseMatrix,
        labels: Vec<usize>,
    },
    Mse {
        pred: VarId,
        target: DenseMatrix,
    },
    LayerNorm {
        x: VarId,
        normalized: DenseMatrix,
        inv_std: Vec<f64>,
    },
    Transpose(VarId),
    Scale(VarId, f64),
    Sum(VarId),
    Custom {
        func: Box<dyn RecordedFunction>,
        inputs: Vec<VarId>,
    },
}

impl Op {
    fn label(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse { .. } => "mse",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Transpose(_) => "transpose",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Custom { func, .. } => func.name(),
        }
    }
}

struct Node {
    value: DenseMatrix,
    requires_grad: bool,
    op: Op,
}

/// Records operations and propagates gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<DenseMatrix>>,
    names: HashMap<String, VarId>,
    visits: Vec<VarId>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn softmax_rows(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseMatrix, requires_grad: bool, op: Op) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        id
    }

    fn node(&self, id: VarId) -> &Node {
        &self.nodes[id.0]
    }

    fn any_grad(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|&i| self.node(i).requires_grad)
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: DenseMatrix) -> VarId {
        self.push(value, true, Op::Leaf)
    }

    /// A leaf that never accumulates gradient.
    pub fn constant(&mut self, value: DenseMatrix) -> VarId {
        self.push(value, false, Op::Leaf)
    }

    /// A named leaf; its gradient can later be fetched with [`Tape::grad_by_name`].
    pub fn param(
        &mut self,
        name: impl Into<String>,
        value: DenseMatrix,
        requires_grad: bool,
    ) -> VarId {
        let id = self.push(value, requires_grad, Op::Leaf);
        self.names.insert(name.into(), id);
        id
    }

    pub fn value(&self, id: VarId) -> &DenseMatrix {
        &self.node(id).value
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.node(id).requires_grad
    }

    pub fn grad(&self, id: VarId) -> Option<&DenseMatrix> {
        self.grads[id.0].as_ref()
    }

    pub fn grad_by_name(&self, name: &str) -> Option<&DenseMatrix> {
        self.names.get(name).and_then(|&id| self.grad(id))
    }

    pub fn var_by_name(&self, name: &str) -> Option<VarId> {
        self.names.get(name).copied()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Node ids visited by the most recent [`Tape::backward`], in visit order.
    pub fn visit_log(&self) -> &[VarId] {
        &self.visits
    }

    /// Op label of a node, for diagnostics.
    pub fn op_name(&self, id: VarId) -> &str {
        self.node(id).op.label()
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, rg, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, rg, Op::Add(a, b)))
    }

    /// Adds a `1 × n` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let v = self.value(x).add_row_broadcast(self.value(bias))?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(v, rg, Op::AddBias(x, bias)))
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        let v = self.value(x).map(f64::tanh);
        let rg = self.requires_grad(x);
        self.push(v, rg, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let v = self.value(x).map(|t| t.max(0.0));
        let rg = self.requires_grad(x);
        self.push(v, rg, Op::Relu(x))
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&mut self, x: VarId) -> VarId {
        let v = self.value(x).map(gelu);
        let rg = self.requires_grad(x);
        self.push(v, rg, Op::Gelu(x))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: VarId) -> VarId {
        let v = softmax_rows(self.value(x));
        let rg = self.requires_grad(x);
        self.push(v, rg, Op::Softmax(x))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: VarId, labels: &[usize]) -> Result<VarId> {
        let lv = self.value(logits);
        if labels.len() != lv.rows() || lv.rows() == 0 {
            return Err(Error::dim(format!(
                "{} labels for {} logit rows",
                labels.len(),
                lv.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= lv.cols()) {
            return Err(Error::Index(format!(
                "label {bad} with {} classes",
                lv.cols()
            )));
        }
        let probs = softmax_rows(lv);
        let m = lv.rows() as f64;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -probs.get(r, l).ln())
            .sum::<f64>()
            / m;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            DenseMatrix::filled(1, 1, loss),
            rg,
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean over all entries of `(pred - target)²`.
    pub fn mse(&mut self, pred: VarId, target: &DenseMatrix) -> Result<VarId> {
        let diff = self.value(pred).sub(target)?;
        if diff.is_empty() {
            return Err(Error::dim("mse of an empty matrix"));
        }
        let loss = diff.frobenius_sq() / diff.len() as f64;
        let rg = self.requires_grad(pred);
        Ok(self.push(
            DenseMatrix::filled(1, 1, loss),
            rg,
            Op::Mse {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Row-wise normalization to zero mean, unit variance (no affine part).
    pub fn layer_norm(&mut self, x: VarId, eps: f64) -> VarId {
        let xv = self.value(x);
        let n = xv.cols() as f64;
        let mut normalized = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = normalized.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let rg = self.requires_grad(x);
        self.push(
            normalized.clone(),
            rg,
            Op::LayerNorm {
                x,
                normalized,
                inv_std,
            },
        )
    }

    pub fn transpose(&mut self, x: VarId) -> VarId {
        let v = self.value(x).transpose();
        let rg = self.requires_grad(x);
        self.push(v, rg, Op::Transpose(x))
    }

    pub fn scale(&mut self, x: VarId, k: f64) -> VarId {
        let v = self.value(x).scale(k);
        let rg = self.requires_grad(x);
        self.push(v, rg, Op::Scale(x, k))
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let v = DenseMatrix::filled(1, 1, self.value(x).sum());
        let rg = self.requires_grad(x);
        self.push(v, rg, Op::Sum(x))
    }

    /// Runs `func.forward` on the input values and records the result.
    pub fn apply_custom<F: CustomFunction>(&mut self, func: F, inputs: &[VarId]) -> Result<VarId> {
        let values: Vec<&DenseMatrix> = inputs.iter().map(|&i| self.value(i)).collect();
        let (out, ctx) = func.forward(&values)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            out,
            rg,
            Op::Custom {
                func: Box::new(Recorded { func, ctx }),
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Back-propagates from a scalar `loss`, accumulating into stored grads.
    ///
    /// Calling this twice without [`Tape::zero_grad`] adds the second
    /// gradient onto the first.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {r}x{c}"
            )));
        }
        self.visits.clear();
        let mut local: Vec<Option<DenseMatrix>> = vec![None; loss.0 + 1];
        if !self.requires_grad(loss) {
            return Ok(());
        }
        local[loss.0] = Some(DenseMatrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = local[idx].take() else { continue };
            let id = VarId(idx);
            self.visits.push(id);
            for (input, grad) in self.input_grads(id, &g)? {
                if !self.requires_grad(input) {
                    continue;
                }
                let expected = self.value(input).shape();
                if grad.shape() != expected {
                    return Err(Error::Contract(format!(
                        "{} produced a {:?} gradient for a {:?} input",
                        self.op_name(id),
                        grad.shape(),
                        expected
                    )));
                }
                match &mut local[input.0] {
                    Some(acc) => acc.add_assign(&grad)?,
                    slot @ None => *slot = Some(grad),
                }
            }
            match &mut self.grads[idx] {
                Some(acc) => acc.add_assign(&g)?,
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn input_grads(&self, id: VarId, g: &DenseMatrix) -> Result<Vec<(VarId, DenseMatrix)>> {
        let node = self.node(id);
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let mut v = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    v.push((*a, g.matmul_t(self.value(*b))?));
                }
                if self.requires_grad(*b) {
                    v.push((*b, self.value(*a).transpose().matmul(g)?));
                }
                v
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddBias(x, b) => vec![(*x, g.clone()), (*b, g.sum_rows())],
            Op::Tanh(x) => vec![(*x, g.hadamard(&node.value.map(|y| 1.0 - y * y))?)],
            Op::Relu(x) => {
                let mask = self.value(*x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                vec![(*x, g.hadamard(&mask)?)]
            }
            Op::Gelu(x) => vec![(*x, g.hadamard(&self.value(*x).map(gelu_grad))?)],
            Op::Softmax(x) => {
                let y = &node.value;
                let mut dx = y.hadamard(g)?;
                for r in 0..dx.rows() {
                    let s: f64 = dx.row(r).iter().sum();
                    let yr = y.row(r).to_vec();
                    for (d, yv) in dx.row_mut(r).iter_mut().zip(yr) {
                        *d -= yv * s;
                    }
                }
                vec![(*x, dx)]
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let scale = g.get(0, 0) / labels.len() as f64;
                let mut dx = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    dx.set(r, l, dx.get(r, l) - 1.0);
                }
                vec![(*logits, dx.scale(scale))]
            }
            Op::Mse { pred, target } => {
                let diff = self.value(*pred).sub(target)?;
                let scale = 2.0 * g.get(0, 0) / diff.len() as f64;
                vec![(*pred, diff.scale(scale))]
            }
            Op::LayerNorm {
                x,
                normalized,
                inv_std,
            } => {
                let n = normalized.cols() as f64;
                let mut dx = DenseMatrix::zeros(normalized.rows(), normalized.cols());
                for r in 0..dx.rows() {
                    let gr = g.row(r);
                    let xr = normalized.row(r);
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((d, gv), xv) in dx.row_mut(r).iter_mut().zip(gr).zip(xr) {
                        *d = inv_std[r] * (gv - mean_g - xv * mean_gx);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Transpose(x) => vec![(*x, g.transpose())],
            Op::Scale(x, k) => vec![(*x, g.scale(*k))],
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                vec![(*x, DenseMatrix::filled(r, c, g.get(0, 0)))]
            }
            Op::Custom { func, inputs } => {
                let grads = func.backward(g)?;
                if grads.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "{} returned {} gradients for {} inputs",
                        func.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                inputs
                    .iter()
                    .zip(grads)
                    .filter_map(|(&i, g)| g.map(|g| (i, g)))
                    .collect()
            }
        };
        Ok(out)
    }
}
