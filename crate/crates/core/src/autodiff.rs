//! Recording reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is an append-only list of primitive operations. Every push
//! evaluates the operation immediately through [`eval`], which is also what
//! [`Tape::replay`] uses, so replaying reproduces recorded values exactly.
//!
//! Attention probability tensors are registered with [`Tape::watch`]; after a
//! forward pass, [`backward_attention_grads`] returns the adjoint of the chosen
//! scalar at each watched node.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor, TensorStack};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-block attention gradients, each `h×s×s`.
pub type GradStack = TensorStack;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Gelu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    Stack(Vec<NodeId>),
    Slab(NodeId, usize),
    SelectRow(NodeId, usize),
    Entry(NodeId, usize),
    /// Row `i` scaled by `sigmoid(mean(row i))`; row 0 passes through when
    /// `exempt_first` is set.
    ImportanceScale {
        x: NodeId,
        exempt_first: bool,
    },
    /// Row `i` scaled by a constant.
    ScaleRows {
        x: NodeId,
        scale: Vec<f64>,
    },
    /// `logsumexp(logits) - logits[target]` on a `1×C` row.
    CrossEntropy {
        logits: NodeId,
        target: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulBt(a, b) | Add(a, b) | AddRow(a, b) => vec![*a, *b],
            LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
            Scale(x, _)
            | Gelu(x)
            | Sigmoid(x)
            | SoftmaxRows(x)
            | Slab(x, _)
            | SelectRow(x, _)
            | Entry(x, _)
            | SliceCols { x, .. }
            | ImportanceScale { x, .. }
            | ScaleRows { x, .. }
            | CrossEntropy { logits: x, .. } => vec![*x],
            ConcatRows(v) | ConcatCols(v) | Stack(v) => v.clone(),
        }
    }
}

/// Row-wise `sigmoid(mean)` scaling shared by the tape op and the p-ADL module.
pub(crate) fn importance_scale(x: &Tensor, exempt_first: bool) -> Result<Tensor> {
    let means = tensor::row_means(x)?;
    let mut scale: Vec<f64> = means.data().iter().map(|&m| tensor::sigmoid_scalar(m)).collect();
    if exempt_first {
        scale[0] = 1.0;
    }
    tensor::scale_rows(x, &scale)
}

fn eval(op: &Op, values: &[Tensor]) -> Result<Tensor> {
    use Op::*;
    let v = |id: &NodeId| &values[id.0];
    match op {
        Leaf => Err(Error::invalid("leaf nodes carry their own value")),
        MatMul(a, b) => tensor::matmul(v(a), v(b)),
        MatMulBt(a, b) => tensor::matmul_bt(v(a), v(b)),
        Add(a, b) => tensor::add(v(a), v(b)),
        AddRow(a, b) => tensor::add_row(v(a), v(b)),
        Scale(a, f) => Ok(v(a).map(|x| x * f)),
        LayerNorm { x, gain, bias } => tensor::layer_norm(v(x), v(gain), v(bias)),
        Gelu(x) => Ok(tensor::gelu(v(x))),
        Sigmoid(x) => Ok(tensor::sigmoid(v(x))),
        SoftmaxRows(x) => tensor::softmax_rows(v(x)),
        SliceCols { x, start, len } => tensor::slice_cols(v(x), *start, *len),
        ConcatRows(ids) => tensor::concat_rows(&ids.iter().map(v).collect::<Vec<_>>()),
        ConcatCols(ids) => tensor::concat_cols(&ids.iter().map(v).collect::<Vec<_>>()),
        Stack(ids) => Tensor::stack(&ids.iter().map(|i| v(i).clone()).collect::<Vec<_>>()),
        Slab(x, i) => {
            let t = v(x);
            if t.rank() < 2 || *i >= t.shape()[0] {
                return Err(Error::shape("slab index out of range"));
            }
            Ok(t.slab(*i))
        }
        SelectRow(x, r) => {
            let t = v(x);
            let (rows, c) = t.dims2()?;
            if *r >= rows {
                return Err(Error::shape("row index out of range"));
            }
            Ok(Tensor::from_parts(vec![1, c], t.row(*r).to_vec()))
        }
        Entry(x, i) => {
            let t = v(x);
            t.data()
                .get(*i)
                .map(|&e| Tensor::scalar(e))
                .ok_or_else(|| Error::shape("entry index out of range"))
        }
        ImportanceScale { x, exempt_first } => importance_scale(v(x), *exempt_first),
        ScaleRows { x, scale } => tensor::scale_rows(v(x), scale),
        CrossEntropy { logits, target } => {
            let l = v(logits).data();
            if *target >= l.len() {
                return Err(Error::shape("cross-entropy target out of range"));
            }
            let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + l.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            Ok(Tensor::scalar(lse - l[*target]))
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    requires_grad: Vec<bool>,
    watched: Vec<NodeId>,
    sabotage_softmax: bool,
}

/// Adjoints of every node that received gradient during a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Negative control for gradient checks: softmax backward passes the
    /// upstream gradient through unchanged, dropping its Jacobian.
    pub fn set_softmax_jacobian_sabotage(&mut self, on: bool) {
        self.sabotage_softmax = on;
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn watched(&self) -> &[NodeId] {
        &self.watched
    }

    /// A constant input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, value, false)
    }

    /// An input whose gradient is wanted (a trainable parameter).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, value, true)
    }

    /// Registers an attention-probability node. Nodes recorded afterwards that
    /// consume it will carry gradient back to it.
    pub fn watch(&mut self, id: NodeId) {
        self.requires_grad[id.0] = true;
        self.watched.push(id);
    }

    fn push_raw(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.ops.len());
        self.ops.push(op);
        self.values.push(value);
        self.requires_grad.push(requires_grad);
        id
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let value = eval(&op, &self.values)?;
        let rg = op.inputs().iter().any(|i| self.requires_grad[i.0]);
        Ok(self.push_raw(op, value, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, factor))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::LayerNorm { x, gain, bias })
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::SoftmaxRows(x))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::SliceCols { x, start, len })
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        self.push(Op::ConcatRows(parts))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        self.push(Op::ConcatCols(parts))
    }

    pub fn stack(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        self.push(Op::Stack(parts))
    }

    pub fn slab(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        self.push(Op::Slab(x, index))
    }

    pub fn select_row(&mut self, x: NodeId, row: usize) -> Result<NodeId> {
        self.push(Op::SelectRow(x, row))
    }

    /// Scalar node holding flat entry `index` of `x`.
    pub fn entry(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        self.push(Op::Entry(x, index))
    }

    pub fn importance_scale(&mut self, x: NodeId, exempt_first: bool) -> Result<NodeId> {
        self.push(Op::ImportanceScale { x, exempt_first })
    }

    pub fn scale_rows(&mut self, x: NodeId, scale: Vec<f64>) -> Result<NodeId> {
        self.push(Op::ScaleRows { x, scale })
    }

    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        self.push(Op::CrossEntropy { logits, target })
    }

    /// Recomputes every non-leaf value from the recorded operations.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.values.len());
        for (op, recorded) in self.ops.iter().zip(&self.values) {
            let v = match op {
                Op::Leaf => recorded.clone(),
                _ => eval(op, &values)?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse pass from a scalar node. Only nodes that require gradient
    /// receive adjoints.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        if output.0 >= self.ops.len() {
            return Err(Error::invalid("output node not on this tape"));
        }
        if self.values[output.0].len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                self.values[output.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.ops.len()];
        grads[output.0] = Some(Tensor::full(self.values[output.0].shape(), 1.0));
        for idx in (0..=output.0).rev() {
            if !self.requires_grad[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &g)?;
            grads[idx] = Some(g);
            for (input, dg) in contributions {
                if !self.requires_grad[input.0] {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(dg.data()) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, idx: usize, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        use Op::*;
        let val = |id: &NodeId| &self.values[id.0];
        let wants = |id: &NodeId| self.requires_grad[id.0];
        let out = &self.values[idx];
        let mut res = Vec::new();
        match &self.ops[idx] {
            Leaf => {}
            MatMul(a, b) => {
                if wants(a) {
                    res.push((*a, tensor::matmul_bt(g, val(b))?));
                }
                if wants(b) {
                    res.push((*b, tensor::matmul_at(val(a), g)?));
                }
            }
            MatMulBt(a, b) => {
                if wants(a) {
                    res.push((*a, tensor::matmul(g, val(b))?));
                }
                if wants(b) {
                    res.push((*b, tensor::matmul_at(g, val(a))?));
                }
            }
            Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            AddRow(a, bias) => {
                res.push((*a, g.clone()));
                if wants(bias) {
                    res.push((*bias, column_sums(g)?.reshape(val(bias).shape())?));
                }
            }
            Scale(a, f) => res.push((*a, g.map(|x| x * f))),
            LayerNorm { x, gain, bias } => {
                let (dx, dgain, dbias) = layer_norm_backward(val(x), val(gain), g)?;
                res.push((*x, dx));
                if wants(gain) {
                    res.push((*gain, dgain.reshape(val(gain).shape())?));
                }
                if wants(bias) {
                    res.push((*bias, dbias.reshape(val(bias).shape())?));
                }
            }
            Gelu(x) => {
                let data = val(x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| gi * tensor::gelu_grad_scalar(xi))
                    .collect();
                res.push((*x, Tensor::from_parts(g.shape().to_vec(), data)));
            }
            Sigmoid(x) => {
                let data = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &gi)| gi * s * (1.0 - s))
                    .collect();
                res.push((*x, Tensor::from_parts(g.shape().to_vec(), data)));
            }
            SoftmaxRows(x) => {
                if self.sabotage_softmax {
                    res.push((*x, g.clone()));
                } else {
                    res.push((*x, softmax_backward(out, g)));
                }
            }
            SliceCols { x, start, len } => {
                let (r, c) = val(x).dims2()?;
                let mut dx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    dx.data_mut()[i * c + start..i * c + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                res.push((*x, dx));
            }
            ConcatRows(ids) => {
                let mut offset = 0;
                for id in ids {
                    let n = val(id).len();
                    let part = g.data()[offset..offset + n].to_vec();
                    res.push((*id, Tensor::from_parts(val(id).shape().to_vec(), part)));
                    offset += n;
                }
            }
            ConcatCols(ids) => {
                let (r, total) = g.dims2()?;
                let mut col = 0;
                for id in ids {
                    let (_, w) = val(id).dims2()?;
                    let mut part = Vec::with_capacity(r * w);
                    for i in 0..r {
                        part.extend_from_slice(&g.data()[i * total + col..i * total + col + w]);
                    }
                    res.push((*id, Tensor::from_parts(vec![r, w], part)));
                    col += w;
                }
            }
            Stack(ids) => {
                for (i, id) in ids.iter().enumerate() {
                    res.push((*id, g.slab(i)));
                }
            }
            Slab(x, i) => {
                let mut dx = Tensor::zeros(val(x).shape());
                let n = g.len();
                dx.data_mut()[i * n..(i + 1) * n].copy_from_slice(g.data());
                res.push((*x, dx));
            }
            SelectRow(x, r) => {
                let mut dx = Tensor::zeros(val(x).shape());
                let c = g.len();
                dx.data_mut()[r * c..(r + 1) * c].copy_from_slice(g.data());
                res.push((*x, dx));
            }
            Entry(x, i) => {
                let mut dx = Tensor::zeros(val(x).shape());
                dx.data_mut()[*i] = g.data()[0];
                res.push((*x, dx));
            }
            ImportanceScale { x, exempt_first } => {
                res.push((*x, importance_scale_backward(val(x), g, *exempt_first)?));
            }
            ScaleRows { x, scale } => res.push((*x, tensor::scale_rows(g, scale)?)),
            CrossEntropy { logits, target } => {
                let l = val(logits);
                let p = tensor::softmax_rows(l)?;
                let mut d = p.map(|v| v * g.data()[0]);
                d.data_mut()[*target] -= g.data()[0];
                res.push((*logits, d));
            }
        }
        Ok(res)
    }
}

fn column_sums(g: &Tensor) -> Result<Tensor> {
    let (_, c) = g.dims2()?;
    let mut out = vec![0.0; c];
    for row in g.data().chunks_exact(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Ok(Tensor::from_parts(vec![c], out))
}

fn softmax_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let c = *y.shape().last().expect("softmax output has rank >= 1");
    let mut dx = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks_exact(c).zip(g.data().chunks_exact(c)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        dx.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

fn layer_norm_backward(x: &Tensor, gain: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (_, c) = x.dims2()?;
    let n = c as f64;
    let mut dx = Vec::with_capacity(x.len());
    let mut dgain = vec![0.0; c];
    let mut dbias = vec![0.0; c];
    let mut xhat = vec![0.0; c];
    let mut dxhat = vec![0.0; c];
    for (xr, gr) in x.data().chunks_exact(c).zip(g.data().chunks_exact(c)) {
        let (mean, inv) = tensor::row_moments(xr);
        for j in 0..c {
            xhat[j] = (xr[j] - mean) * inv;
            dgain[j] += gr[j] * xhat[j];
            dbias[j] += gr[j];
            dxhat[j] = gr[j] * gain.data()[j];
        }
        let sum_d: f64 = dxhat.iter().sum();
        let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
        for j in 0..c {
            dx.push(inv / n * (n * dxhat[j] - sum_d - xhat[j] * sum_dx));
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgain),
        Tensor::from_parts(vec![c], dbias),
    ))
}

fn importance_scale_backward(x: &Tensor, g: &Tensor, exempt_first: bool) -> Result<Tensor> {
    let (_, c) = x.dims2()?;
    let mut dx = Vec::with_capacity(x.len());
    for (i, (xr, gr)) in x.data().chunks_exact(c).zip(g.data().chunks_exact(c)).enumerate() {
        if exempt_first && i == 0 {
            dx.extend_from_slice(gr);
            continue;
        }
        let mean = xr.iter().sum::<f64>() / c as f64;
        let s = tensor::sigmoid_scalar(mean);
        let gx: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
        let shared = gx * s * (1.0 - s) / c as f64;
        dx.extend(gr.iter().map(|gi| gi * s + shared));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), dx))
}

/// Adjoint of `output` at every watched attention node, in watch order.
pub fn backward_attention_grads(tape: &Tape, output: NodeId) -> Result<GradStack> {
    if tape.watched.is_empty() {
        return Err(Error::invalid("tape has no watched attention nodes"));
    }
    let mut grads = tape.backward(output)?;
    let blocks = tape
        .watched
        .iter()
        .map(|&id| {
            grads
                .take(id)
                .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()))
        })
        .collect();
    Ok(TensorStack::new(blocks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect(),
        )
        .unwrap()
    }

    /// Central-difference check of one primitive. `build` records the op on the
    /// given leaf inputs; the scalar is a fixed random projection of its output.
    fn check_primitive(
        inputs: Vec<Tensor>,
        build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let scalar_of = |vals: &[Tensor], weights: Option<&Tensor>| -> (f64, Tensor) {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = vals.iter().map(|v| tape.param(v.clone())).collect();
            let out = build(&mut tape, &ids);
            let w = weights.cloned().unwrap_or_else(|| Tensor::zeros(tape.value(out).shape()));
            let s = tape
                .value(out)
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum();
            (s, tape.value(out).clone())
        };
        let (_, out0) = scalar_of(&inputs, None);
        let weights = random(&mut rng, out0.shape(), 1.0);

        // analytic: weighted sum of the output entries, recorded on the tape
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|v| tape.param(v.clone())).collect();
        let out = build(&mut tape, &ids);
        let flat = tape.value(out).len();
        let mut acc = None;
        for k in 0..flat {
            let e = tape.entry(out, k).unwrap();
            let scaled = tape.scale(e, weights.data()[k]).unwrap();
            acc = Some(match acc {
                None => scaled,
                Some(a) => tape.add(a, scaled).unwrap(),
            });
        }
        let grads = tape.backward(acc.unwrap()).unwrap();

        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for (which, input) in inputs.iter().enumerate() {
            let analytic = grads.get(ids[which]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
            for k in 0..input.len() {
                let mut plus = inputs.clone();
                plus[which].data_mut()[k] += eps;
                let mut minus = inputs.clone();
                minus[which].data_mut()[k] -= eps;
                let fd = (scalar_of(&plus, Some(&weights)).0 - scalar_of(&minus, Some(&weights)).0)
                    / (2.0 * eps);
                let a = analytic.data()[k];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                worst = worst.max((a - fd).abs() / denom);
            }
        }
        worst
    }

    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, &[3, 4], 1.0);
        let b = random(&mut rng, &[4, 2], 1.0);
        let bt = random(&mut rng, &[5, 4], 1.0);
        let row = random(&mut rng, &[4], 1.0);
        let gain = random(&mut rng, &[4], 1.0);
        let logits = random(&mut rng, &[1, 5], 2.0);

        let cases: Vec<(&str, f64)> = vec![
            ("matmul", check_primitive(vec![a.clone(), b.clone()], |t, i| t.matmul(i[0], i[1]).unwrap())),
            ("matmul_bt", check_primitive(vec![a.clone(), bt.clone()], |t, i| t.matmul_bt(i[0], i[1]).unwrap())),
            ("add", check_primitive(vec![a.clone(), a.map(|v| v * 0.3)], |t, i| t.add(i[0], i[1]).unwrap())),
            ("add_row", check_primitive(vec![a.clone(), row.clone()], |t, i| t.add_row(i[0], i[1]).unwrap())),
            ("scale", check_primitive(vec![a.clone()], |t, i| t.scale(i[0], -1.7).unwrap())),
            ("layer_norm", check_primitive(vec![a.clone(), gain.clone(), row.clone()], |t, i| t.layer_norm(i[0], i[1], i[2]).unwrap())),
            ("gelu", check_primitive(vec![a.map(|v| v * 3.0)], |t, i| t.gelu(i[0]).unwrap())),
            ("sigmoid", check_primitive(vec![a.map(|v| v * 3.0)], |t, i| t.sigmoid(i[0]).unwrap())),
            ("softmax_rows", check_primitive(vec![a.map(|v| v * 2.0)], |t, i| t.softmax_rows(i[0]).unwrap())),
            ("slice_cols", check_primitive(vec![a.clone()], |t, i| t.slice_cols(i[0], 1, 2).unwrap())),
            ("concat_rows", check_primitive(vec![a.clone(), row.clone().reshape(&[1, 4]).unwrap()], |t, i| t.concat_rows(vec![i[1], i[0]]).unwrap())),
            ("concat_cols", check_primitive(vec![a.clone(), b.clone().reshape(&[4, 2]).unwrap().slab(0).reshape(&[1, 2]).unwrap()], |t, i| {
                let a3 = t.select_row(i[0], 2).unwrap();
                t.concat_cols(vec![a3, i[1]]).unwrap()
            })),
            ("stack_slab", check_primitive(vec![a.clone(), a.map(|v| v * v)], |t, i| {
                let s = t.stack(vec![i[0], i[1]]).unwrap();
                let x = t.slab(s, 1).unwrap();
                t.gelu(x).unwrap()
            })),
            ("importance_scale", check_primitive(vec![a.clone()], |t, i| t.importance_scale(i[0], false).unwrap())),
            ("importance_scale_exempt", check_primitive(vec![a.clone()], |t, i| t.importance_scale(i[0], true).unwrap())),
            ("scale_rows", check_primitive(vec![a.clone()], |t, i| t.scale_rows(i[0], vec![1.0, 0.0, 1.0]).unwrap())),
            ("cross_entropy", check_primitive(vec![logits.clone()], |t, i| t.cross_entropy(i[0], 3).unwrap())),
        ];
        for (name, err) in cases {
            assert!(err < 1e-4, "{name}: relative error {err:e}");
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, &[4, 6], 1.0));
        let w = tape.param(random(&mut rng, &[6, 6], 1.0));
        let h = tape.matmul(x, w).unwrap();
        let s = tape.matmul_bt(h, h).unwrap();
        let p = tape.softmax_rows(s).unwrap();
        let y = tape.gelu(p).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v.data(), tape.value(NodeId(i)).data());
        }
        assert_eq!(replayed[y.0].data(), tape.value(y).data());
    }

    #[test]
    fn backward_rejects_non_scalar_and_unwatched() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[2, 2], 1.0));
        let y = tape.gelu(x).unwrap();
        assert!(tape.backward(y).is_err());
        let e = tape.entry(y, 0).unwrap();
        assert!(backward_attention_grads(&tape, e).is_err());
    }

    #[test]
    fn watched_node_receives_adjoint() {
        // f = sum_j p_j * v_j with p = softmax(z): df/dp = v.
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_rows(&[vec![0.1, 0.5, -0.3]]).unwrap());
        let p = tape.softmax_rows(z).unwrap();
        let stacked = tape.stack(vec![p]).unwrap();
        tape.watch(stacked);
        let slab = tape.slab(stacked, 0).unwrap();
        let v = tape.leaf(Tensor::from_rows(&[vec![2.0], vec![-1.0], vec![4.0]]).unwrap());
        let out = tape.matmul(slab, v).unwrap();
        let s = tape.entry(out, 0).unwrap();
        let grads = backward_attention_grads(&tape, s).unwrap();
        assert_eq!(grads.blocks()[0].shape(), &[1, 1, 3]);
        assert_eq!(grads.blocks()[0].data(), &[2.0, -1.0, 4.0]);
    }
}
