use std::borrow::Cow;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `backward` returns one gradient buffer per input, each the length of the
/// corresponding input's data.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f32]) -> Vec<Vec<f32>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Softmax(Var),
    Gelu(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f32>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    slot: Option<usize>,
}

/// Leaf gradients produced by one backward pass, keyed by parameter slot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    slots: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&[f32]> {
        self.slots.get(slot).and_then(|g| g.as_deref())
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    /// Adds `grad` onto `slot`, creating it if absent.
    pub fn add(&mut self, slot: usize, grad: &[f32]) {
        if self.slots.len() <= slot {
            self.slots.resize(slot + 1, None);
        }
        match &mut self.slots[slot] {
            Some(acc) => kernels::add_assign(acc, grad),
            empty => *empty = Some(grad.to_vec()),
        }
    }

    /// Sums `other` into `self`, slot by slot.
    pub fn merge(&mut self, other: &Gradients) {
        for (slot, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.add(slot, g);
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for g in self.slots.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Adds this pass's gradient for `slot` onto `tensor.grad`. Repeated calls
    /// accumulate; callers reset with [`Tensor::zero_grad`].
    pub fn accumulate_into(&self, slot: usize, tensor: &mut Tensor) {
        let Some(g) = self.get(slot) else { return };
        match &mut tensor.grad {
            Some(acc) => kernels::add_assign(acc, g),
            none => *none = Some(g.to_vec()),
        }
    }
}

/// Tape of executed operations. Leaves may borrow their values, so parameter
/// sets are bound without copying.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    macs: u64,
    consumed: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            macs: 0,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by every matmul recorded so far.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
            slot: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, slot: Option<usize>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: slot.is_some(),
            slot,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(Cow::Owned(value), None)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(value), None)
    }

    /// Trainable leaf whose gradient is reported under `slot`.
    pub fn param(&mut self, value: &'a Tensor, slot: usize) -> Var {
        self.leaf(Cow::Borrowed(value), Some(slot))
    }

    pub fn param_owned(&mut self, value: Tensor, slot: usize) -> Var {
        self.leaf(Cow::Owned(value), Some(slot))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, other, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let out = kernels::transpose(self.value(a).data(), r, c);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).data().to_vec();
        kernels::add_assign(&mut out, self.value(b).data());
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "add_row")?;
        if self.shape(bias) != [c] {
            return Err(Error::shape("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            kernels::add_assign(row, b);
        }
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let out: Vec<f32> = self.value(a).data().iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Scale(a, s), &[a]))
    }

    /// Sum of all entries, accumulated in f64.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().map(|&x| f64::from(x)).sum();
        Ok(self.push(Tensor::scalar(total as f32), Op::Sum(a), &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (r, c) = self.dims2(x, "layer_norm")?;
        if self.shape(gain) != [c] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        if self.shape(bias) != [c] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(bias)));
        }
        let (xhat, rstd) = kernels::normalize_rows(self.value(x).data(), r, c, eps);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; r * c];
        for (orow, hrow) in out.chunks_exact_mut(c).zip(xhat.chunks_exact(c)) {
            for j in 0..c {
                orow[j] = hrow[j] * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::new(&[r, c], out)?, op, &[x, gain, bias]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "softmax_rows")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            kernels::softmax_in_place(row);
        }
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::Softmax(x), &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f32> = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Gelu(x), &[x]))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "l2_normalize_rows")?;
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for (i, row) in out.chunks_exact_mut(c).enumerate() {
            let norm = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::DegenerateEmbedding { row: i, norm });
            }
            let inv = (1.0 / norm) as f32;
            row.iter_mut().for_each(|v| *v *= inv);
            norms.push(norm as f32);
        }
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::L2Normalize { x, norms }, &[x]))
    }

    /// Gathers `index` rows in the given order.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::CorruptPlan(format!("row index {bad} out of range for {r} rows")));
        }
        if index.is_empty() {
            return Err(Error::shape("gather_rows", &[r, c], &[0]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let op = Op::GatherRows {
            x,
            index: index.to_vec(),
        };
        Ok(self.push(Tensor::new(&[index.len(), c], out)?, op, &[x]))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims2(a, "concat_rows")?;
        let (rb, cb) = self.dims2(b, "concat_rows")?;
        if ca != cb {
            return Err(Error::shape("concat_rows", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        Ok(self.push(Tensor::new(&[ra + rb, ca], out)?, Op::ConcatRows(a, b), &[a, b]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", &[r, c], &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for row in src.chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.push(Tensor::new(&[r, len], out)?, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Config("concat_cols needs at least one input".into()))?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor::new(&[r, total], out)?, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if !t.is_scalar() {
            return Err(Error::NotScalar(t.shape().to_vec()));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Reverse pass seeded with explicit output gradients (vector-Jacobian
    /// product). Consumes the graph.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Vec<f32>)]) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(Error::shape("backward seed", self.shape(*v), &[g.len()]));
            }
            accumulate(&mut grads, v.0, g);
        }

        let mut out = Gradients::default();
        for i in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let val = |v: &Var| -> &Tensor { &nodes[v.0].value };
            let mut send = |v: Var, g: Vec<f32>| {
                if nodes[v.0].requires_grad {
                    accumulate_owned(&mut grads, v.0, g);
                }
            };
            match &node.op {
                Op::Leaf => {
                    if let Some(slot) = node.slot {
                        out.add(slot, &dy);
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = val(a).dims2().unwrap();
                    let n = val(b).shape()[1];
                    if nodes[a.0].requires_grad {
                        let mut da = vec![0.0; m * k];
                        kernels::matmul_nt(&dy, val(b).data(), &mut da, m, n, k);
                        send(*a, da);
                    }
                    if nodes[b.0].requires_grad {
                        let mut db = vec![0.0; k * n];
                        kernels::matmul_tn(val(a).data(), &dy, &mut db, m, k, n);
                        send(*b, db);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = val(a).dims2().unwrap();
                    send(*a, kernels::transpose(&dy, c, r));
                }
                Op::Add(a, b) => {
                    send(*b, dy.clone());
                    send(*a, dy);
                }
                Op::AddRow(a, bias) => {
                    let c = val(bias).len();
                    if nodes[bias.0].requires_grad {
                        send(*bias, kernels::column_sums(&dy, c));
                    }
                    send(*a, dy);
                }
                Op::Mul(a, b) => {
                    let da = dy.iter().zip(val(b).data()).map(|(g, y)| g * y).collect();
                    let db = dy.iter().zip(val(a).data()).map(|(g, x)| g * x).collect();
                    send(*a, da);
                    send(*b, db);
                }
                Op::Scale(a, s) => {
                    send(*a, dy.iter().map(|g| g * s).collect());
                }
                Op::Sum(a) => {
                    send(*a, vec![dy[0]; val(a).len()]);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let c = val(gain).len();
                    let g = val(gain).data();
                    if nodes[gain.0].requires_grad {
                        let mut dg = vec![0.0; c];
                        for (drow, hrow) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for j in 0..c {
                                dg[j] += drow[j] * hrow[j];
                            }
                        }
                        send(*gain, dg);
                    }
                    if nodes[bias.0].requires_grad {
                        send(*bias, kernels::column_sums(&dy, c));
                    }
                    if nodes[x.0].requires_grad {
                        let mut dx = vec![0.0; dy.len()];
                        for (row, ((drow, hrow), dxrow)) in dy
                            .chunks_exact(c)
                            .zip(xhat.chunks_exact(c))
                            .zip(dx.chunks_exact_mut(c))
                            .enumerate()
                        {
                            let mut mean_d = 0.0f64;
                            let mut mean_dh = 0.0f64;
                            for j in 0..c {
                                let d = f64::from(drow[j] * g[j]);
                                mean_d += d;
                                mean_dh += d * f64::from(hrow[j]);
                            }
                            mean_d /= c as f64;
                            mean_dh /= c as f64;
                            let rs = f64::from(rstd[row]);
                            for j in 0..c {
                                let d = f64::from(drow[j] * g[j]);
                                dxrow[j] = (rs * (d - mean_d - f64::from(hrow[j]) * mean_dh)) as f32;
                            }
                        }
                        send(*x, dx);
                    }
                }
                Op::Softmax(x) => {
                    let c = node.value.shape()[1];
                    let mut dx = vec![0.0; dy.len()];
                    for ((drow, yrow), dxrow) in dy
                        .chunks_exact(c)
                        .zip(node.value.data().chunks_exact(c))
                        .zip(dx.chunks_exact_mut(c))
                    {
                        let dot: f64 = drow
                            .iter()
                            .zip(yrow)
                            .map(|(&d, &y)| f64::from(d) * f64::from(y))
                            .sum();
                        let dot = dot as f32;
                        for j in 0..c {
                            dxrow[j] = yrow[j] * (drow[j] - dot);
                        }
                    }
                    send(*x, dx);
                }
                Op::Gelu(x) => {
                    let dx = dy
                        .iter()
                        .zip(val(x).data())
                        .map(|(g, &v)| g * kernels::gelu_grad(v))
                        .collect();
                    send(*x, dx);
                }
                Op::L2Normalize { x, norms } => {
                    let c = node.value.shape()[1];
                    let mut dx = vec![0.0; dy.len()];
                    for (((drow, yrow), dxrow), &norm) in dy
                        .chunks_exact(c)
                        .zip(node.value.data().chunks_exact(c))
                        .zip(dx.chunks_exact_mut(c))
                        .zip(norms)
                    {
                        let dot: f64 = drow
                            .iter()
                            .zip(yrow)
                            .map(|(&d, &y)| f64::from(d) * f64::from(y))
                            .sum();
                        let dot = dot as f32;
                        for j in 0..c {
                            dxrow[j] = (drow[j] - yrow[j] * dot) / norm;
                        }
                    }
                    send(*x, dx);
                }
                Op::GatherRows { x, index } => {
                    let c = node.value.shape()[1];
                    let mut dx = vec![0.0; val(x).len()];
                    for (k, &i) in index.iter().enumerate() {
                        kernels::add_assign(&mut dx[i * c..(i + 1) * c], &dy[k * c..(k + 1) * c]);
                    }
                    send(*x, dx);
                }
                Op::ConcatRows(a, b) => {
                    let split = val(a).len();
                    send(*b, dy[split..].to_vec());
                    send(*a, dy[..split].to_vec());
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = val(x).dims2().unwrap();
                    let w = node.value.shape()[1];
                    let mut dx = vec![0.0; r * c];
                    for (i, drow) in dy.chunks_exact(w).enumerate() {
                        dx[i * c + start..i * c + start + w].copy_from_slice(drow);
                    }
                    send(*x, dx);
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let (r, w) = val(&p).dims2().unwrap();
                        if nodes[p.0].requires_grad {
                            let mut dp = Vec::with_capacity(r * w);
                            for drow in dy.chunks_exact(total) {
                                dp.extend_from_slice(&drow[offset..offset + w]);
                            }
                            send(p, dp);
                        }
                        offset += w;
                    }
                }
                Op::Reshape(x) => send(*x, dy),
                Op::Custom { inputs, op } => {
                    let in_vals: Vec<&Tensor> = inputs.iter().map(val).collect();
                    let in_grads = op.backward(&in_vals, &node.value, &dy);
                    debug_assert_eq!(in_grads.len(), inputs.len(), "{}", op.name());
                    for (&v, g) in inputs.iter().zip(in_grads) {
                        debug_assert_eq!(g.len(), val(&v).len(), "{}", op.name());
                        send(v, g);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], i: usize, g: &[f32]) {
    match &mut grads[i] {
        Some(acc) => kernels::add_assign(acc, g),
        empty => *empty = Some(g.to_vec()),
    }
}

fn accumulate_owned(grads: &mut [Option<Vec<f32>>], i: usize, g: Vec<f32>) {
    match &mut grads[i] {
        Some(acc) => kernels::add_assign(acc, &g),
        empty => *empty = Some(g),
    }
}
