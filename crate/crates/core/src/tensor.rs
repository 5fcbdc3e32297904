//! Dense `f64` tensors and a record-on-execute reverse-mode tape.
//!
//! Values live in [`Tensor`] (plain data, freely sendable between threads).
//! To differentiate, values are registered on a [`Tape`] as leaves and
//! combined with the tape's operations; each operation appends a node whose
//! inputs were all recorded earlier, so node order is a topological order and
//! [`Tape::backward`] simply walks it in reverse.
//!
//! Broadcasting is limited to scalar scaling ([`Tape::scale`]) and row-vector
//! addition ([`Tape::add_row`]); everything else requires matching shapes.

use serde::{Deserialize, Serialize};

use crate::error::{CtfError, Result};

/// Additive-bias sentinel for disallowed attention entries.
pub const MASK_NEG: f64 = -1e30;

/// Anything below this is treated as a disallowed bias entry.
const MASK_THRESHOLD: f64 = MASK_NEG / 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CtfError::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Transpose(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Sum(usize),
    Mean(usize),
    GatherRows { input: usize, rows: Vec<usize> },
    MaskedSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        shift: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Gradient tape. Single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(contribution).for_each(|(a, b)| *a += b),
        None => *slot = Some(contribution),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, requires_grad)
    }

    pub fn leaf_owned(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t.shape, t.data, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
        }
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CtfError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a.0, b.0), rg))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(CtfError::shape(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// `a[..., n] + row[n]`, broadcasting the row over all leading indices.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sr = self.shape(row);
        if sr.len() != 1 || sa.is_empty() || sa[sa.len() - 1] != sr[0] {
            return Err(CtfError::shape("add_row", sa, sr));
        }
        let n = sr[0];
        let rv = self.value(row);
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + rv[i % n])
            .collect();
        let rg = self.rg(a) || self.rg(row);
        let shape = sa.to_vec();
        Ok(self.push(shape, out, Op::AddRow(a.0, row.0), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Scale(a.0, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Relu(a.0), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(CtfError::shape("transpose", sa, &[]));
        }
        let (m, n) = (sa[0], sa[1]);
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a.0), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(CtfError::shape("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Reshape(a.0), rg))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| CtfError::InvalidInput("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(CtfError::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(CtfError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, inner) = outer_inner(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let inputs = parts.iter().map(|p| p.0).collect();
        Ok(self.push(shape, out, Op::Concat { inputs, axis }, rg))
    }

    /// Take `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start > end || end > sa[axis] {
            return Err(CtfError::shape("slice", &sa, &[axis, start, end]));
        }
        let (outer, inner) = outer_inner(&sa, axis);
        let dim = sa[axis];
        let av = self.value(a);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            out.extend_from_slice(&av[base + start * inner..base + end * inner]);
        }
        let mut shape = sa;
        shape[axis] = end - start;
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Slice { input: a.0, axis, start }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Mean(a.0), rg)
    }

    /// Select rows of a rank-2 tensor (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 || rows.iter().any(|&r| r >= sa[0]) {
            return Err(CtfError::shape("gather_rows", sa, rows));
        }
        let cols = sa[1];
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&av[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            vec![rows.len(), cols],
            out,
            Op::GatherRows {
                input: a.0,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise softmax of `scores + bias`. Bias entries are `0` (allowed) or
    /// [`MASK_NEG`] (disallowed); disallowed columns get exactly zero weight.
    pub fn masked_softmax(&mut self, scores: Var, bias: &Tensor) -> Result<Var> {
        let ss = self.shape(scores);
        if ss.len() != 2 || ss != bias.shape() {
            return Err(CtfError::shape("masked_softmax", ss, bias.shape()));
        }
        let (rows, cols) = (ss[0], ss[1]);
        let sv = self.value(scores);
        let bv = bias.data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let r = i * cols..(i + 1) * cols;
            let (srow, brow) = (&sv[r.clone()], &bv[r.clone()]);
            let max = srow
                .iter()
                .zip(brow)
                .filter(|(_, &b)| b > MASK_THRESHOLD)
                .map(|(&s, &b)| s + b)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(CtfError::Contract(format!(
                    "attention row {i} has no admissible key"
                )));
            }
            let orow = &mut out[r];
            let mut z = 0.0;
            for j in 0..cols {
                if brow[j] > MASK_THRESHOLD {
                    let e = (srow[j] + brow[j] - max).exp();
                    orow[j] = e;
                    z += e;
                }
            }
            orow.iter_mut().for_each(|x| *x /= z);
        }
        let rg = self.rg(scores);
        Ok(self.push(vec![rows, cols], out, Op::MaskedSoftmax(scores.0), rg))
    }

    /// Normalise over the last axis, then apply `gain` and `shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| CtfError::shape("layer_norm", &sx, &[]))?;
        if d == 0 || self.shape(gain) != [d] || self.shape(shift) != [d] {
            return Err(CtfError::shape("layer_norm", &sx, self.shape(gain)));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(shift));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(shift);
        Ok(self.push(
            sx,
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                shift: shift.0,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(CtfError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let node = &nodes[idx];
            let rg = |i: usize| nodes[i].requires_grad;
            let mut contributions: Vec<(usize, Vec<f64>)> = Vec::new();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if rg(*a) {
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        contributions.push((*a, da));
                    }
                    if rg(*b) {
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let x = av[i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                let drow = &mut db[p * n..(p + 1) * n];
                                for (d, &y) in drow.iter_mut().zip(grow) {
                                    *d += x * y;
                                }
                            }
                        }
                        contributions.push((*b, db));
                    }
                }
                Op::Add(a, b) => {
                    if rg(*a) {
                        contributions.push((*a, g.clone()));
                    }
                    if rg(*b) {
                        contributions.push((*b, g.clone()));
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*a) {
                        contributions.push((*a, g.clone()));
                    }
                    if rg(*b) {
                        contributions.push((*b, g.iter().map(|x| -x).collect()));
                    }
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        let bv = &nodes[*b].value;
                        contributions.push((*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()));
                    }
                    if rg(*b) {
                        let av = &nodes[*a].value;
                        contributions.push((*b, g.iter().zip(av).map(|(x, y)| x * y).collect()));
                    }
                }
                Op::AddRow(a, row) => {
                    if rg(*a) {
                        contributions.push((*a, g.clone()));
                    }
                    if rg(*row) {
                        let n = nodes[*row].value.len();
                        let mut dr = vec![0.0; n];
                        for (i, x) in g.iter().enumerate() {
                            dr[i % n] += x;
                        }
                        contributions.push((*row, dr));
                    }
                }
                Op::Scale(a, s) => {
                    contributions.push((*a, g.iter().map(|x| x * s).collect()));
                }
                Op::Relu(a) => {
                    let av = &nodes[*a].value;
                    contributions.push((
                        *a,
                        g.iter()
                            .zip(av)
                            .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                            .collect(),
                    ));
                }
                Op::Transpose(a) => {
                    let (m, n) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[j * m + i];
                        }
                    }
                    contributions.push((*a, da));
                }
                Op::Reshape(a) => contributions.push((*a, g.clone())),
                Op::Concat { inputs, axis } => {
                    let (outer, inner) = outer_inner(&node.shape, *axis);
                    let total = node.shape[*axis] * inner;
                    let mut offset = 0;
                    for &p in inputs {
                        let len = nodes[p].shape[*axis] * inner;
                        if rg(p) {
                            let mut dp = Vec::with_capacity(outer * len);
                            for o in 0..outer {
                                let base = o * total + offset;
                                dp.extend_from_slice(&g[base..base + len]);
                            }
                            contributions.push((p, dp));
                        }
                        offset += len;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let sa = &nodes[*input].shape;
                    let (outer, inner) = outer_inner(sa, *axis);
                    let dim = sa[*axis];
                    let width = node.shape[*axis] * inner;
                    let mut da = vec![0.0; nodes[*input].value.len()];
                    for o in 0..outer {
                        let base = o * dim * inner + start * inner;
                        da[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                    }
                    contributions.push((*input, da));
                }
                Op::Sum(a) => {
                    contributions.push((*a, vec![g[0]; nodes[*a].value.len()]));
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.len();
                    contributions.push((*a, vec![g[0] / n as f64; n]));
                }
                Op::GatherRows { input, rows } => {
                    let cols = nodes[*input].shape[1];
                    let mut da = vec![0.0; nodes[*input].value.len()];
                    for (k, &r) in rows.iter().enumerate() {
                        for c in 0..cols {
                            da[r * cols + c] += g[k * cols + c];
                        }
                    }
                    contributions.push((*input, da));
                }
                Op::MaskedSoftmax(a) => {
                    let cols = node.shape[1];
                    let y = &node.value;
                    let mut da = vec![0.0; y.len()];
                    for r in 0..node.shape[0] {
                        let span = r * cols..(r + 1) * cols;
                        let dot: f64 = y[span.clone()]
                            .iter()
                            .zip(&g[span.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for j in span {
                            da[j] = y[j] * (g[j] - dot);
                        }
                    }
                    contributions.push((*a, da));
                }
                Op::LayerNorm {
                    x,
                    gain,
                    shift,
                    xhat,
                    inv_std,
                } => {
                    let d = *node.shape.last().unwrap();
                    let gv = &nodes[*gain].value;
                    let rows = xhat.len() / d;
                    if rg(*x) {
                        let mut dx = vec![0.0; xhat.len()];
                        for r in 0..rows {
                            let span = r * d..(r + 1) * d;
                            let dxhat: Vec<f64> =
                                span.clone().map(|i| g[i] * gv[i - r * d]).collect();
                            let m1 = dxhat.iter().sum::<f64>() / d as f64;
                            let m2 = dxhat
                                .iter()
                                .zip(&xhat[span.clone()])
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                / d as f64;
                            for (j, i) in span.enumerate() {
                                dx[i] = inv_std[r] * (dxhat[j] - m1 - xhat[i] * m2);
                            }
                        }
                        contributions.push((*x, dx));
                    }
                    if rg(*gain) {
                        let mut dg = vec![0.0; d];
                        for (i, (a, b)) in g.iter().zip(xhat).enumerate() {
                            dg[i % d] += a * b;
                        }
                        contributions.push((*gain, dg));
                    }
                    if rg(*shift) {
                        let mut ds = vec![0.0; d];
                        for (i, a) in g.iter().enumerate() {
                            ds[i % d] += a;
                        }
                        contributions.push((*shift, ds));
                    }
                }
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                accumulate(&mut self.nodes[idx].grad, g);
                continue;
            }
            for (input, c) in contributions {
                if self.nodes[input].requires_grad {
                    accumulate(&mut grads[input], c);
                }
            }
        }
        Ok(())
    }
}
