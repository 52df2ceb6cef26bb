//! Reverse-mode differentiation over an append-only node arena.
//!
//! Nodes are pushed in evaluation order, so the arena index is already a
//! topological order: every parent index is smaller than its child's.
//! `backward` walks the arena once in reverse.

use crate::error::{NarvidError, Result};
use crate::numerics::kernels::{self, NORM_EPS};
use crate::numerics::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    SoftmaxRows { x: Var, tau: f64 },
    LayerNormRows { x: Var, gain: Var, bias: Var },
    Gather { x: Var, idx: Vec<usize> },
    GatherRows { x: Var, rows: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    CosineRows(Var, Var),
    MaxAxis { x: Var, argmax: Vec<usize> },
    Sum(Var),
    LogSumExp(Var),
    StdRows(Var),
    DivBySum(Var),
    Stack(Vec<Var>),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Gelu(_) => "gelu",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::Gather { .. } => "gather",
            Op::GatherRows { .. } => "gather_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::CosineRows(..) => "cosine_rows",
            Op::MaxAxis { .. } => "max_axis",
            Op::Sum(_) => "sum",
            Op::LogSumExp(_) => "log_sum_exp",
            Op::StdRows(_) => "std_rows",
            Op::DivBySum(_) => "div_by_sum",
            Op::Stack(_) => "stack",
            Op::Reshape(_) => "reshape",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::CosineRows(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Gelu(x)
            | Op::Sum(x)
            | Op::LogSumExp(x)
            | Op::StdRows(x)
            | Op::DivBySum(x)
            | Op::Reshape(x) => vec![*x],
            Op::SoftmaxRows { x, .. }
            | Op::Gather { x, .. }
            | Op::GatherRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::MaxAxis { x, .. } => vec![*x],
            Op::LayerNormRows { x, gain, bias } => vec![*x, *gain, *bias],
            Op::ConcatCols(xs) | Op::Stack(xs) => xs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; persisted only on leaves.
    grad: Option<Tensor>,
    /// Forward-pass intermediates needed by backward (layer norm only).
    saved: Vec<f64>,
}

/// Computation record: an arena of tensors and the ops that produced them.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None, saved: Vec::new() });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Clears every accumulated leaf gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        self.push_saved(op, shape, data, Vec::new())
    }

    fn push_saved(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, saved: Vec<f64>) -> Result<Var> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(NarvidError::Numeric(format!("{} produced non-finite value {bad}", op.name())));
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        let value = Tensor::from_parts_unchecked(shape, data);
        self.nodes.push(Node { value, op, requires_grad, grad: None, saved });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NarvidError::Shape(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    // ---- forward ops -------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`; 1-D operands are treated as one row.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(NarvidError::Shape(format!("matmul inner dims {k} and {k2}")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        self.push(Op::MatMul(a, b), vec![m, n], out)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose();
        let shape = t.shape().to_vec();
        self.push(Op::Transpose(x), shape, t.into_data())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(op, shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds the vector `row` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.value(row).numel() != n {
            return Err(NarvidError::Shape(format!("add_row: {} values for {n} columns", self.value(row).numel())));
        }
        let r = self.value(row).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, v)| v + r[i % n]).collect();
        self.push(Op::AddRow(x, row), vec![m, n], data)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        self.push(Op::Scale(x, c), shape, data)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v + c).collect();
        let shape = t.shape().to_vec();
        self.push(Op::AddScalar(x), shape, data)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())).collect();
        let shape = t.shape().to_vec();
        self.push(Op::Gelu(x), shape, data)
    }

    /// Row-wise `softmax(x / tau)`.
    pub fn softmax_rows(&mut self, x: Var, tau: f64) -> Result<Var> {
        let t = self.value(x);
        let mut data = Vec::with_capacity(t.numel());
        for row in t.row_iter() {
            data.extend(kernels::softmax_temp(row, tau)?);
        }
        let shape = t.shape().to_vec();
        self.push(Op::SoftmaxRows { x, tau }, shape, data)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(NarvidError::Shape(format!("layer_norm: gain/bias must have {n} values")));
        }
        let (xv, g, b) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(m * n);
        // saved layout: m*n normalized values, then m inverse std devs
        let mut saved = Vec::with_capacity(m * n + m);
        let mut inv_stds = Vec::with_capacity(m);
        for row in xv.chunks(n) {
            let (mean, std) = kernels::mean_std(row);
            let inv = 1.0 / (std * std + LAYER_NORM_EPS).sqrt();
            inv_stds.push(inv);
            for (j, v) in row.iter().enumerate() {
                let xhat = (v - mean) * inv;
                saved.push(xhat);
                out.push(g[j] * xhat + b[j]);
            }
        }
        saved.extend(inv_stds);
        let shape = self.value(x).shape().to_vec();
        self.push_saved(Op::LayerNormRows { x, gain, bias }, shape, out, saved)
    }

    /// Picks flat elements of `x` into a 1-D tensor.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.numel()) {
            return Err(NarvidError::Shape(format!("gather index {bad} out of {}", t.numel())));
        }
        let data = idx.iter().map(|&i| t.data()[i]).collect();
        self.push(Op::Gather { x, idx: idx.to_vec() }, vec![idx.len()], data)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(NarvidError::Shape(format!("row {r} out of {m}")));
            }
            data.extend_from_slice(t.row(r));
        }
        self.push(Op::GatherRows { x, rows: rows.to_vec() }, vec![rows.len(), n], data)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        if start + len > n {
            return Err(NarvidError::Shape(format!("columns {start}..{} out of {n}", start + len)));
        }
        let data = t.row_iter().flat_map(|r| r[start..start + len].iter().copied()).collect();
        self.push(Op::SliceCols { x, start }, vec![m, len], data)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let m = self.dims2(xs[0]).0;
        let mut total = 0;
        for &x in xs {
            let (mi, ni) = self.dims2(x);
            if mi != m {
                return Err(NarvidError::Shape(format!("concat_cols: {mi} rows vs {m}")));
            }
            total += ni;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(i));
            }
        }
        self.push(Op::ConcatCols(xs.to_vec()), vec![m, total], data)
    }

    /// All-pairs cosine: `[m,d] x [n,d] -> [m,n]` with the `NORM_EPS` guard.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(NarvidError::Shape(format!("cosine dims {} and {}", ta.cols(), tb.cols())));
        }
        let (m, n) = (ta.rows(), tb.rows());
        let mut data = Vec::with_capacity(m * n);
        for ra in ta.row_iter() {
            for rb in tb.row_iter() {
                data.push(kernels::cosine_unchecked(ra, rb));
            }
        }
        self.push(Op::CosineRows(a, b), vec![m, n], data)
    }

    /// Max of a matrix along `axis` (0: over rows, one per column; 1: over
    /// columns, one per row). Ties pick the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        let (outer, inner) = match axis {
            0 => (n, m),
            1 => (m, n),
            _ => return Err(NarvidError::Shape(format!("max_axis: axis {axis}"))),
        };
        let at = |o: usize, i: usize| if axis == 0 { i * n + o } else { o * n + i };
        let mut data = Vec::with_capacity(outer);
        let mut argmax = Vec::with_capacity(outer);
        for o in 0..outer {
            let mut best = at(o, 0);
            for i in 1..inner {
                if t.data()[at(o, i)] > t.data()[best] {
                    best = at(o, i);
                }
            }
            data.push(t.data()[best]);
            argmax.push(best);
        }
        self.push(Op::MaxAxis { x, argmax }, vec![outer], data)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Vec::new(), vec![s])
    }

    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let s = kernels::log_sum_exp(self.value(x).data());
        self.push(Op::LogSumExp(x), Vec::new(), vec![s])
    }

    /// Population standard deviation of each row: `[m,n] -> [m]`.
    pub fn std_rows(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).row_iter().map(|r| kernels::mean_std(r).1).collect::<Vec<_>>();
        let m = data.len();
        self.push(Op::StdRows(x), vec![m], data)
    }

    /// `x / sum(x)`.
    pub fn div_by_sum(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum();
        if s == 0.0 {
            return Err(NarvidError::Numeric("div_by_sum: zero total".into()));
        }
        let data = t.data().iter().map(|v| v / s).collect();
        let shape = t.shape().to_vec();
        self.push(Op::DivBySum(x), shape, data)
    }

    /// Concatenates the flat data of `xs` and views it with `shape`.
    pub fn stack(&mut self, xs: &[Var], shape: Vec<usize>) -> Result<Var> {
        let data: Vec<f64> = xs.iter().flat_map(|&x| self.value(x).data().iter().copied()).collect();
        if shape.iter().product::<usize>() != data.len() {
            return Err(NarvidError::Shape(format!("stack of {} values into {shape:?}", data.len())));
        }
        self.push(Op::Stack(xs.to_vec()), shape, data)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(NarvidError::Shape(format!("reshape {:?} into {shape:?}", t.shape())));
        }
        let data = t.data().to_vec();
        self.push(Op::Reshape(x), shape, data)
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    // ---- backward ----------------------------------------------------

    /// Accumulates `d loss / d leaf` into every gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(NarvidError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let leaf = &mut self.nodes[idx];
                match &mut leaf.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => leaf.grad = Some(Tensor::from_parts_unchecked(leaf.value.shape().to_vec(), g)),
                }
                continue;
            }
            for (parent, pg) in self.local_grads(idx, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn local_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).1;
                let (av, bv) = (val(*a), val(*b));
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * bv[p * n + j];
                            gb[p * n + j] += av[i * k + p] * g[i * n + j];
                        }
                        ga[i * k + p] = acc;
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(x) => {
                let (m, n) = self.dims2(*x);
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] = g[j * m + i];
                    }
                }
                vec![(*x, gx)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddRow(x, row) => {
                let n = self.nodes[row.0].value.numel();
                let mut gr = vec![0.0; n];
                for (i, v) in g.iter().enumerate() {
                    gr[i % n] += v;
                }
                vec![(*x, g.to_vec()), (*row, gr)]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::AddScalar(x) | Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Gelu(x) => {
                let gx = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gv * d
                    })
                    .collect();
                vec![(*x, gx)]
            }
            Op::SoftmaxRows { x, tau } => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut gx = vec![0.0; y.len()];
                for ((yr, gr), out) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - s) / tau;
                    }
                }
                vec![(*x, gx)]
            }
            Op::LayerNormRows { x, gain, bias } => {
                let (m, n) = self.dims2(*x);
                let xhat = &node.saved[..m * n];
                let inv = &node.saved[m * n..];
                let gv = val(*gain);
                let mut gx = vec![0.0; m * n];
                let mut gg = vec![0.0; n];
                let mut gbias = vec![0.0; n];
                for i in 0..m {
                    let row = i * n..(i + 1) * n;
                    let (gr, xr) = (&g[row.clone()], &xhat[row.clone()]);
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx[i * n + j] = inv[i] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        gg[j] += gr[j] * xr[j];
                        gbias[j] += gr[j];
                    }
                }
                vec![(*x, gx), (*gain, gg), (*bias, gbias)]
            }
            Op::Gather { x, idx } => {
                let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                for (k, &i) in idx.iter().enumerate() {
                    gx[i] += g[k];
                }
                vec![(*x, gx)]
            }
            Op::GatherRows { x, rows } => {
                let n = self.nodes[x.0].value.cols();
                let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        gx[r * n + j] += g[k * n + j];
                    }
                }
                vec![(*x, gx)]
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims2(*x);
                let len = node.value.cols();
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![(*x, gx)]
            }
            Op::ConcatCols(xs) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &x in xs {
                    let n = self.dims2(x).1;
                    let mut gx = Vec::with_capacity(m * n);
                    for i in 0..m {
                        gx.extend_from_slice(&g[i * total + offset..i * total + offset + n]);
                    }
                    offset += n;
                    out.push((x, gx));
                }
                out
            }
            Op::CosineRows(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, n, d) = (ta.rows(), tb.rows(), ta.cols());
                let na: Vec<f64> = ta.row_iter().map(kernels::norm).collect();
                let nb: Vec<f64> = tb.row_iter().map(kernels::norm).collect();
                let c = node.value.data();
                let mut ga = vec![0.0; m * d];
                let mut gb = vec![0.0; n * d];
                for i in 0..m {
                    let ra = ta.row(i);
                    let da = na[i].max(NORM_EPS);
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let rb = tb.row(j);
                        let db = nb[j].max(NORM_EPS);
                        let cij = c[i * n + j];
                        // d/da [a.b / (|a| |b|)] = b/(|a||b|) - c a/|a|^2 while |a| > eps;
                        // below the guard the denominator is constant.
                        let sa = if na[i] > NORM_EPS { cij / (na[i] * na[i]) } else { 0.0 };
                        let sb = if nb[j] > NORM_EPS { cij / (nb[j] * nb[j]) } else { 0.0 };
                        let inv = 1.0 / (da * db);
                        for k in 0..d {
                            ga[i * d + k] += gij * (rb[k] * inv - sa * ra[k]);
                            gb[j * d + k] += gij * (ra[k] * inv - sb * rb[k]);
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::MaxAxis { x, argmax, .. } => {
                let mut gx = vec![0.0; self.nodes[x.0].value.numel()];
                for (k, &i) in argmax.iter().enumerate() {
                    gx[i] += g[k];
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.nodes[x.0].value.numel()])],
            Op::StdRows(x) => {
                // d sigma / d x_j = (x_j - mean) / (n sigma); zero where sigma is 0
                let t = &self.nodes[x.0].value;
                let n = t.cols();
                let mut gx = Vec::with_capacity(t.numel());
                for (i, row) in t.row_iter().enumerate() {
                    let (mean, sigma) = kernels::mean_std(row);
                    for v in row {
                        gx.push(if sigma > 0.0 { g[i] * (v - mean) / (n as f64 * sigma) } else { 0.0 });
                    }
                }
                vec![(*x, gx)]
            }
            Op::LogSumExp(x) => {
                let xv = val(*x);
                let lse = node.value.item();
                vec![(*x, xv.iter().map(|v| g[0] * (v - lse).exp()).collect())]
            }
            Op::DivBySum(x) => {
                let y = node.value.data();
                let s: f64 = val(*x).iter().sum();
                let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                vec![(*x, g.iter().map(|gv| (gv - gy) / s).collect())]
            }
            Op::Stack(xs) => {
                let mut offset = 0;
                xs.iter()
                    .map(|&x| {
                        let n = self.nodes[x.0].value.numel();
                        let part = g[offset..offset + n].to_vec();
                        offset += n;
                        (x, part)
                    })
                    .collect()
            }
        }
    }
}
