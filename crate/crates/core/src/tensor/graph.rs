use super::{matmul_at_acc, matmul_bt_kernel, matmul_kernel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { input: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    SliceRows { input: Var, start: usize },
    SliceCols { input: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Define-by-run tape. Nodes are stored in creation order, which is a
/// topological order: every input precedes its consumer.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction; `causal` zeroes entries above the diagonal.
pub(crate) fn softmax_rows_kernel(x: &Tensor, causal: bool) -> Tensor {
    let (m, n) = x.shape();
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let limit = if causal { (i + 1).min(n) } else { n };
        let row = &x.row(i)[..limit];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let orow = out.row_mut(i);
        let mut sum = 0.0;
        for j in 0..limit {
            let e = (row[j] - max).exp();
            orow[j] = e;
            sum += e;
        }
        for v in &mut orow[..limit] {
            *v /= sum;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Drops every node created after the first `len`. Handles issued
    /// before that point stay valid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Adds a leaf. Trainable leaves accumulate gradients in [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} by {k2}x{n}")));
        }
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::new(m, n, data)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul_bt", format!("{m}x{k} by ({n}x{k2})ᵀ")));
        }
        let data = matmul_bt_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul_bt", Tensor::new(m, n, data)?, Op::MatMulBt(a, b), &[a, b])
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (m, n) = self.shape(a);
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(m, n, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// `a + 1·row`, broadcasting a 1×n row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(shape_err("add_row", format!("{m}x{n} plus {:?}", self.shape(row))));
        }
        let r = self.value(row).data();
        let mut v = self.value(a).clone();
        for i in 0..m {
            for (x, b) in v.row_mut(i).iter_mut().zip(r) {
                *x += b;
            }
        }
        self.push("add_row", v, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let (m, n) = self.shape(a);
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        self.push("scale", Tensor::new(m, n, data)?, Op::Scale(a, c), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let data = self.value(a).data().iter().map(|&x| sigmoid_scalar(x)).collect();
        self.push("sigmoid", Tensor::new(m, n, data)?, Op::Sigmoid(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let data = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        self.push("gelu", Tensor::new(m, n, data)?, Op::Gelu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = softmax_rows_kernel(self.value(a), false);
        self.push("softmax_rows", v, Op::Softmax(a), &[a])
    }

    /// Row softmax over columns `j <= i` only; masked entries are exactly zero.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = softmax_rows_kernel(self.value(a), true);
        self.push("causal_softmax_rows", v, Op::Softmax(a), &[a])
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(gain) != (1, n) || self.shape(bias) != (1, n) {
            return Err(shape_err("layer_norm", format!("input {m}x{n}, gain {:?}", self.shape(gain))));
        }
        if !(eps > 0.0) {
            return Err(Error::Invalid(format!("layer_norm eps must be positive, got {eps}")));
        }
        let x = self.value(a);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            let orow = out.row_mut(i);
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                orow[j] = h * g[j] + b[j];
            }
        }
        self.push("layer_norm", out, Op::LayerNorm { input: a, gain, bias, xhat, rstd }, &[a, gain, bias])
    }

    /// Mean over rows of `-log softmax(logits)[t, targets[t]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, v) = self.shape(logits);
        if targets.len() != t {
            return Err(shape_err("cross_entropy", format!("{t} logit rows, {} targets", targets.len())));
        }
        if let Some(&id) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::TargetOutOfRange { id, vocab: v });
        }
        let probs = softmax_rows_kernel(self.value(logits), false);
        let x = self.value(logits);
        let mut loss = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            let row = x.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[target];
        }
        loss /= t as f64;
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs: probs.into_data() };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Selects rows `ids` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= m) {
            return Err(shape_err("gather_rows", format!("row {bad} of a {m}-row table")));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(ids.len(), n, data)?;
        self.push("gather_rows", v, Op::Gather { table, ids: ids.to_vec() }, &[table])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, _) = self.shape(a);
        if start + len > m {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {m}", start + len)));
        }
        let v = self.value(a).slice_rows(start, len);
        self.push("slice_rows", v, Op::SliceRows { input: a, start }, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start + len > n {
            return Err(shape_err("slice_cols", format!("cols {start}..{} of {n}", start + len)));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let v = Tensor::new(m, len, data)?;
        self.push("slice_cols", v, Op::SliceCols { input: a, start }, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map(|&p| self.shape(p).1).ok_or_else(|| shape_err("concat_rows", "no parts".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, c) = self.shape(p);
            if c != n {
                return Err(shape_err("concat_rows", format!("{c} columns, expected {n}")));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(rows, n, data)?;
        self.push("concat_rows", v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map(|&p| self.shape(p).0).ok_or_else(|| shape_err("concat_cols", "no parts".into()))?;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != m) {
            return Err(shape_err("concat_cols", format!("{} rows, expected {m}", self.shape(bad).0)));
        }
        let n: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::new(m, n, data)?;
        self.push("concat_cols", v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum::<f64>();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Reverse sweep from a scalar `loss`. Gradients of trainable leaves are
    /// added to whatever they already hold, so two sweeps without
    /// [`Graph::zero_grad`] double them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                let (m, n) = node.value.shape();
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(m, n, g)?),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (m, n) = node.value.shape();
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (_, k) = self.shape(*a);
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let da = matmul_bt_kernel(g, self.value(*b).data(), m, n, k);
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    matmul_at_acc(self.value(*a).data(), g, m, k, n, &mut db);
                    accumulate(grads, *b, db);
                }
            }
            Op::MatMulBt(a, b) => {
                let (_, k) = self.shape(*a);
                if self.wants(*a) {
                    // dA = G · B
                    let da = matmul_kernel(g, self.value(*b).data(), m, n, k);
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    // dB = Gᵀ · A
                    let mut db = vec![0.0; n * k];
                    matmul_at_acc(g, self.value(*a).data(), m, n, k, &mut db);
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*row) {
                    let mut d = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            d[j] += g[r * n + j];
                        }
                    }
                    accumulate(grads, *row, d);
                }
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|x| x * c).collect()),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
                accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let d = g.iter().zip(x).map(|(gi, xi)| gi * gelu_grad(*xi)).collect();
                accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        d[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::LayerNorm { input, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let mut d = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            d[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                    accumulate(grads, *gain, d);
                }
                if self.wants(*bias) {
                    let mut d = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            d[j] += g[r * n + j];
                        }
                    }
                    accumulate(grads, *bias, d);
                }
                if self.wants(*input) {
                    let mut d = vec![0.0; m * n];
                    let nf = n as f64;
                    for r in 0..m {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            let dh = g[r * n + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * n + j];
                        }
                        mean_dh /= nf;
                        mean_dh_h /= nf;
                        for j in 0..n {
                            let dh = g[r * n + j] * gv[j];
                            d[r * n + j] = rstd[r] * (dh - mean_dh - xhat[r * n + j] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *input, d);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (t, v) = self.shape(*logits);
                let scale = g[0] / t as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &target) in targets.iter().enumerate() {
                    d[r * v + target] -= scale;
                }
                accumulate(grads, *logits, d);
            }
            Op::Gather { table, ids } => {
                let (tm, tn) = self.shape(*table);
                let mut d = vec![0.0; tm * tn];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..tn {
                        d[id * tn + j] += g[r * tn + j];
                    }
                }
                accumulate(grads, *table, d);
            }
            Op::SliceRows { input, start } => {
                let (im, inn) = self.shape(*input);
                let mut d = vec![0.0; im * inn];
                d[start * inn..(start + m) * inn].copy_from_slice(g);
                accumulate(grads, *input, d);
            }
            Op::SliceCols { input, start } => {
                let (im, inn) = self.shape(*input);
                let mut d = vec![0.0; im * inn];
                for r in 0..m {
                    d[r * inn + start..r * inn + start + n].copy_from_slice(&g[r * n..(r + 1) * n]);
                }
                accumulate(grads, *input, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        accumulate(grads, p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let (_, pn) = self.shape(p);
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(m * pn);
                        for r in 0..m {
                            d.extend_from_slice(&g[r * n + col..r * n + col + pn]);
                        }
                        accumulate(grads, p, d);
                    }
                    col += pn;
                }
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                accumulate(grads, *a, vec![g[0]; len]);
            }
            Op::Mean(a) => {
                let len = self.value(*a).len();
                accumulate(grads, *a, vec![g[0] / len as f64; len]);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity_and_permutation() {
        let mut g = Graph::new();
        let a = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = g.constant(Tensor::identity(2));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c), &t(&[&[1.0, 2.0], &[3.0, 4.0]]));

        let e = g.constant(t(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let p = g.constant(t(&[&[0.0, 1.0], &[1.0, 0.0]]));
        let c = g.matmul(e, p).unwrap();
        assert_eq!(g.value(c), &t(&[&[0.0, 1.0], &[0.0, 0.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(1);
        let a = Tensor::randn(3, 4, 1.0, &mut rng);
        let b = Tensor::randn(4, 2, 1.0, &mut rng);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((g.value(c).get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[0.0, 0.0], &[1000.0, 0.0]]));
        let y = g.softmax_rows(x).unwrap();
        let y = g.value(y);
        assert_eq!(y.row(0), &[0.5, 0.5]);
        assert!((y.get(1, 0) - 1.0).abs() < 1e-15 && y.get(1, 1) < 1e-300 + 1e-15);

        let x = g.constant(t(&[&[1.0, 2.0, 3.0]]));
        let y = g.softmax_rows(x).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for j in 0..3 {
            assert!((g.value(y).get(0, j) - ((j + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(3, 3, 0.3));
        let y = g.causal_softmax_rows(x).unwrap();
        let y = g.value(y);
        assert_eq!(y.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(y.get(1, 2), 0.0);
        assert!((y.get(2, 0) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[0.0, 2.0, -2.0, 40.0, -40.0]]));
        let y = g.sigmoid(x).unwrap();
        let y = g.value(y);
        assert_eq!(y.get(0, 0), 0.5);
        assert!((y.get(0, 1) - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        assert!((y.get(0, 1) + y.get(0, 2) - 1.0).abs() < 1e-15);
        assert!(y.get(0, 4) > 0.0 && y.get(0, 4) < 1.0);
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::full(1, 2, 1.0));
        let bias = g.constant(Tensor::zeros(1, 2));
        let x = g.constant(t(&[&[3.0, 3.0], &[-1.0, 1.0]]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let y = g.value(y);
        assert_eq!(y.row(0), &[0.0, 0.0]);
        assert!((y.get(1, 0) + 1.0).abs() < 1e-5 && (y.get(1, 1) - 1.0).abs() < 1e-5);

        let mut g2 = Graph::new();
        let x = g2.constant(Tensor::zeros(1, 2));
        let gain = g2.constant(Tensor::full(1, 2, 1.0));
        let bias = g2.constant(Tensor::zeros(1, 2));
        assert!(g2.layer_norm(x, gain, bias, 0.0).is_err());
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = Rng::new(2);
        let x = Tensor::randn(1, 7, 2.0, &mut rng);
        let gain = Tensor::randn(1, 7, 1.0, &mut rng);
        let bias = Tensor::randn(1, 7, 1.0, &mut rng);
        let mut g = Graph::new();
        let (vx, vg, vb) = (g.constant(x.clone()), g.constant(gain.clone()), g.constant(bias.clone()));
        let y = g.layer_norm(vx, vg, vb, 1e-5).unwrap();
        let mean = x.data().iter().sum::<f64>() / 7.0;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        for j in 0..7 {
            let want = (x.get(0, j) - mean) / (var + 1e-5).sqrt() * gain.get(0, j) + bias.get(0, j);
            assert!((g.value(y).get(0, j) - want).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::new();
        let logits = g.constant(t(&[&[1000.0, 0.0, 0.0]]));
        let l = g.cross_entropy(logits, &[0]).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);

        let logits = g.constant(Tensor::zeros(3, 4));
        let l = g.cross_entropy(logits, &[0, 1, 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);

        assert!(matches!(g.cross_entropy(logits, &[0, 1, 4]), Err(Error::TargetOutOfRange { id: 4, vocab: 4 })));
    }

    #[test]
    fn cross_entropy_matches_oracle() {
        let mut rng = Rng::new(9);
        let x = Tensor::randn(2, 3, 1.5, &mut rng);
        let targets = [2usize, 0];
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let l = g.cross_entropy(v, &targets).unwrap();
        let mut want = 0.0;
        for (r, &tg) in targets.iter().enumerate() {
            let z: f64 = x.row(r).iter().map(|v| v.exp()).sum();
            want -= (x.get(r, tg).exp() / z).ln();
        }
        want /= 2.0;
        assert!((g.value(l).item() - want).abs() < 1e-10);
    }

    #[test]
    fn backward_simple_rules() {
        let mut g = Graph::new();
        let x = g.param(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &Tensor::full(2, 2, 1.0));

        let mut g = Graph::new();
        let x = g.param(t(&[&[1.0, 2.0]]));
        let y = g.param(t(&[&[5.0, -3.0]]));
        let p = g.mul(x, y).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &t(&[&[5.0, -3.0]]));
        assert_eq!(g.grad(y).unwrap(), &t(&[&[1.0, 2.0]]));
    }

    #[test]
    fn backward_twice_doubles() {
        let mut g = Graph::new();
        let x = g.param(t(&[&[0.3, -0.7]]));
        let y = g.sigmoid(x).unwrap();
        let z = g.mul(y, x).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s).unwrap();
        let first = g.grad(x).unwrap().clone();
        g.backward(s).unwrap();
        let second = g.grad(x).unwrap();
        for (a, b) in first.data().iter().zip(second.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(2, 2));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss { rows: 2, cols: 2 })));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(1, 1, f64::MAX));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite("scale"))));
    }

    #[test]
    fn frozen_inputs_get_no_grad() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::full(2, 2, 1.0));
        let x = g.param(Tensor::full(1, 2, 1.0));
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(x).unwrap(), &Tensor::full(1, 2, 2.0));
    }
}
