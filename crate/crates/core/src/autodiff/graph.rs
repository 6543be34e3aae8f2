//! Tape of tensor operations with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so the tape is already
//! topologically sorted; `backward` walks it once from the end.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    MeanOverRows(NodeId),
    Square(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    ShiftedSoftplus(NodeId),
    Softplus(NodeId),
    LogSoftmaxRows(NodeId),
    NormalizeRows(NodeId),
    GatherRows(NodeId, Vec<usize>),
    ScatterAddRows(NodeId, Vec<usize>),
    Rbf {
        input: NodeId,
        centers: Vec<f64>,
        gamma: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `ln(1 + t)` for `t ∈ [0, 1]` to within a few ulps, via one `ln`.
fn ln_1p_unit(t: f64) -> f64 {
    let u = 1.0 + t;
    if u == 1.0 {
        t
    } else {
        u.ln() * t / (u - 1.0)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + ln_1p_unit((-x.abs()).exp())
}

/// `ln(0.5·e^x + 0.5)`, zero at the origin.
pub fn shifted_softplus(x: f64) -> f64 {
    softplus(x) - std::f64::consts::LN_2
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const NORM_FLOOR: f64 = 1e-12;

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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(what.to_string()));
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn matrix_dims(&self, a: NodeId, what: &str) -> Result<(usize, usize)> {
        match *self.shape(a) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(format!("{what} expects a matrix, got {s:?}"))),
        }
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, what: &str, op: Op, f: fn(f64, f64) -> f64) -> Result<NodeId> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, op, what, &[a, b])
    }

    fn unary(&mut self, a: NodeId, what: &str, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let out = self.value(a).map(f);
        self.push(out, op, what, &[a])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    /// Adds a length-`m` vector to every row of an `n×m` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, m) = self.matrix_dims(x, "add_bias")?;
        if self.shape(bias) != [m] {
            return Err(Error::shape(format!(
                "add_bias: bias {:?} for {m} columns",
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(m) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        self.push(out, Op::AddBias(x, bias), "add_bias", &[x, bias])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(a, "scale", Op::Scale(a, c), |x| c * x)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul: {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), "matmul", &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.matrix_dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), "transpose", &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push(out, Op::Reshape(a), "reshape", &[a])
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} on rank {}", base.len())));
        }
        let mut axis_total = 0;
        for &i in inputs {
            let s = self.shape(i);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape(format!("concat: {s:?} vs {base:?} on axis {axis}")));
            }
            axis_total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &i in inputs {
                let chunk = self.shape(i)[axis] * inner;
                out.extend_from_slice(&self.value(i).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_total;
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        self.push(Tensor::new(shape, out)?, op, "concat", inputs)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum", &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::Degenerate("mean of an empty tensor".into()));
        }
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), "mean", &[a])
    }

    /// `n×m → n`: sums each row.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = self.matrix_dims(a, "sum_rows")?;
        let v = self.value(a);
        let out = (0..n).map(|r| v.data()[r * m..(r + 1) * m].iter().sum()).collect();
        self.push(Tensor::vector(out), Op::SumRows(a), "sum_rows", &[a])
    }

    /// `n×m → m`: column means.
    pub fn mean_over_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = self.matrix_dims(a, "mean_over_rows")?;
        if n == 0 {
            return Err(Error::Degenerate("mean over zero rows".into()));
        }
        let v = self.value(a);
        let mut out = vec![0.0; m];
        for row in v.data().chunks(m) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        self.push(Tensor::vector(out), Op::MeanOverRows(a), "mean_over_rows", &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "square", Op::Square(a), |x| x * x)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "exp", Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "ln", Op::Ln(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "sqrt", Op::Sqrt(a), f64::sqrt)
    }

    pub fn shifted_softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "shifted_softplus", Op::ShiftedSoftplus(a), shifted_softplus)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "softplus", Op::Softplus(a), softplus)
    }

    /// Row-wise `x − logsumexp(x)`.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, m) = self.matrix_dims(a, "log_softmax_rows")?;
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(m) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(out, Op::LogSoftmaxRows(a), "log_softmax_rows", &[a])
    }

    /// Scales each row to unit Euclidean length.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, m) = self.matrix_dims(a, "normalize_rows")?;
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(m) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
            row.iter_mut().for_each(|x| *x /= norm);
        }
        self.push(out, Op::NormalizeRows(a), "normalize_rows", &[a])
    }

    /// Selects leading-dimension rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: NodeId, index: &[usize]) -> Result<NodeId> {
        let v = self.value(a);
        let (n, w) = (v.rows(), v.row_width());
        if v.rank() == 0 {
            return Err(Error::shape("gather_rows on a scalar"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape(format!("gather index {bad} out of {n} rows")));
        }
        let mut out = Vec::with_capacity(index.len() * w);
        for &i in index {
            out.extend_from_slice(&v.data()[i * w..(i + 1) * w]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = index.len();
        let op = Op::GatherRows(a, index.to_vec());
        self.push(Tensor::new(shape, out)?, op, "gather_rows", &[a])
    }

    /// Sums row `k` of `a` into output row `index[k]`; output has `rows` rows.
    pub fn scatter_add_rows(&mut self, a: NodeId, index: &[usize], rows: usize) -> Result<NodeId> {
        let v = self.value(a);
        if v.rank() == 0 || v.rows() != index.len() {
            return Err(Error::shape(format!(
                "scatter_add_rows: {:?} with {} indices",
                v.shape(),
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!("scatter index {bad} out of {rows} rows")));
        }
        let w = v.row_width();
        let mut out = vec![0.0; rows * w];
        for (k, &dst) in index.iter().enumerate() {
            for (o, x) in out[dst * w..(dst + 1) * w]
                .iter_mut()
                .zip(&v.data()[k * w..(k + 1) * w])
            {
                *o += x;
            }
        }
        let mut shape = v.shape().to_vec();
        shape[0] = rows;
        let op = Op::ScatterAddRows(a, index.to_vec());
        self.push(Tensor::new(shape, out)?, op, "scatter_add_rows", &[a])
    }

    /// Gaussian radial basis expansion `exp(−γ(x − μ_k)²)`: `p → p×K`.
    pub fn rbf(&mut self, a: NodeId, centers: &[f64], gamma: f64) -> Result<NodeId> {
        let v = self.value(a);
        if v.rank() != 1 {
            return Err(Error::shape(format!("rbf expects a vector, got {:?}", v.shape())));
        }
        let k = centers.len();
        let mut out = Vec::with_capacity(v.len() * k);
        for &x in v.data() {
            out.extend(centers.iter().map(|mu| (-gamma * (x - mu) * (x - mu)).exp()));
        }
        let op = Op::Rbf {
            input: a,
            centers: centers.to_vec(),
            gamma,
        };
        self.push(Tensor::new(vec![v.len(), k], out)?, op, "rbf", &[a])
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.constant(v)
    }

    /// Reverse-mode gradients of a one-element `output` with respect to
    /// every node on the tape.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite("backward".into()));
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, self.wants(*a), || g.clone());
                accumulate(grads, *b, self.wants(*b), || g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, self.wants(*a), || g.clone());
                accumulate(grads, *b, self.wants(*b), || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                accumulate(grads, *a, self.wants(*a), || zip(g, vb, |gv, x| gv * x));
                accumulate(grads, *b, self.wants(*b), || zip(g, va, |gv, x| gv * x));
            }
            Op::Div(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                accumulate(grads, *a, self.wants(*a), || zip(g, vb, |gv, y| gv / y));
                accumulate(grads, *b, self.wants(*b), || {
                    zip(&zip(g, va, |gv, x| gv * x), vb, |t, y| -t / (y * y))
                });
            }
            Op::AddBias(x, bias) => {
                accumulate(grads, *x, self.wants(*x), || g.clone());
                accumulate(grads, *bias, self.wants(*bias), || {
                    let m = self.value(*bias).len();
                    let mut gb = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    Tensor::vector(gb)
                });
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, self.wants(*a), || g.map(|v| c * v));
            }
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                accumulate(grads, *a, self.wants(*a), || {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), true, &mut ga, false);
                    Tensor::new(vec![m, k], ga).expect("shape")
                });
                accumulate(grads, *b, self.wants(*b), || {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, g.data(), false, &mut gb, false);
                    Tensor::new(vec![k, n], gb).expect("shape")
                });
            }
            Op::Transpose(a) => {
                accumulate(grads, *a, self.wants(*a), || {
                    let (r, c) = (g.shape()[0], g.shape()[1]);
                    let mut out = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            out[j * r + i] = g.data()[i * c + j];
                        }
                    }
                    Tensor::new(vec![c, r], out).expect("shape")
                });
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                accumulate(grads, *a, self.wants(*a), || {
                    g.clone().reshaped(shape).expect("reshape keeps length")
                });
            }
            Op::Concat { inputs, axis } => {
                let base = self.shape(inputs[0]);
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let total = y.shape()[*axis] * inner;
                let mut offset = 0;
                for &i in inputs {
                    let chunk = self.shape(i)[*axis] * inner;
                    accumulate(grads, i, self.wants(i), || {
                        let mut out = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let start = o * total + offset;
                            out.extend_from_slice(&g.data()[start..start + chunk]);
                        }
                        Tensor::new(self.shape(i).to_vec(), out).expect("shape")
                    });
                    offset += chunk;
                }
            }
            Op::Sum(a) => {
                accumulate(grads, *a, self.wants(*a), || Tensor::full(self.shape(*a), g.item()));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                accumulate(grads, *a, self.wants(*a), || Tensor::full(self.shape(*a), g.item() / n));
            }
            Op::SumRows(a) => {
                accumulate(grads, *a, self.wants(*a), || {
                    let m = self.shape(*a)[1];
                    let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, m)).collect();
                    Tensor::new(self.shape(*a).to_vec(), data).expect("shape")
                });
            }
            Op::MeanOverRows(a) => {
                accumulate(grads, *a, self.wants(*a), || {
                    let n = self.shape(*a)[0];
                    let scaled: Vec<f64> = g.data().iter().map(|v| v / n as f64).collect();
                    let data = (0..n).flat_map(|_| scaled.iter().copied()).collect();
                    Tensor::new(self.shape(*a).to_vec(), data).expect("shape")
                });
            }
            Op::Square(a) => {
                let va = self.value(*a);
                accumulate(grads, *a, self.wants(*a), || zip(g, va, |gv, x| 2.0 * x * gv));
            }
            Op::Exp(a) => {
                accumulate(grads, *a, self.wants(*a), || zip(g, y, |gv, e| gv * e));
            }
            Op::Ln(a) => {
                let va = self.value(*a);
                accumulate(grads, *a, self.wants(*a), || zip(g, va, |gv, x| gv / x));
            }
            Op::Sqrt(a) => {
                accumulate(grads, *a, self.wants(*a), || zip(g, y, |gv, s| gv / (2.0 * s)));
            }
            Op::ShiftedSoftplus(a) | Op::Softplus(a) => {
                let va = self.value(*a);
                accumulate(grads, *a, self.wants(*a), || zip(g, va, |gv, x| gv * sigmoid(x)));
            }
            Op::LogSoftmaxRows(a) => {
                accumulate(grads, *a, self.wants(*a), || {
                    let m = y.shape()[1];
                    let mut out = g.clone();
                    for (orow, (grow, yrow)) in out
                        .data_mut()
                        .chunks_mut(m)
                        .zip(g.data().chunks(m).zip(y.data().chunks(m)))
                    {
                        let gsum: f64 = grow.iter().sum();
                        for (o, yv) in orow.iter_mut().zip(yrow) {
                            *o -= yv.exp() * gsum;
                        }
                    }
                    out
                });
            }
            Op::NormalizeRows(a) => {
                let va = self.value(*a);
                accumulate(grads, *a, self.wants(*a), || {
                    let m = y.shape()[1];
                    let mut out = Vec::with_capacity(g.len());
                    for ((grow, yrow), xrow) in g.data().chunks(m).zip(y.data().chunks(m)).zip(va.data().chunks(m)) {
                        let norm = xrow.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        out.extend(grow.iter().zip(yrow).map(|(gv, yv)| (gv - yv * dot) / norm));
                    }
                    Tensor::new(va.shape().to_vec(), out).expect("shape")
                });
            }
            Op::GatherRows(a, index) => {
                accumulate(grads, *a, self.wants(*a), || {
                    let mut out = Tensor::zeros(self.shape(*a));
                    let w = out.row_width();
                    let od = out.data_mut();
                    for (k, &src) in index.iter().enumerate() {
                        for (o, v) in od[src * w..(src + 1) * w].iter_mut().zip(&g.data()[k * w..(k + 1) * w]) {
                            *o += v;
                        }
                    }
                    out
                });
            }
            Op::ScatterAddRows(a, index) => {
                accumulate(grads, *a, self.wants(*a), || {
                    let w = g.row_width();
                    let mut out = Vec::with_capacity(index.len() * w);
                    for &dst in index {
                        out.extend_from_slice(&g.data()[dst * w..(dst + 1) * w]);
                    }
                    Tensor::new(self.shape(*a).to_vec(), out).expect("shape")
                });
            }
            Op::Rbf { input, centers, gamma } => {
                let va = self.value(*input);
                accumulate(grads, *input, self.wants(*input), || {
                    let k = centers.len();
                    let out = va
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(p, &x)| {
                            (0..k)
                                .map(|c| {
                                    let r = p * k + c;
                                    g.data()[r] * y.data()[r] * (-2.0 * gamma * (x - centers[c]))
                                })
                                .sum()
                        })
                        .collect();
                    Tensor::vector(out)
                });
            }
        }
        Ok(())
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn accumulate(grads: &mut [Option<Tensor>], target: NodeId, wanted: bool, contribution: impl FnOnce() -> Tensor) {
    if !wanted {
        return;
    }
    let c = contribution();
    match &mut grads[target.0] {
        Some(existing) => existing.add_assign(&c),
        slot => *slot = Some(c),
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a node, if the output depends on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of a node, zero-filled when the output does not reach it.
    pub fn wrt(&self, graph: &Graph, id: NodeId) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(id)))
    }
}
