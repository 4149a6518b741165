//! Reverse-mode tape over dense tensors.
//!
//! Every operation appends a node holding its forward value and the handles of
//! its inputs. `backward` walks the tape once in reverse order, which is a valid
//! reverse topological order because inputs always precede their consumers.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Guard added under the square root of the sample variance in `std`.
pub const STD_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `[.., n] + [n]`
    AddRow(Var, Var),
    /// tensor times a one-element tensor
    MulScalar(Var, Var),
    /// tensor plus a one-element tensor
    AddScalar(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var, [usize; 3]),
    Bmm(Var, Var, [usize; 4]),
    Sum(Var),
    Mean(Var),
    Std(Var),
    SumLast(Var),
    Prod(Var),
    Relu(Var),
    Abs(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Softmax(Var),
    Reshape(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Concat(Vec<Var>),
    PairwiseDiff(Var),
    RepeatRows(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    is_param: bool,
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a parameter leaf; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    /// Allows `backward` to be called again on this tape.
    pub fn reset(&mut self) {
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("constant"));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            is_param: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("param"));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            is_param: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn is_scalar(&self, s: Var, op: &str) -> Result<()> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape(format!("{op}: expected a one-element tensor, got {:?}", self.shape(s))));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        name: &'static str,
    ) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, op, &[a, b], name)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&p| f(p)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, op, &[a], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p + q, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p - q, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p * q, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        if self.value(b).data().iter().any(|&q| q == 0.0) {
            return Err(Error::Domain {
                op: "div",
                message: "division by zero".into(),
            });
        }
        self.binary(a, b, |p, q| p / q, Op::Div(a, b), "div")
    }

    /// Adds a length-`n` vector to every row of a `[.., n]` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.shape(row) != [n] {
            return Err(Error::Shape(format!(
                "add_row: {:?} + {:?}",
                self.shape(a),
                self.shape(row)
            )));
        }
        let (x, r) = (self.value(a), self.value(row));
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(k, &p)| p + r.data()[k % n])
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::AddRow(a, row), &[a, row], "add_row")
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.is_scalar(s, "mul_scalar")?;
        let k = self.value(s).item();
        let op = Op::MulScalar(a, s);
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|p| p * k).collect())?;
        self.push(out, op, &[a, s], "mul_scalar")
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.is_scalar(s, "add_scalar")?;
        let k = self.value(s).item();
        let op = Op::AddScalar(a, s);
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|p| p + k).collect())?;
        self.push(out, op, &[a, s], "add_scalar")
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, |p| p * k, Op::Scale(a, k), "scale")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Adds a constant.
    pub fn shift(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, |p| p + k, Op::Shift(a), "shift")
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push(t, Op::MatMul(a, b, [m, k, n]), &[a, b], "matmul")
    }

    /// Batched matmul `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape(format!("bmm: {sa:?} x {sb:?}")));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bt * m * n];
        let (x, y) = (self.value(a).data(), self.value(b).data());
        for g in 0..bt {
            matmul_into(
                &x[g * m * k..(g + 1) * m * k],
                &y[g * k * n..(g + 1) * k * n],
                &mut out[g * m * n..(g + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor::new(vec![bt, m, n], out)?;
        self.push(t, Op::Bmm(a, b, [bt, m, k, n]), &[a, b], "bmm")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a], "mean")
    }

    /// Sample standard deviation (divisor `n - 1`) over all entries,
    /// `sqrt(var + STD_EPS)`.
    pub fn std(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = x.len();
        if n < 2 {
            return Err(Error::InvalidArgument("std needs at least 2 values".into()));
        }
        let m = x.data().iter().sum::<f64>() / n as f64;
        let var = x.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
        self.push(Tensor::scalar((var + STD_EPS).sqrt()), Op::Std(a), &[a], "std")
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let data: Vec<f64> = x.data().chunks(c.max(1)).map(|r| r.iter().sum()).collect();
        let shape = if x.shape().len() > 1 {
            x.shape()[..x.shape().len() - 1].to_vec()
        } else {
            vec![1]
        };
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::SumLast(a), &[a], "sum_last")
    }

    /// Product of all entries.
    pub fn prod(&mut self, a: Var) -> Result<Var> {
        let p = self.value(a).data().iter().product();
        self.push(Tensor::scalar(p), Op::Prod(a), &[a], "prod")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |p| p.max(0.0), Op::Relu(a), "relu")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::abs, Op::Abs(a), "abs")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(p) = self.value(a).data().iter().find(|&&p| p <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                message: format!("non-positive input {p}"),
            });
        }
        self.unary(a, f64::ln, Op::Log(a), "log")
    }

    /// Square root; zero inputs are allowed and get a zero subgradient.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(p) = self.value(a).data().iter().find(|&&p| p < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                message: format!("negative input {p}"),
            });
        }
        self.unary(a, f64::sqrt, Op::Sqrt(a), "sqrt")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a), "tanh")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, softplus, Op::Softplus(a), "softplus")
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut data = Vec::with_capacity(x.len());
        for row in x.data().chunks(c.max(1)) {
            data.extend(crate::simplex::softmax(row));
        }
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.push(t, Op::Softmax(a), &[a], "softmax")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if shape.iter().product::<usize>() != x.len() {
            return Err(Error::Shape(format!("reshape {:?} -> {shape:?}", x.shape())));
        }
        let t = x.clone().with_shape(shape.to_vec());
        self.push(t, Op::Reshape(a), &[a], "reshape")
    }

    /// Rows `[start, end)` along the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let s = x.shape();
        if s.is_empty() || start > end || end > s[0] {
            return Err(Error::Shape(format!("slice_rows {start}..{end} of {s:?}")));
        }
        let inner: usize = s[1..].iter().product();
        let data = x.data()[start * inner..end * inner].to_vec();
        let mut shape = s.to_vec();
        shape[0] = end - start;
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::SliceRows(a, start), &[a], "slice_rows")
    }

    /// Columns `[start, end)` along the last axis.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        if start > end || end > c {
            return Err(Error::Shape(format!("slice_cols {start}..{end} of {:?}", x.shape())));
        }
        let mut data = Vec::with_capacity(x.rows() * (end - start));
        for row in x.data().chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = end - start;
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::SliceCols(a, start), &[a], "slice_cols")
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::Shape(format!("concat: {s:?} vs [_, {tail:?}]")));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::Concat(parts.to_vec()), parts, "concat")
    }

    /// `[T, n] -> [T, n, n]` with `out[t, i, j] = x[t, i] - x[t, j]`.
    pub fn pairwise_diff(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = x.cols();
        let rows = x.rows();
        let mut data = Vec::with_capacity(rows * n * n);
        for row in x.data().chunks(n.max(1)) {
            for i in 0..n {
                for j in 0..n {
                    data.push(row[i] - row[j]);
                }
            }
        }
        let t = Tensor::new(vec![rows, n, n], data)?;
        self.push(t, Op::PairwiseDiff(a), &[a], "pairwise_diff")
    }

    /// `[T, d] -> [T * n, d]`, each row repeated `n` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut data = Vec::with_capacity(x.len() * n);
        for row in x.data().chunks(c.max(1)) {
            for _ in 0..n {
                data.extend_from_slice(row);
            }
        }
        let t = Tensor::new(vec![x.rows() * n, c], data)?;
        self.push(t, Op::RepeatRows(a, n), &[a], "repeat_rows")
    }

    /// Reverse pass from a one-element loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                node.is_param.then(|| {
                    let shape = node.value.shape().to_vec();
                    match g {
                        Some(g) => Tensor::new(shape, g).expect("gradient shape"),
                        None => Tensor::zeros(&shape),
                    }
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = nodes[idx].value.data();
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let elementwise = |dst: &mut [f64], h: &dyn Fn(usize) -> f64| {
            for (k, d) in dst.iter_mut().enumerate() {
                *d += h(k);
            }
        };

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|d| elementwise(d, &|k| g[k]));
                acc(*b, &|d| elementwise(d, &|k| g[k]));
            }
            Op::Sub(a, b) => {
                acc(*a, &|d| elementwise(d, &|k| g[k]));
                acc(*b, &|d| elementwise(d, &|k| -g[k]));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, &|d| elementwise(d, &|k| g[k] * y[k]));
                acc(*b, &|d| elementwise(d, &|k| g[k] * x[k]));
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, &|d| elementwise(d, &|k| g[k] / y[k]));
                acc(*b, &|d| elementwise(d, &|k| -g[k] * x[k] / (y[k] * y[k])));
            }
            Op::AddRow(a, r) => {
                let n = nodes[r.0].value.len();
                acc(*a, &|d| elementwise(d, &|k| g[k]));
                acc(*r, &|d| {
                    for (k, gk) in g.iter().enumerate() {
                        d[k % n] += gk;
                    }
                });
            }
            Op::MulScalar(a, s) => {
                let x = val(*a);
                let k0 = val(*s)[0];
                acc(*a, &|d| elementwise(d, &|k| g[k] * k0));
                acc(*s, &|d| d[0] += g.iter().zip(x).map(|(p, q)| p * q).sum::<f64>());
            }
            Op::AddScalar(a, s) => {
                acc(*a, &|d| elementwise(d, &|k| g[k]));
                acc(*s, &|d| d[0] += g.iter().sum::<f64>());
            }
            Op::Scale(a, c) => acc(*a, &|d| elementwise(d, &|k| g[k] * c)),
            Op::Shift(a) | Op::Reshape(a) => acc(*a, &|d| elementwise(d, &|k| g[k])),
            Op::MatMul(a, b, [m, k, n]) => {
                let (m, k, n) = (*m, *k, *n);
                let (x, y) = (val(*a), val(*b));
                acc(*a, &|d| matmul_nt_acc(g, y, d, m, n, k));
                acc(*b, &|d| matmul_tn_acc(x, g, d, m, k, n));
            }
            Op::Bmm(a, b, [bt, m, k, n]) => {
                let (bt, m, k, n) = (*bt, *m, *k, *n);
                let (x, y) = (val(*a), val(*b));
                acc(*a, &|d| {
                    for t in 0..bt {
                        matmul_nt_acc(
                            &g[t * m * n..(t + 1) * m * n],
                            &y[t * k * n..(t + 1) * k * n],
                            &mut d[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(*b, &|d| {
                    for t in 0..bt {
                        matmul_tn_acc(
                            &x[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut d[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &|d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::Std(a) => {
                let x = val(*a);
                let n = x.len();
                let m = x.iter().sum::<f64>() / n as f64;
                let s = out[0];
                acc(*a, &|d| elementwise(d, &|k| g[0] * (x[k] - m) / ((n - 1) as f64 * s)));
            }
            Op::SumLast(a) => {
                let c = nodes[a.0].value.cols().max(1);
                acc(*a, &|d| elementwise(d, &|k| g[k / c]));
            }
            Op::Prod(a) => {
                let x = val(*a);
                let n = x.len();
                // product of all other entries via prefix and suffix products
                let mut prefix = vec![1.0; n + 1];
                for k in 0..n {
                    prefix[k + 1] = prefix[k] * x[k];
                }
                let mut suffix = vec![1.0; n + 1];
                for k in (0..n).rev() {
                    suffix[k] = suffix[k + 1] * x[k];
                }
                acc(*a, &|d| elementwise(d, &|k| g[0] * prefix[k] * suffix[k + 1]));
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &|d| elementwise(d, &|k| if x[k] > 0.0 { g[k] } else { 0.0 }));
            }
            Op::Abs(a) => {
                let x = val(*a);
                acc(*a, &|d| {
                    elementwise(d, &|k| {
                        if x[k] > 0.0 {
                            g[k]
                        } else if x[k] < 0.0 {
                            -g[k]
                        } else {
                            0.0
                        }
                    })
                });
            }
            Op::Exp(a) => acc(*a, &|d| elementwise(d, &|k| g[k] * out[k])),
            Op::Log(a) => {
                let x = val(*a);
                acc(*a, &|d| elementwise(d, &|k| g[k] / x[k]));
            }
            Op::Sqrt(a) => acc(*a, &|d| {
                elementwise(d, &|k| if out[k] > 0.0 { g[k] * 0.5 / out[k] } else { 0.0 })
            }),
            Op::Sigmoid(a) => acc(*a, &|d| elementwise(d, &|k| g[k] * out[k] * (1.0 - out[k]))),
            Op::Tanh(a) => acc(*a, &|d| elementwise(d, &|k| g[k] * (1.0 - out[k] * out[k]))),
            Op::Softplus(a) => {
                let x = val(*a);
                acc(*a, &|d| elementwise(d, &|k| g[k] * sigmoid(x[k])));
            }
            Op::Softmax(a) => {
                let c = nodes[a.0].value.cols().max(1);
                acc(*a, &|d| {
                    for r in 0..out.len() / c {
                        let ys = &out[r * c..(r + 1) * c];
                        let gs = &g[r * c..(r + 1) * c];
                        let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            d[r * c + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let s = nodes[a.0].value.shape();
                let inner: usize = s[1..].iter().product();
                let off = start * inner;
                acc(*a, &|d| {
                    for (k, gk) in g.iter().enumerate() {
                        d[off + k] += gk;
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let c = nodes[a.0].value.cols();
                let w = nodes[idx].value.cols();
                acc(*a, &|d| {
                    for (r, gr) in g.chunks(w.max(1)).enumerate() {
                        for (j, gj) in gr.iter().enumerate() {
                            d[r * c + start + j] += gj;
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    let o = off;
                    acc(*p, &|d| elementwise(d, &|k| g[o + k]));
                    off += len;
                }
            }
            Op::PairwiseDiff(a) => {
                let n = nodes[a.0].value.cols();
                acc(*a, &|d| {
                    for r in 0..d.len() / n.max(1) {
                        let base = r * n * n;
                        for i in 0..n {
                            for j in 0..n {
                                let gij = g[base + i * n + j];
                                d[r * n + i] += gij;
                                d[r * n + j] -= gij;
                            }
                        }
                    }
                });
            }
            Op::RepeatRows(a, n) => {
                let c = nodes[a.0].value.cols().max(1);
                acc(*a, &|d| {
                    for (k, gk) in g.iter().enumerate() {
                        let out_row = k / c;
                        d[(out_row / n) * c + k % c] += gk;
                    }
                });
            }
        }
    }
}

/// `out += a[m,k] * b[k,n]` (out is overwritten when freshly zeroed).
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `d[m,k] += g[m,n] * b[k,n]^T`
fn matmul_nt_acc(g: &[f64], b: &[f64], d: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            d[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `d[k,n] += a[m,k]^T * g[m,n]`
fn matmul_tn_acc(a: &[f64], g: &[f64], d: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let drow = &mut d[p * n..(p + 1) * n];
            for (o, gv) in drow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}
