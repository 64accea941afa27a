//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the ids of its
//! inputs. Nodes are appended in evaluation order, so walking the tape from the
//! end backwards visits every node after all of its consumers.

use super::tensor::{matmul_kernel, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Affine(Var, f64),
    Sum(Var),
    MeanRows(Var),
    SumCols(Var),
    Transpose(Var),
    ConcatCols(Var, Var),
    Diag(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    ClampMin(Var, f64),
    SoftmaxRows(Var),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape with persistent gradient accumulators.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// Drops every node recorded after the first `len`. Handles issued for the
    /// dropped nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`; zeros when nothing reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite output from {}",
                op_name(&op)
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(out, op, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `x·W (+ b)` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(xw, b),
            None => Ok(xw),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    fn check_row(&self, m: Var, row: Var) -> Result<(usize, usize)> {
        let (mv, rv) = (self.value(m), self.value(row));
        if rv.rows() != 1 || rv.cols() != mv.cols() {
            return Err(shape_err!(
                "row broadcast {:?} onto {:?}",
                rv.shape(),
                mv.shape()
            ));
        }
        Ok((mv.rows(), mv.cols()))
    }

    fn check_col(&self, col: Var, m: Var) -> Result<(usize, usize)> {
        let (cv, mv) = (self.value(col), self.value(m));
        if cv.cols() != 1 || cv.rows() != mv.rows() {
            return Err(shape_err!(
                "column broadcast {:?} onto {:?}",
                cv.shape(),
                mv.shape()
            ));
        }
        Ok((mv.rows(), mv.cols()))
    }

    /// `m + row` with the `1 × c` row broadcast over every row of `m`.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (r, c) = self.check_row(m, row)?;
        let (mv, rv) = (self.value(m).data(), self.value(row).data());
        let data = (0..r * c).map(|i| mv[i] + rv[i % c]).collect();
        self.push(
            Tensor::from_parts(vec![r, c], data),
            Op::AddRow(m, row),
            &[m, row],
        )
    }

    /// `m - row` with the row broadcast.
    pub fn sub_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (r, c) = self.check_row(m, row)?;
        let (mv, rv) = (self.value(m).data(), self.value(row).data());
        let data = (0..r * c).map(|i| mv[i] - rv[i % c]).collect();
        self.push(
            Tensor::from_parts(vec![r, c], data),
            Op::SubRow(m, row),
            &[m, row],
        )
    }

    /// Scales row `i` of `m` by `col[i]`.
    pub fn mul_col(&mut self, col: Var, m: Var) -> Result<Var> {
        let (r, c) = self.check_col(col, m)?;
        let (cv, mv) = (self.value(col).data(), self.value(m).data());
        let data = (0..r * c).map(|i| cv[i / c] * mv[i]).collect();
        self.push(
            Tensor::from_parts(vec![r, c], data),
            Op::MulCol(col, m),
            &[col, m],
        )
    }

    /// Divides row `i` of `m` by `col[i]`.
    pub fn div_col(&mut self, m: Var, col: Var) -> Result<Var> {
        let (r, c) = self.check_col(col, m)?;
        let (cv, mv) = (self.value(col).data(), self.value(m).data());
        if cv.contains(&0.0) {
            return Err(Error::Numerical("division by zero in div_col".into()));
        }
        let data = (0..r * c).map(|i| mv[i] / cv[i / c]).collect();
        self.push(
            Tensor::from_parts(vec![r, c], data),
            Op::DivCol(m, col),
            &[m, col],
        )
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary(a, Op::Affine(a, scale), |v| scale * v + shift)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.affine(a, c, 0.0)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(shape_err!("mean of empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Column means as a `1 × c` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = (v.rows(), v.cols());
        if r == 0 {
            return Err(shape_err!("mean_rows of zero rows"));
        }
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(v.row_slice(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push(Tensor::from_parts(vec![1, c], out), Op::MeanRows(a), &[a])
    }

    /// Row sums as an `r × 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let r = v.rows();
        let out = (0..r).map(|i| v.row_slice(i).iter().sum()).collect();
        self.push(Tensor::from_parts(vec![r, 1], out), Op::SumCols(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_cols(self.value(b))?;
        self.push(out, Op::ConcatCols(a, b), &[a, b])
    }

    /// Diagonal of a square matrix as an `n × 1` column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = v.rows();
        if v.cols() != n {
            return Err(shape_err!("diag of non-square {:?}", v.shape()));
        }
        let out = (0..n).map(|i| v.at(i, i)).collect();
        self.push(Tensor::from_parts(vec![n, 1], out), Op::Diag(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numerical("log of non-positive value".into()));
        }
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numerical("sqrt of non-positive value".into()));
        }
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), |v| v * v)
    }

    /// Elementwise `max(a, floor)`; no gradient flows through clamped entries.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary(a, Op::ClampMin(a, floor), |v| v.max(floor))
    }

    /// Softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = (v.rows(), v.cols());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(softmax_slice(v.row_slice(i)));
        }
        self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::SoftmaxRows(a),
            &[a],
        )
    }

    /// Mean cross-entropy of row-wise logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let value = cross_entropy(self.value(logits), labels)?;
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy(logits, labels.to_vec()),
            &[logits],
        )
    }

    /// Back-propagates from a scalar root, adding into the accumulators.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward from non-scalar node of shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut local: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        local[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut local)?;
            match &mut self.grads[i] {
                Some(acc) => acc.axpy(1.0, &g)?,
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, local: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let send = |local: &mut [Option<Tensor>], v: Var, contrib: Tensor| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut local[v.0] {
                Some(acc) => acc.axpy(1.0, &contrib),
                slot @ None => {
                    *slot = Some(contrib);
                    Ok(())
                }
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let elementwise = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            let x = val(a).data();
            let y = out.data();
            let gd = g.data();
            Tensor::from_parts(
                val(a).shape().to_vec(),
                (0..x.len()).map(|k| f(gd[k], x[k], y[k])).collect(),
            )
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if self.nodes[a.0].requires_grad {
                    let bt = bv.transpose();
                    let ga = matmul_kernel(g.data(), bt.data(), n, m, k);
                    send(local, *a, Tensor::from_parts(av.shape().to_vec(), ga))?;
                }
                if self.nodes[b.0].requires_grad {
                    let at = av.transpose();
                    let gb = matmul_kernel(at.data(), g.data(), k, n, m);
                    send(local, *b, Tensor::from_parts(bv.shape().to_vec(), gb))?;
                }
            }
            Op::Add(a, b) => {
                send(local, *a, reshape_like(g, val(*a)))?;
                send(local, *b, reshape_like(g, val(*b)))?;
            }
            Op::Sub(a, b) => {
                send(local, *a, reshape_like(g, val(*a)))?;
                send(local, *b, reshape_like(&g.scale(-1.0), val(*b)))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                send(local, *a, Tensor::from_parts(av.shape().to_vec(), ga))?;
                send(local, *b, Tensor::from_parts(bv.shape().to_vec(), gb))?;
            }
            Op::AddRow(m, row) | Op::SubRow(m, row) => {
                let sign = if matches!(node.op, Op::AddRow(..)) {
                    1.0
                } else {
                    -1.0
                };
                send(local, *m, reshape_like(g, val(*m)))?;
                let c = g.cols();
                let mut gr = vec![0.0; c];
                for r in 0..g.rows() {
                    for (acc, x) in gr.iter_mut().zip(g.row_slice(r)) {
                        *acc += sign * x;
                    }
                }
                send(
                    local,
                    *row,
                    Tensor::from_parts(val(*row).shape().to_vec(), gr),
                )?;
            }
            Op::MulCol(col, m) => {
                let (cv, mv) = (val(*col), val(*m));
                let c = mv.cols();
                let gm = (0..g.len())
                    .map(|k| g.data()[k] * cv.data()[k / c])
                    .collect();
                let gc = (0..mv.rows())
                    .map(|r| {
                        g.row_slice(r)
                            .iter()
                            .zip(mv.row_slice(r))
                            .map(|(x, y)| x * y)
                            .sum()
                    })
                    .collect();
                send(local, *m, Tensor::from_parts(mv.shape().to_vec(), gm))?;
                send(local, *col, Tensor::from_parts(cv.shape().to_vec(), gc))?;
            }
            Op::DivCol(m, col) => {
                let (cv, mv) = (val(*col), val(*m));
                let c = mv.cols();
                let gm = (0..g.len())
                    .map(|k| g.data()[k] / cv.data()[k / c])
                    .collect();
                let gc = (0..mv.rows())
                    .map(|r| {
                        let d = cv.data()[r];
                        -g.row_slice(r)
                            .iter()
                            .zip(mv.row_slice(r))
                            .map(|(x, y)| x * y)
                            .sum::<f64>()
                            / (d * d)
                    })
                    .collect();
                send(local, *m, Tensor::from_parts(mv.shape().to_vec(), gm))?;
                send(local, *col, Tensor::from_parts(cv.shape().to_vec(), gc))?;
            }
            Op::Affine(a, scale) => send(local, *a, reshape_like(&g.scale(*scale), val(*a)))?,
            Op::Sum(a) => {
                let gv = g.data()[0];
                send(local, *a, Tensor::full(val(*a).shape(), gv))?;
            }
            Op::MeanRows(a) => {
                let av = val(*a);
                let (r, c) = (av.rows(), av.cols());
                let data = (0..r * c).map(|k| g.data()[k % c] / r as f64).collect();
                send(local, *a, Tensor::from_parts(av.shape().to_vec(), data))?;
            }
            Op::SumCols(a) => {
                let av = val(*a);
                let c = av.cols();
                let data = (0..av.len()).map(|k| g.data()[k / c]).collect();
                send(local, *a, Tensor::from_parts(av.shape().to_vec(), data))?;
            }
            Op::Transpose(a) => {
                send(local, *a, reshape_like(&g.transpose(), val(*a)))?;
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (val(*a).cols(), val(*b).cols());
                let r = g.rows();
                let mut ga = Vec::with_capacity(r * ca);
                let mut gb = Vec::with_capacity(r * cb);
                for i in 0..r {
                    let row = g.row_slice(i);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                send(local, *a, Tensor::from_parts(val(*a).shape().to_vec(), ga))?;
                send(local, *b, Tensor::from_parts(val(*b).shape().to_vec(), gb))?;
            }
            Op::Diag(a) => {
                let n = g.rows();
                let mut ga = vec![0.0; n * n];
                for k in 0..n {
                    ga[k * n + k] = g.data()[k];
                }
                send(local, *a, Tensor::from_parts(val(*a).shape().to_vec(), ga))?;
            }
            Op::Sigmoid(a) => send(local, *a, elementwise(*a, &|g, _, y| g * y * (1.0 - y)))?,
            Op::Tanh(a) => send(local, *a, elementwise(*a, &|g, _, y| g * (1.0 - y * y)))?,
            Op::Softplus(a) => send(local, *a, elementwise(*a, &|g, x, _| g * sigmoid(x)))?,
            Op::Exp(a) => send(local, *a, elementwise(*a, &|g, _, y| g * y))?,
            Op::Log(a) => send(local, *a, elementwise(*a, &|g, x, _| g / x))?,
            Op::Sqrt(a) => send(local, *a, elementwise(*a, &|g, _, y| g / (2.0 * y)))?,
            Op::Square(a) => send(local, *a, elementwise(*a, &|g, x, _| 2.0 * g * x))?,
            Op::ClampMin(a, floor) => {
                let f = *floor;
                send(
                    local,
                    *a,
                    elementwise(*a, &move |g, x, _| if x > f { g } else { 0.0 }),
                )?
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = (out.rows(), out.cols());
                let mut ga = Vec::with_capacity(r * c);
                for i in 0..r {
                    let s = out.row_slice(i);
                    let gi = g.row_slice(i);
                    let dot: f64 = s.iter().zip(gi).map(|(x, y)| x * y).sum();
                    ga.extend(s.iter().zip(gi).map(|(sv, gv)| sv * (gv - dot)));
                }
                send(local, *a, Tensor::from_parts(val(*a).shape().to_vec(), ga))?;
            }
            Op::CrossEntropy(logits, labels) => {
                let lv = val(*logits);
                let (r, c) = (lv.rows(), lv.cols());
                let scale = g.data()[0] / r as f64;
                let mut gl = Vec::with_capacity(r * c);
                for (i, &label) in labels.iter().enumerate().take(r) {
                    let p = softmax_slice(lv.row_slice(i));
                    gl.extend(p.iter().enumerate().map(|(k, pk)| {
                        let target = if k == label { 1.0 } else { 0.0 };
                        scale * (pk - target)
                    }));
                }
                send(local, *logits, Tensor::from_parts(lv.shape().to_vec(), gl))?;
            }
        }
        Ok(())
    }
}

fn reshape_like(g: &Tensor, like: &Tensor) -> Tensor {
    Tensor::from_parts(like.shape().to_vec(), g.data().to_vec())
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::SubRow(..) => "sub_row",
        Op::MulCol(..) => "mul_col",
        Op::DivCol(..) => "div_col",
        Op::Affine(..) => "affine",
        Op::Sum(..) => "sum",
        Op::MeanRows(..) => "mean_rows",
        Op::SumCols(..) => "sum_cols",
        Op::Transpose(..) => "transpose",
        Op::ConcatCols(..) => "concat_cols",
        Op::Diag(..) => "diag",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::Softplus(..) => "softplus",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sqrt(..) => "sqrt",
        Op::Square(..) => "square",
        Op::ClampMin(..) => "clamp_min",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::CrossEntropy(..) => "cross_entropy",
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for positive inputs.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_at(x: &[f64], k: usize) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    x[k] - lse
}

/// Mean over rows of `-log softmax(logits_i)[label_i]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (r, c) = (logits.rows(), logits.cols());
    if r == 0 {
        return Err(Error::Input("cross_entropy on empty batch".into()));
    }
    if labels.len() != r {
        return Err(shape_err!("{} labels for {} rows", labels.len(), r));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Input(format!("label {bad} outside 0..{c}")));
    }
    let total: f64 = (0..r)
        .map(|i| -log_softmax_at(logits.row_slice(i), labels[i]))
        .sum();
    Ok(total / r as f64)
}
