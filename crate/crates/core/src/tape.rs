//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value and the ids of its parents. Nodes are appended in evaluation order,
//! so parents always precede children and [`Tape::backward`] is a single
//! reverse sweep. Gradients reaching a node through several children are
//! summed.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Softmax {
        input: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
    Dropout {
        input: Var,
        keep_scale: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_bt",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMulBt(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if self.value(row).len() != n {
            return Err(Error::Dimension {
                op: "add_row",
                left: self.shape(a).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (x, y) in data[i * n..(i + 1) * n].iter_mut().zip(r) {
                *x += y;
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// Adds a fixed tensor (for example an additive attention mask).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(Error::Dimension {
                op: "add_const",
                left: self.shape(a).to_vec(),
                right: c.shape().to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(c.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::AddConst(a), &[a]))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} invalid for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let out = softmax_values(self.value(a).data(), outer, len, inner);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Softmax {
                input: a,
                outer,
                len,
                inner,
            },
            &[a],
        ))
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::Dimension {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        self.push(t, Op::Gelu(a), &[a])
    }

    /// Selects rows of `table` by index, producing `[ids.len() × cols]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(table).dims2();
        if ids.is_empty() {
            return Err(Error::Input("gather with no indices".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    index: id,
                    size: rows,
                });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let t = Tensor::new(vec![ids.len(), cols], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if width == 0 || start + width > n {
            return Err(Error::Index {
                index: start + width,
                size: n,
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + width]);
        }
        let t = Tensor::new(vec![m, width], out)?;
        Ok(self.push(t, Op::SliceCols { input: a, start }, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if r != m {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, skipping positions whose target equals `ignore`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<Var> {
        let (t_len, vocab) = self.value(logits).dims2();
        if targets.len() != t_len {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        let kept: Vec<Option<usize>> = targets
            .iter()
            .map(|&t| (Some(t) != ignore).then_some(t))
            .collect();
        for &t in kept.iter().flatten() {
            if t >= vocab {
                return Err(Error::Index {
                    index: t,
                    size: vocab,
                });
            }
        }
        let count = kept.iter().flatten().count();
        if count == 0 {
            return Err(Error::Input(
                "cross entropy over a batch where every target is ignored".into(),
            ));
        }
        let probs = softmax_values(self.value(logits).data(), t_len, vocab, 1);
        let mut total = 0.0;
        let xs = self.value(logits).data();
        for (i, t) in kept.iter().enumerate() {
            if let Some(t) = *t {
                total -= log_softmax_at(&xs[i * vocab..(i + 1) * vocab], t);
            }
        }
        let t = Tensor::scalar(total / count as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: kept,
                probs,
                count,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a), &[a])
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - rate);
        let keep_scale: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&keep_scale)
            .map(|(x, s)| x * s)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved");
        self.push(t, Op::Dropout { input: a, keep_scale }, &[a])
    }

    /// Propagates d`loss`/d(node) back through the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_bt_acc(gd, self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_at_acc(self.value(*a).data(), gd, &mut db, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().0;
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_acc(gd, self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm_at_acc(gd, self.value(*a).data(), &mut db, m, n, k);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, gd.to_vec());
                if self.wants(*row) {
                    let (m, n) = g.dims2();
                    let mut dr = vec![0.0; n];
                    for i in 0..m {
                        for (d, x) in dr.iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = gd
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(g, y)| g * y)
                        .collect();
                    self.accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = gd
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(g, x)| g * x)
                        .collect();
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, gd.iter().map(|g| g * c).collect());
            }
            Op::AddConst(a) => self.accumulate(grads, *a, gd.to_vec()),
            Op::Softmax {
                input,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..*len).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            dx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = g.dims2();
                let gv = self.value(*gain).data();
                if self.wants(*gain) {
                    let mut dg = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += gd[i * n + j] * xhat[i * n + j];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += gd[i * n + j];
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
                if self.wants(*input) {
                    let mut dx = vec![0.0; m * n];
                    let nf = n as f64;
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dh: Vec<f64> = gd[r.clone()]
                            .iter()
                            .zip(gv)
                            .map(|(g, w)| g * w)
                            .collect();
                        let h = &xhat[r.clone()];
                        let mean_dh = dh.iter().sum::<f64>() / nf;
                        let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for j in 0..n {
                            dx[i * n + j] = inv_std[i] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
            }
            Op::Gelu(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| g * gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Gather { table, ids } => {
                let (rows, cols) = self.value(*table).dims2();
                let mut dt = vec![0.0; rows * cols];
                for (i, &id) in ids.iter().enumerate() {
                    for (d, x) in dt[id * cols..(id + 1) * cols]
                        .iter_mut()
                        .zip(&gd[i * cols..(i + 1) * cols])
                    {
                        *d += x;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::SliceCols { input, start } => {
                let (m, n) = self.value(*input).dims2();
                let w = g.dims2().1;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *input, dx);
            }
            Op::ConcatCols(parts) => {
                let (m, n) = g.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&gd[i * n + offset..i * n + offset + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let (t_len, vocab) = self.value(*logits).dims2();
                let scale = gd[0] / *count as f64;
                let mut dl = vec![0.0; t_len * vocab];
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let row = i * vocab..(i + 1) * vocab;
                        for (d, p) in dl[row].iter_mut().zip(&probs[i * vocab..(i + 1) * vocab]) {
                            *d = scale * p;
                        }
                        dl[i * vocab + t] -= scale;
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::Dropout { input, keep_scale } => {
                let d = gd.iter().zip(keep_scale).map(|(g, s)| g * s).collect();
                self.accumulate(grads, *input, d);
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(&delta) {
                    *e += d;
                }
            }
            slot @ None => {
                *slot = Some(
                    Tensor::new(self.shape(v).to_vec(), delta).expect("gradient matches node shape"),
                );
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, materialising zeros for unreachable leaves.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }
}

pub(crate) fn softmax_values(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    out
}

/// `log softmax(row)[target]`, stable.
pub fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[target] - lse
}

/// Full log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let x = tape.constant(Tensor::from_rows(&[vec![3.0, -1.5], vec![0.25, 7.0]]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 4], 2.5));
        let y = tape.softmax(x, 1).unwrap();
        for &p in tape.value(y).data() {
            assert!(approx(p, 0.25, 1e-15));
        }
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert!(approx(tape.value(y).data()[0], 0.25, 1e-15));
        assert!(approx(tape.value(y).data()[1], 0.75, 1e-15));
        let big = tape.constant(Tensor::from_rows(&[vec![1000.0, 1000.0]]));
        let y = tape.softmax(big, 1).unwrap();
        assert!(tape.value(y).is_finite());
        assert!(tape.softmax(big, 2).is_err());
    }

    #[test]
    fn softmax_on_axis_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[3, 16]));
        let loss = tape.cross_entropy(uniform, &[0, 5, 15], None).unwrap();
        assert!(approx(tape.value(loss).item(), 16f64.ln(), 1e-12));

        let mut rows = vec![vec![0.0; 4]; 2];
        rows[0][1] = 20.0;
        rows[1][3] = 20.0;
        let confident = tape.constant(Tensor::from_rows(&rows));
        let loss = tape.cross_entropy(confident, &[1, 3], None).unwrap();
        assert!(tape.value(loss).item() < 1e-8);

        let loss = tape.cross_entropy(confident, &[1, 0], Some(0)).unwrap();
        assert!(tape.value(loss).item() < 1e-8);

        let err = tape.cross_entropy(confident, &[0, 0], Some(0)).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        let err = tape.cross_entropy(confident, &[4, 0], None).unwrap_err();
        assert!(matches!(err, Error::Index { index: 4, size: 4 }));
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);

        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_and_nonscalar_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::full(&[2], 1.0));
        let unused = tape.param(Tensor::full(&[2, 2], 1.0));
        let s = tape.sum(w);
        let g = tape.backward(s).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zeros(&tape, unused), Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::full(&[1, 2], 1.5));
        let a = tape.scale(w, 2.0);
        let b = tape.add(a, w).unwrap();
        let s = tape.sum(b);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let mut tape = Tape::new();
        let table = tape.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let rows = tape.gather_rows(table, &[1, 1, 0]).unwrap();
        assert_eq!(tape.value(rows).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let s = tape.sum(rows);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(table).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
        assert!(tape.gather_rows(table, &[2]).is_err());
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[2, 2], 1.0));
        assert_eq!(tape.dropout(x, 0.0, &mut rng), x);
        let y = tape.dropout(x, 0.5, &mut rng);
        for &v in tape.value(y).data() {
            assert!(v == 0.0 || v == 2.0);
        }
    }
}
