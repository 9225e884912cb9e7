use std::collections::BTreeMap;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Sum {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    /// Input deliberately not recorded: nothing flows back through a gate.
    Gate,
    Reshape {
        x: Var,
    },
    SumLosses {
        terms: Vec<Var>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
///
/// Repeated [`Tape::backward_into`] calls add into the same map, one loss
/// after another, so the accumulation order is the call order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<Var, Tensor>,
}

impl GradientMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }

    /// Adds every entry of `other` into `self`.
    pub fn accumulate(&mut self, other: &GradientMap) -> Result<()> {
        for (var, grad) in &other.grads {
            match self.grads.get_mut(var) {
                Some(existing) => existing.add_assign(grad)?,
                None => {
                    self.grads.insert(*var, grad.clone());
                }
            }
        }
        Ok(())
    }

    fn add_raw(&mut self, var: Var, shape: &[usize], grad: Vec<f64>) {
        match self.grads.get_mut(&var) {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(&grad) {
                    *a += b;
                }
            }
            None => {
                let t = Tensor::new(shape.to_vec(), grad).expect("gradient matches its node shape");
                self.grads.insert(var, t);
            }
        }
    }
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order, and the
/// backward sweep walks them in exact reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records an input tensor. Only leaves with `requires_grad` receive
    /// gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Matrix product over the last two axes. `b` is either 2-D (shared by
    /// every leading index of `a`) or has the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let b_shared = lead_b.is_empty();
        if !b_shared && lead_a != lead_b {
            return Err(mismatch());
        }
        let batch: usize = lead_a.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batch {
                let b_off = if b_shared { 0 } else { bi * k * n };
                kernels::matmul(
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[b_off..b_off + k * n],
                    m,
                    k,
                    n,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
            },
            rg,
        ))
    }

    /// Elementwise sum. `b` may also match a trailing suffix of `a`'s shape,
    /// in which case it is broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if !(sa == sb || (sb.len() < sa.len() && sa.ends_with(sb))) {
            return Err(Error::Shape {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let av = self.value(a);
        let bv = self.value(b).data();
        let inner = bv.len();
        let out: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % inner])
            .collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let out = xv.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| kernels::gelu(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.requires_grad(x);
        self.push(value, Op::Gelu { x }, rg)
    }

    /// Max-stabilized softmax along `axis`. Entries equal to `-inf` get
    /// probability exactly zero, which is how attention masks are applied.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::validation(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                kernels::softmax_strided(&mut out, base, len, inner);
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).cols();
        for p in [gain, bias] {
            if self.shape(p) != [cols] {
                return Err(Error::Shape {
                    op: "layernorm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if eps <= 0.0 {
            return Err(Error::validation("layernorm eps must be positive"));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// `out[i] = x[index[i]]` over flat storage, reshaped to `shape`.
    /// Permutations, transposes, row selection and embedding lookup are all
    /// expressed through this op.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::validation(format!(
                "gather index {bad} out of range for {} elements",
                xv.len()
            )));
        }
        let out = index.iter().map(|&i| xv[i]).collect();
        let value = Tensor::new(shape, out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Gather { x, index }, rg))
    }

    /// Picks rows of `x` viewed as `[rows, cols]`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        let total = xv.rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= total) {
            return Err(Error::validation(format!(
                "row {bad} out of range for {total} rows"
            )));
        }
        let index = rows
            .iter()
            .flat_map(|&r| (r * cols)..(r * cols + cols))
            .collect();
        self.gather(x, index, vec![rows.len(), cols])
    }

    /// Embedding lookup: rows of `table` addressed by token ids.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vocab = self.value(table).rows();
        if let Some(&bad) = ids.iter().find(|&&t| t >= vocab) {
            return Err(Error::validation(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        self.select_rows(table, ids)
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::validation("transpose needs at least two axes"));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch: usize = shape[..shape.len() - 2].iter().product();
        let mut index = Vec::with_capacity(batch * r * c);
        for b in 0..batch {
            for j in 0..c {
                for i in 0..r {
                    index.push(b * r * c + i * c + j);
                }
            }
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.extend([c, r]);
        self.gather(x, index, out_shape)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshape(&shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Mean negative log-likelihood of integer `labels` under `logits`
    /// (`[batch, classes]`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let classes = lv.cols();
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::validation(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &lv.data()[r * classes..(r + 1) * classes];
            total += kernels::log_sum_exp(row) - row[y];
            kernels::softmax_strided(&mut probs, r * classes, classes, 1);
        }
        let loss = total / labels.len() as f64;
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Identity on values; blocks every gradient flowing back into `x`.
    pub fn gradient_gate(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        let _ = x;
        self.push(value, Op::Gate, false)
    }

    /// Sum of scalar losses whose gradient is defined term by term: the
    /// backward pass of the sum runs one backward pass per term, in order,
    /// accumulating into a single map. This makes the joint gradient
    /// bit-identical to accumulating the per-term gradients.
    pub fn sum_losses(&mut self, terms: &[Var]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::validation("sum_losses needs at least one term"));
        }
        let mut total = 0.0;
        for &t in terms {
            let v = self.value(t);
            if !v.is_scalar() {
                return Err(Error::validation(format!(
                    "sum_losses term has shape {:?}, expected a scalar",
                    v.shape()
                )));
            }
            total += v.data()[0];
        }
        let rg = terms.iter().any(|&t| self.requires_grad(t));
        Ok(self.push(
            Tensor::scalar(total),
            Op::SumLosses {
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` for every `requires_grad` leaf recorded
    /// before it. Leaves the loss does not reach get explicit zeros.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        let mut map = GradientMap::new();
        self.backward_into(loss, &mut map)?;
        Ok(map)
    }

    /// Like [`Tape::backward`] but adds into an existing map.
    pub fn backward_into(&self, loss: Var, map: &mut GradientMap) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::validation("loss is not on this tape"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::validation(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.sweep(loss, map);
        for (i, node) in self.nodes[..=loss.0].iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                map.grads
                    .entry(Var(i))
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn sweep(&self, loss: Var, map: &mut GradientMap) {
        if let Op::SumLosses { terms } = &self.nodes[loss.0].op {
            for &t in terms {
                self.sweep(t, map);
            }
            return;
        }
        if !self.requires_grad(loss) {
            return;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(Var(idx), node, g, &mut grads, map);
        }
    }

    fn propagate(
        &self,
        var: Var,
        node: &Node,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        map: &mut GradientMap,
    ) {
        let mut send = |target: Var, contribution: Vec<f64>| {
            if !self.requires_grad(target) {
                return;
            }
            match &mut grads[target.0] {
                Some(existing) => {
                    for (a, b) in existing.iter_mut().zip(&contribution) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {
                if node.requires_grad {
                    map.add_raw(var, node.value.shape(), g);
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for bi in 0..batch {
                        let b_off = if *b_shared { 0 } else { bi * k * n };
                        kernels::matmul_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bv[b_off..b_off + k * n],
                            m,
                            n,
                            k,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    send(*a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; if *b_shared { k * n } else { batch * k * n }];
                    for bi in 0..batch {
                        let b_off = if *b_shared { 0 } else { bi * k * n };
                        kernels::matmul_tn_acc(
                            &av[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[b_off..b_off + k * n],
                        );
                    }
                    send(*b, db);
                }
            }
            Op::Add { a, b } => {
                if self.requires_grad(*b) {
                    let inner = self.value(*b).numel();
                    let mut db = vec![0.0; inner];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % inner] += gi;
                    }
                    send(*b, db);
                }
                send(*a, g);
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    send(*a, g.iter().zip(bv).map(|(gi, y)| gi * y).collect());
                }
                if self.requires_grad(*b) {
                    send(*b, g.iter().zip(av).map(|(gi, x)| gi * x).collect());
                }
            }
            Op::Scale { x, factor } => send(*x, g.iter().map(|gi| gi * factor).collect()),
            Op::Sum { x } => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                send(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(gi, &v)| gi * kernels::gelu_grad(v))
                        .collect(),
                );
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..*len)
                            .map(|j| y[base + j * inner] * g[base + j * inner])
                            .sum();
                        for j in 0..*len {
                            let p = base + j * inner;
                            dx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = node.value.cols();
                let rows = inv_std.len();
                let gv = self.value(*gain).data();
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let nf = cols as f64;
                    for r in 0..rows {
                        let off = r * cols;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            let d = g[off + c] * gv[c];
                            sum_d += d;
                            sum_dx += d * xhat[off + c];
                        }
                        for c in 0..cols {
                            let d = g[off + c] * gv[c];
                            dx[off + c] =
                                inv_std[r] / nf * (nf * d - sum_d - xhat[off + c] * sum_dx);
                        }
                    }
                    send(*x, dx);
                }
                if self.requires_grad(*gain) {
                    let mut dg = vec![0.0; cols];
                    for (i, gi) in g.iter().enumerate() {
                        dg[i % cols] += gi * xhat[i];
                    }
                    send(*gain, dg);
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0; cols];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % cols] += gi;
                    }
                    send(*bias, db);
                }
            }
            Op::Gather { x, index } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (gi, &src) in g.iter().zip(index) {
                    dx[src] += gi;
                }
                send(*x, dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = g[0] / batch as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    dl[r * classes + y] -= scale;
                }
                send(*logits, dl);
            }
            Op::Gate => {}
            Op::Reshape { x } => send(*x, g),
            Op::SumLosses { terms } => {
                for &t in terms {
                    send(t, vec![g[0]]);
                }
            }
        }
    }
}
