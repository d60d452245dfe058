//! Define-by-run reverse-mode differentiation.
//!
//! Every forward pass builds a fresh [`Tape`]. Operations append nodes in
//! execution order, so the node list is already topologically sorted and
//! [`Tape::backward`] simply walks it in reverse. Nodes that cannot reach a
//! trainable leaf are marked as not needing gradients and are skipped.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor, TensorId};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Kron(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Transpose(Var),
    MeanRows(Var),
    SumCols(Var),
    Sum(Var),
    SumSqDiff(Var, Var),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    StraightThrough(Var),
    /// Cached softmax probabilities and the class index per row.
    SoftmaxCe {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    /// Per-entry `(sigmoid(logit) - target) / valid` or zero when masked out.
    MaskedBce { logits: Var, dlogits: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    source: Option<TensorId>,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn as_matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::rank(op, 2, shape)),
    }
}

fn row_len(shape: &[usize]) -> usize {
    match shape {
        [] => 1,
        [n] => *n,
        [1, n] => *n,
        _ => 0,
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Single value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            source: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(Error::dim("constant", shape, &[value.len()]));
        }
        Ok(self.push(shape.to_vec(), value, Op::Leaf, false))
    }

    /// Records `t` as a leaf. Its gradient is routed back by id when
    /// `t.requires_grad()`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        );
        if t.requires_grad() {
            self.nodes[v.0].source = Some(t.id());
        }
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix("matmul", self.shape(a))?;
        let (k2, n) = as_matrix("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), needs))
    }

    /// Block matrix whose `(i, j)` block is `a[i, j] * b`.
    pub fn kron(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = as_matrix("kron", self.shape(a))?;
        let (r, s) = as_matrix("kron", self.shape(b))?;
        let out = kron_raw(self.value(a), self.value(b), p, q, r, s);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![p * r, q * s], out, Op::Kron(a, b), needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a row vector (`[n]` or `[1, n]`) to every row of an `m × n` matrix.
    /// This is the only broadcast the tape supports.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = as_matrix("add_row", self.shape(a))?;
        if row_len(self.shape(row)) != n {
            return Err(Error::dim("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        let mut out = self.value(a).to_vec();
        for i in 0..m {
            out[i * n..(i + 1) * n]
                .iter_mut()
                .zip(r)
                .for_each(|(o, v)| *o += v);
        }
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(vec![m, n], out, Op::AddRow(a, row), needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(shape, out, Op::Scale(a, c), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x < 0.0 { 0.0 } else { x })
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(shape, out, Op::Relu(a), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = as_matrix("transpose", self.shape(a))?;
        let v = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), needs))
    }

    /// Column-wise mean over the rows of an `m × n` matrix, giving `1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = as_matrix("mean_rows", self.shape(a))?;
        if m == 0 {
            return Err(Error::Degenerate("mean over zero rows".into()));
        }
        let v = self.value(a);
        let mut out = vec![0.0; n];
        for i in 0..m {
            out.iter_mut()
                .zip(&v[i * n..(i + 1) * n])
                .for_each(|(o, x)| *o += x);
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let needs = self.needs(a);
        Ok(self.push(vec![1, n], out, Op::MeanRows(a), needs))
    }

    /// Sum along each row of an `m × n` matrix, giving `m × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (m, n) = as_matrix("sum_cols", self.shape(a))?;
        let v = self.value(a);
        let out = (0..m).map(|i| v[i * n..(i + 1) * n].iter().sum()).collect();
        let needs = self.needs(a);
        Ok(self.push(vec![m, 1], out, Op::SumCols(a), needs))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let needs = self.needs(a);
        self.push(Vec::new(), vec![s], Op::Sum(a), needs)
    }

    /// `Σ (a - b)²` as a scalar.
    pub fn sum_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sum_sq_diff", a, b)?;
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Vec::new(), vec![s], Op::SumSqDiff(a, b), needs))
    }

    /// Gathers rows (with repetition) of an `m × n` matrix.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = as_matrix("select_rows", self.shape(a))?;
        let v = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Index { index: r, len: m });
            }
            out.extend_from_slice(&v[r * n..(r + 1) * n]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            vec![rows.len(), n],
            out,
            Op::SelectRows(a, rows.to_vec()),
            needs,
        ))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Degenerate("concat of nothing".into()))?;
        let (_, n) = as_matrix("concat_rows", self.shape(first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        let mut needs = false;
        for &p in parts {
            let (m, c) = as_matrix("concat_rows", self.shape(p))?;
            if c != n {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += m;
            out.extend_from_slice(self.value(p));
            needs |= self.needs(p);
        }
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Forward value is `value`; the backward pass hands the incoming
    /// gradient to `input` untouched.
    pub fn straight_through(&mut self, input: Var, value: Vec<f64>) -> Result<Var> {
        if value.len() != numel(self.shape(input)) {
            return Err(Error::dim(
                "straight_through",
                self.shape(input),
                &[value.len()],
            ));
        }
        let shape = self.shape(input).to_vec();
        let needs = self.needs(input);
        Ok(self.push(shape, value, Op::StraightThrough(input), needs))
    }

    /// Mean softmax cross-entropy of `b × c` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = as_matrix("softmax_cross_entropy", self.shape(logits))?;
        if labels.len() != b {
            return Err(Error::dim(
                "softmax_cross_entropy",
                self.shape(logits),
                &[labels.len()],
            ));
        }
        if b == 0 {
            return Err(Error::Degenerate("empty batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label {
                label: bad,
                classes: c,
            });
        }
        let v = self.value(logits);
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &v[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, x) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = libm::exp(x - max);
                z += *p;
            }
            probs[i * c..(i + 1) * c].iter_mut().for_each(|p| *p /= z);
            loss += libm::log(z) + max - row[labels[i]];
        }
        loss /= b as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Mean binary cross-entropy with logits over entries whose mask is set.
    /// `targets` and `mask` are laid out like `logits`.
    pub fn masked_bce_with_logits(
        &mut self,
        logits: Var,
        targets: &[f64],
        mask: &[bool],
    ) -> Result<Var> {
        let n = numel(self.shape(logits));
        if targets.len() != n || mask.len() != n {
            return Err(Error::dim(
                "masked_bce_with_logits",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        let valid = mask.iter().filter(|m| **m).count();
        if valid == 0 {
            return Err(Error::Degenerate("every target is masked".into()));
        }
        let inv = 1.0 / valid as f64;
        let v = self.value(logits);
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; n];
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let (x, t) = (v[i], targets[i]);
            loss += softplus(x) - t * x;
            dlogits[i] = (sigmoid(x) - t) * inv;
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Vec::new(),
            vec![loss * inv],
            Op::MaskedBce { logits, dlogits },
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if numel(shape) != 1 || shape.len() > 1 {
            return Err(Error::rank("backward", 0, shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut by_tensor: BTreeMap<TensorId, Vec<f64>> = BTreeMap::new();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Some(id), Some(g)) = (node.source, g) {
                match by_tensor.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => {
                        by_tensor.insert(id, g.clone());
                    }
                }
            }
        }
        Ok(Gradients {
            by_var: grads,
            by_tensor,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Adds `delta` into the gradient slot of `v` if it wants one.
        let mut acc = |v: Var, delta: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            delta(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &|ga| {
                    // ga += g · bᵀ
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                acc(*b, &|gb| {
                    // gb += aᵀ · g
                    for i in 0..m {
                        for p in 0..k {
                            let av = av[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Kron(a, b) => {
                let (p, q) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let (r, s) = (nodes[b.0].shape[0], nodes[b.0].shape[1]);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let cols = q * s;
                acc(*a, &|ga| {
                    for i in 0..p {
                        for j in 0..q {
                            let mut t = 0.0;
                            for u in 0..r {
                                for v in 0..s {
                                    t += g[(i * r + u) * cols + j * s + v] * bv[u * s + v];
                                }
                            }
                            ga[i * q + j] += t;
                        }
                    }
                });
                acc(*b, &|gb| {
                    for i in 0..p {
                        for j in 0..q {
                            let a_ij = av[i * q + j];
                            for u in 0..r {
                                for v in 0..s {
                                    gb[u * s + v] += a_ij * g[(i * r + u) * cols + j * s + v];
                                }
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|ga| add_into(ga, g));
                acc(*b, &|gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|ga| add_into(ga, g));
                acc(*b, &|gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &|ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &|gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = nodes[a.0].shape[1];
                acc(*a, &|ga| add_into(ga, g));
                acc(*row, &|gr| {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }),
            Op::Relu(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &|ga| {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                acc(*a, &|ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let m = nodes[a.0].shape[0];
                let inv = 1.0 / m as f64;
                acc(*a, &|ga| {
                    for chunk in ga.chunks_mut(g.len()) {
                        chunk.iter_mut().zip(g).for_each(|(x, y)| *x += y * inv);
                    }
                });
            }
            Op::SumCols(a) => {
                let n = nodes[a.0].shape[1];
                acc(*a, &|ga| {
                    for (i, chunk) in ga.chunks_mut(n).enumerate() {
                        chunk.iter_mut().for_each(|x| *x += g[i]);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::SumSqDiff(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &|ga| {
                    for i in 0..ga.len() {
                        ga[i] += 2.0 * (av[i] - bv[i]) * g[0];
                    }
                });
                acc(*b, &|gb| {
                    for i in 0..gb.len() {
                        gb[i] -= 2.0 * (av[i] - bv[i]) * g[0];
                    }
                });
            }
            Op::SelectRows(a, rows) => {
                let n = nodes[a.0].shape[1];
                acc(*a, &|ga| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut ga[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    let piece = &g[offset..offset + len];
                    acc(*p, &|gp| add_into(gp, piece));
                    offset += len;
                }
            }
            Op::StraightThrough(a) => acc(*a, &|ga| add_into(ga, g)),
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f64;
                acc(*logits, &|gl| {
                    for i in 0..b {
                        for j in 0..c {
                            let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                            gl[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
            Op::MaskedBce { logits, dlogits } => acc(*logits, &|gl| {
                gl.iter_mut()
                    .zip(dlogits)
                    .for_each(|(x, d)| *x += g[0] * d);
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn kron_raw(a: &[f64], b: &[f64], p: usize, q: usize, r: usize, s: usize) -> Vec<f64> {
    let cols = q * s;
    let mut out = vec![0.0; p * r * cols];
    for i in 0..p {
        for j in 0..q {
            let a_ij = a[i * q + j];
            for u in 0..r {
                for v in 0..s {
                    out[(i * r + u) * cols + j * s + v] = a_ij * b[u * s + v];
                }
            }
        }
    }
    out
}

/// Result of a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_var: Vec<Option<Vec<f64>>>,
    by_tensor: BTreeMap<TensorId, Vec<f64>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a tape node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.by_var.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a parameter tensor summed over all its leaves.
    pub fn of(&self, t: &Tensor) -> Option<&[f64]> {
        self.by_tensor.get(&t.id()).map(|g| g.as_slice())
    }

    /// Adds this sweep's gradient into every trainable tensor in `params`.
    pub fn accumulate<'a>(&self, params: impl IntoIterator<Item = &'a mut Tensor>) {
        for t in params {
            if let Some(g) = self.by_tensor.get(&t.id()) {
                t.accumulate_grad(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(tape: &mut Tape, r: usize, c: usize, v: &[f64]) -> Var {
        tape.constant(&[r, c], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_case() {
        let mut t = Tape::new();
        let a = m(&mut t, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = m(&mut t, 2, 1, &[1.0, 1.0]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[3.0, 7.0]);
        assert_eq!(t.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let eye = m(&mut t, 3, 3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let vals = [1.5, -2.0, 0.25, 4.0, 7.0, -1.0, 3.0, 3.0, 9.5, 0.0, 1.0, 2.0];
        let x = m(&mut t, 3, 4, &vals);
        let y = t.matmul(eye, x).unwrap();
        assert_eq!(t.value(y), &vals);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut t = Tape::new();
        let a = m(&mut t, 2, 3, &[0.0; 6]);
        let b = m(&mut t, 2, 3, &[0.0; 6]);
        match t.matmul(a, b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn kron_scalar_and_identity() {
        let mut t = Tape::new();
        let two = m(&mut t, 1, 1, &[2.0]);
        let b = m(&mut t, 2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let k = t.kron(two, b).unwrap();
        assert_eq!(t.value(k), &[10.0, 12.0, 14.0, 16.0]);

        let eye = m(&mut t, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let k = t.kron(eye, b).unwrap();
        assert_eq!(t.shape(k), &[4, 4]);
        #[rustfmt::skip]
        let expected = [
            5.0, 6.0, 0.0, 0.0,
            7.0, 8.0, 0.0, 0.0,
            0.0, 0.0, 5.0, 6.0,
            0.0, 0.0, 7.0, 8.0,
        ];
        assert_eq!(t.value(k), &expected);
    }

    #[test]
    fn kron_rejects_vectors() {
        let mut t = Tape::new();
        let a = t.constant(&[3], alloc::vec![1.0; 3]).unwrap();
        let b = m(&mut t, 1, 1, &[1.0]);
        assert!(matches!(t.kron(a, b), Err(Error::Rank { .. })));
    }

    #[test]
    fn elementwise_cases() {
        let mut t = Tape::new();
        let x = t.constant(&[1, 3], alloc::vec![-1.0, 0.0, 2.0]).unwrap();
        let r = t.relu(x);
        assert_eq!(t.value(r), &[0.0, 0.0, 2.0]);

        let rows = m(&mut t, 2, 3, &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let mean = t.mean_rows(rows).unwrap();
        assert_eq!(t.value(mean), &[1.0, 2.0, 3.0]);

        let bad = m(&mut t, 2, 2, &[0.0; 4]);
        assert!(matches!(t.add(x, bad), Err(Error::Dimension { .. })));
        assert!(matches!(t.add_row(bad, x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn sum_sq_diff_minimum() {
        let mut tape = Tape::new();
        let p = Tensor::new(&[2, 2], alloc::vec![1.0, -2.0, 3.0, 0.5])
            .unwrap()
            .trainable();
        let x = tape.param(&p);
        let y = tape.param(&p);
        let s = tape.sum_sq_diff(x, y).unwrap();
        assert_eq!(tape.scalar(s), 0.0);
        let g = tape.backward(s).unwrap();
        assert!(g.of(&p).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut t = Tape::new();
        let l = m(&mut t, 1, 2, &[0.3, 0.3]);
        let ce = t.softmax_cross_entropy(l, &[1]).unwrap();
        assert!((t.scalar(ce) - core::f64::consts::LN_2).abs() < 1e-12);

        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let l = m(&mut t, 1, 2, &[margin, 0.0]);
            let ce = t.softmax_cross_entropy(l, &[0]).unwrap();
            assert!(t.scalar(ce) < last);
            last = t.scalar(ce);
        }
        assert!(last < 1e-20);

        assert!(matches!(
            t.softmax_cross_entropy(l, &[2]),
            Err(Error::Label { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn bce_all_masked_is_degenerate() {
        let mut t = Tape::new();
        let l = m(&mut t, 1, 2, &[0.3, 0.3]);
        assert!(matches!(
            t.masked_bce_with_logits(l, &[1.0, 0.0], &[false, false]),
            Err(Error::Degenerate(_))
        ));
        let loss = t
            .masked_bce_with_logits(l, &[1.0, 0.0], &[true, false])
            .unwrap();
        let expected = libm::log1p(libm::exp(-0.3));
        assert!((t.scalar(loss) - expected).abs() < 1e-15);
    }

    #[test]
    fn backward_of_sum_is_ones_and_frozen_stays_absent() {
        let mut tape = Tape::new();
        let p = Tensor::new(&[2, 3], alloc::vec![0.5; 6]).unwrap().trainable();
        let frozen = Tensor::new(&[3, 2], alloc::vec![1.0; 6]).unwrap();
        let x = tape.param(&p);
        let w = tape.param(&frozen);
        let s0 = tape.sum(x);
        let g = tape.backward(s0).unwrap();
        assert_eq!(g.of(&p).unwrap(), &[1.0; 6]);

        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.of(&frozen).is_none());
        assert!(g.wrt(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = m(&mut tape, 2, 2, &[0.0; 4]);
        assert!(matches!(tape.backward(x), Err(Error::Rank { .. })));
    }

    #[test]
    fn straight_through_forward_is_bitwise_value() {
        let mut tape = Tape::new();
        let p = Tensor::new(&[1, 3], alloc::vec![0.1, 0.2, 0.3]).unwrap().trainable();
        let x = tape.param(&p);
        let q = alloc::vec![1.0 / 3.0, 2.0, -7.25];
        let st = tape.straight_through(x, q.clone()).unwrap();
        assert_eq!(tape.value(st), q.as_slice());
        let w = m(&mut tape, 1, 3, &[2.0, -1.0, 0.5]);
        let prod = tape.mul(st, w).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.of(&p).unwrap(), &[2.0, -1.0, 0.5]);
        assert_eq!(g.wrt(st).unwrap(), &[2.0, -1.0, 0.5]);
    }
}
