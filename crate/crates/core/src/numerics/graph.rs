//! Record-then-reverse tape. Every operation appends a node holding its
//! forward value; `backward` walks the nodes once in reverse order.

use super::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Tensor};
use super::NumericsError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row block of one attention problem inside stacked query/key matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl Segment {
    /// Self-attention block: queries and keys cover the same rows.
    pub fn square(start: usize, len: usize) -> Self {
        Self {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Gelu(Var),
    Sum(Var),
    Softmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_index: usize,
        probs: Vec<f64>,
        count: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Dynamic computation graph confined to one thread.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Every recorded node in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf copied from `tensor`, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Records a leaf copied from `tensor` with an explicit tracking flag.
    pub fn leaf_with(&mut self, tensor: &Tensor, requires_grad: bool) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            requires_grad,
        )
    }

    /// Records an untracked leaf.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var, NumericsError> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Snapshot of a node as a standalone tensor, gradient included.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = Tensor::new(&node.shape, node.data.clone())
            .expect("node shape matches data")
            .with_requires_grad(node.requires_grad);
        if let Some(g) = self.grad(v) {
            t.set_grad(Some(g.to_vec())).expect("grad shape matches data");
        }
        t
    }

    /// Gradient accumulated by the last `backward`, if this node takes one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let shape = &self.nodes[v.0].shape;
        let cols = *shape.last().expect("non-empty shape");
        (self.nodes[v.0].data.len() / cols, cols)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::Dimension {
                op: "matmul",
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 2 {
            return Err(NumericsError::Shape(format!("transpose needs a matrix, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(NumericsError::Dimension {
                op,
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a, b]);
        self.push(shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// `x[n×d] + bias[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (_, d) = self.dims2(x);
        if self.nodes[bias.0].data.len() != d {
            return Err(NumericsError::Dimension {
                op: "add_row",
                left: self.nodes[x.0].shape.clone(),
                right: self.nodes[bias.0].shape.clone(),
            });
        }
        let b = &self.nodes[bias.0].data;
        let mut out = self.nodes[x.0].data.clone();
        for row in out.chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(shape, out, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.nodes[x.0].data.iter().map(|v| v * factor).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::Scale(x, factor), rg)
    }

    /// Elementwise product with an untracked mask (used for dropout).
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var, NumericsError> {
        if mask.len() != self.nodes[x.0].data.len() {
            return Err(NumericsError::Shape(format!(
                "mask of {} elements for shape {:?}",
                mask.len(),
                self.nodes[x.0].shape
            )));
        }
        let out = self.nodes[x.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(a, m)| a * m)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::MulConst(x, mask), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].data.iter().map(|&v| gelu(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::Gelu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].data.iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(NumericsError::Shape(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let src = &self.nodes[x.0].data;
        if src.iter().any(|v| v.is_nan()) {
            return Err(NumericsError::NonFinite("softmax input contains NaN".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let idx = |j: usize| base + j * inner;
                let max = (0..axis_len)
                    .map(|j| src[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..axis_len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..axis_len {
                    out[idx(j)] /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            },
            rg,
        ))
    }

    /// Normalizes each last-axis slice to zero mean and unit variance, then
    /// applies the optional affine `gain`/`bias`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let (rows, d) = self.dims2(x);
        if d < 2 {
            return Err(NumericsError::Shape(format!(
                "layer_norm needs a last axis of at least 2, got {:?}",
                self.nodes[x.0].shape
            )));
        }
        for p in [gain, bias].into_iter().flatten() {
            if self.nodes[p.0].data.len() != d {
                return Err(NumericsError::Dimension {
                    op: "layer_norm",
                    left: self.nodes[x.0].shape.clone(),
                    right: self.nodes[p.0].shape.clone(),
                });
            }
        }
        let src = &self.nodes[x.0].data;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for (h, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *h = (v - mean) * s;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let g = &self.nodes[g.0].data;
            for row in out.chunks_mut(d) {
                for (o, gv) in row.iter_mut().zip(g) {
                    *o *= gv;
                }
            }
        }
        if let Some(b) = bias {
            let b = &self.nodes[b.0].data;
            for row in out.chunks_mut(d) {
                for (o, bv) in row.iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let mut deps = vec![x];
        deps.extend(gain);
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let (rows, d) = self.dims2(table);
        if ids.is_empty() {
            return Err(NumericsError::Shape("gather_rows with no ids".into()));
        }
        let src = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::Index(format!(
                    "row {id} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood over positions whose target is not
    /// `ignore_index`. Returns 0 when every position is ignored.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: usize,
    ) -> Result<Var, NumericsError> {
        let (t, v) = self.dims2(logits);
        if targets.len() != t {
            return Err(NumericsError::Shape(format!(
                "{} targets for {t} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&id| id != ignore_index && id >= v) {
            return Err(NumericsError::Index(format!(
                "target id {bad} out of range for vocabulary of {v}"
            )));
        }
        let src = &self.nodes[logits.0].data;
        let mut probs = vec![0.0; src.len()];
        let mut loss = 0.0;
        let mut count = 0;
        for (r, &target) in targets.iter().enumerate() {
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp();
                total += *p;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p /= total;
            }
            if target != ignore_index {
                loss -= row[target] - max - total.ln();
                count += 1;
            }
        }
        if loss.is_nan() {
            return Err(NumericsError::NonFinite("cross-entropy is NaN".into()));
        }
        let value = if count == 0 { 0.0 } else { loss / count as f64 };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![value],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over stacked problems.
    ///
    /// `q` is `[N×d]`, `k` and `v` are `[M×d]`; each segment attends its
    /// query rows to its key rows only. With `causal`, segment queries must
    /// equal segment keys in length and position `i` sees keys `0..=i`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        causal: bool,
    ) -> Result<Var, NumericsError> {
        let (n, d) = self.dims2(q);
        let (m, dk) = self.dims2(k);
        let (mv, dv) = self.dims2(v);
        if dk != d || dv != d || mv != m {
            return Err(NumericsError::Dimension {
                op: "attention",
                left: self.nodes[q.0].shape.clone(),
                right: self.nodes[k.0].shape.clone(),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::Shape(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        for s in segments {
            if s.q_start + s.q_len > n || s.k_start + s.k_len > m || s.k_len == 0 {
                return Err(NumericsError::Shape(format!(
                    "segment {s:?} outside query rows {n} / key rows {m}"
                )));
            }
            if causal && s.q_len != s.k_len {
                return Err(NumericsError::Shape(format!(
                    "causal segment {s:?} must be square"
                )));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = &self.nodes[q.0].data;
        let kd = &self.nodes[k.0].data;
        let vd = &self.nodes[v.0].data;
        let mut out = vec![0.0; n * d];
        let total_probs: usize = segments.iter().map(|s| s.q_len * s.k_len * heads).sum();
        let mut probs = Vec::with_capacity(total_probs);
        let mut scores = Vec::new();
        for s in segments {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..s.q_len {
                    let qrow = &qd[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + dh];
                    let visible = if causal { i + 1 } else { s.k_len };
                    scores.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..visible {
                        let krow = &kd[(s.k_start + j) * d + c0..(s.k_start + j) * d + c0 + dh];
                        let sc = dot(qrow, krow) * scale;
                        max = max.max(sc);
                        scores.push(sc);
                    }
                    let mut total = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - max).exp();
                        total += *sc;
                    }
                    let orow = &mut out[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + dh];
                    for (j, sc) in scores.iter().enumerate() {
                        let p = sc / total;
                        probs.push(p);
                        let vrow = &vd[(s.k_start + j) * d + c0..(s.k_start + j) * d + c0 + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                    probs.extend(std::iter::repeat_n(0.0, s.k_len - visible));
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            vec![n, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Populates gradients for every
    /// node that requires one; node values are never modified.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        // drop buffers of intermediate nodes; only leaves keep gradients
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *grad = None;
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].data.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn acc_with(&mut self, v: Var, f: impl FnOnce(&[Node], &mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].data.len();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(&self.nodes, buf);
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // Borrow juggling: take the op out, restore it afterwards.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.nodes[b.0].shape[1];
                self.acc_with(*a, |nodes, buf| gemm_nt(g, &nodes[b.0].data, buf, m, n, k));
                self.acc_with(*b, |nodes, buf| gemm_tn(&nodes[a.0].data, g, buf, m, k, n));
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims2(*a);
                if let Some(buf) = self.acc(*a) {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(buf) = self.acc(v) {
                        buf.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(buf) = self.acc(*a) {
                    buf.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                if let Some(buf) = self.acc(*b) {
                    buf.iter_mut().zip(g).for_each(|(o, x)| *o -= x);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.acc_with(a, |nodes, buf| {
                    for ((o, x), y) in buf.iter_mut().zip(g).zip(&nodes[b.0].data) {
                        *o += x * y;
                    }
                });
                self.acc_with(b, |nodes, buf| {
                    for ((o, x), y) in buf.iter_mut().zip(g).zip(&nodes[a.0].data) {
                        *o += x * y;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                if let Some(buf) = self.acc(*x) {
                    buf.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if let Some(buf) = self.acc(*bias) {
                    let d = buf.len();
                    for row in g.chunks(d) {
                        buf.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::Scale(x, f) => {
                let f = *f;
                if let Some(buf) = self.acc(*x) {
                    buf.iter_mut().zip(g).for_each(|(o, v)| *o += v * f);
                }
            }
            Op::MulConst(x, mask) => {
                if let Some(buf) = self.acc(*x) {
                    for ((o, v), m) in buf.iter_mut().zip(g).zip(mask) {
                        *o += v * m;
                    }
                }
            }
            Op::Gelu(x) => {
                let x = *x;
                self.acc_with(x, |nodes, buf| {
                    for ((o, v), xv) in buf.iter_mut().zip(g).zip(&nodes[x.0].data) {
                        *o += v * gelu_grad(*xv);
                    }
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                if let Some(buf) = self.acc(*x) {
                    buf.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            } => {
                let (outer, axis_len, inner) = (*outer, *axis_len, *inner);
                let x = *x;
                let (grads, nodes) = (&mut self.grads, &self.nodes);
                if nodes[x.0].requires_grad {
                    let y = &nodes[idx].data;
                    let len = nodes[x.0].data.len();
                    let buf = grads[x.0].get_or_insert_with(|| vec![0.0; len]);
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * axis_len * inner + i;
                            let s: f64 = (0..axis_len)
                                .map(|j| g[base + j * inner] * y[base + j * inner])
                                .sum();
                            for j in 0..axis_len {
                                let p = base + j * inner;
                                buf[p] += y[p] * (g[p] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *self.nodes[x.0].shape.last().expect("shape");
                if let Some(b) = bias {
                    if let Some(buf) = self.acc(*b) {
                        for row in g.chunks(d) {
                            buf.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                        }
                    }
                }
                if let Some(gn) = gain {
                    if let Some(buf) = self.acc(*gn) {
                        for (row, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                            for ((o, v), h) in buf.iter_mut().zip(row).zip(hrow) {
                                *o += v * h;
                            }
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let gain_vals: Option<Vec<f64>> = gain.map(|gv| self.nodes[gv.0].data.clone());
                    let buf = self.acc(*x).expect("requires grad");
                    let mut dxhat = vec![0.0; d];
                    for (r, (row, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dxhat[j] = row[j] * gain_vals.as_ref().map_or(1.0, |gv| gv[j]);
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh =
                            dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let out = &mut buf[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(buf) = self.acc(*table) {
                    let d = g.len() / ids.len();
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &g[i * d..(i + 1) * d];
                        buf[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_index,
                probs,
                count,
            } => {
                if *count > 0 {
                    let s = g[0] / *count as f64;
                    if let Some(buf) = self.acc(*logits) {
                        let v = buf.len() / targets.len();
                        for (r, &t) in targets.iter().enumerate() {
                            if t == *ignore_index {
                                continue;
                            }
                            let row = &mut buf[r * v..(r + 1) * v];
                            for (o, p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                                *o += s * p;
                            }
                            row[t] -= s;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                self.attention_backward(*q, *k, *v, *heads, segments, probs, g);
            }
        }
        self.nodes[idx].op = op;
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        probs: &[f64],
        g: &[f64],
    ) {
        let (_, d) = self.dims2(q);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let need = [q, k, v].map(|x| self.nodes[x.0].requires_grad);
        if !need.iter().any(|&b| b) {
            return;
        }
        let mut dq = vec![0.0; self.nodes[q.0].data.len()];
        let mut dk = vec![0.0; self.nodes[k.0].data.len()];
        let mut dv = vec![0.0; self.nodes[v.0].data.len()];
        let qd = &self.nodes[q.0].data;
        let kd = &self.nodes[k.0].data;
        let vd = &self.nodes[v.0].data;
        let mut offset = 0;
        let mut dp = Vec::new();
        for s in segments {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..s.q_len {
                    let prow = &probs[offset..offset + s.k_len];
                    offset += s.k_len;
                    let qi = (s.q_start + i) * d + c0;
                    let grow = &g[qi..qi + dh];
                    dp.clear();
                    let mut weighted = 0.0;
                    for (j, &p) in prow.iter().enumerate() {
                        let vj = (s.k_start + j) * d + c0;
                        let val = if p == 0.0 { 0.0 } else { dot(grow, &vd[vj..vj + dh]) };
                        weighted += val * p;
                        dp.push(val);
                        if need[2] && p != 0.0 {
                            for (o, gv) in dv[vj..vj + dh].iter_mut().zip(grow) {
                                *o += p * gv;
                            }
                        }
                    }
                    if !(need[0] || need[1]) {
                        continue;
                    }
                    for (j, &p) in prow.iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let ds = p * (dp[j] - weighted) * scale;
                        let kj = (s.k_start + j) * d + c0;
                        if need[0] {
                            for (o, kv) in dq[qi..qi + dh].iter_mut().zip(&kd[kj..kj + dh]) {
                                *o += ds * kv;
                            }
                        }
                        if need[1] {
                            for (o, qv) in dk[kj..kj + dh].iter_mut().zip(&qd[qi..qi + dh]) {
                                *o += ds * qv;
                            }
                        }
                    }
                }
            }
        }
        for (var, local, needed) in [(q, dq, need[0]), (k, dk, need[1]), (v, dv, need[2])] {
            if needed {
                let buf = self.acc(var).expect("requires grad");
                buf.iter_mut().zip(&local).for_each(|(o, x)| *o += x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::scalar(3.0).with_requires_grad(true));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[2, 2]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn frozen_leaf_gets_no_grad() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::filled(&[2, 2], 1.0).with_requires_grad(true));
        let b = g.leaf(&Tensor::filled(&[2, 2], 2.0));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert!(g.grad(a).is_some());
        assert!(g.grad(b).is_none());
        assert!(g.tensor(b).grad().is_none());
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::zeros(&[2, 3]));
        let b = g.leaf(&Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut g = Graph::new();
        let l = g.leaf(&Tensor::zeros(&[2, 4]));
        assert!(matches!(
            g.cross_entropy(l, &[1, 4], usize::MAX),
            Err(NumericsError::Index(_))
        ));
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = g.constant(&[2], vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(g.softmax(x, 0), Err(NumericsError::NonFinite(_))));
    }

    #[test]
    fn causal_attention_ignores_future_keys() {
        let mut g = Graph::new();
        let q = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = g.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = g.attention(q, q, v, 1, &[Segment::square(0, 2)], true).unwrap();
        // first query can only see the first value row
        assert_eq!(&g.value(out)[..2], &[1.0, 2.0]);
    }
}
