//! Tensor-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! the tape by reference through [`Tape::param`]; only those flagged
//! trainable receive gradients, and backward propagation is skipped for any
//! subgraph that does not depend on a trainable parameter.
//!
//! All tensors on the tape are viewed as matrices (last dimension = columns)
//! except for the image ops, which use channels-last `[batch, height, width,
//! channels]` layout.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub type Gradients = BTreeMap<String, Tensor>;

/// A window of rows contributed to each assembled sequence.
///
/// The source is viewed as blocks of `block` rows: one block per item when
/// `per_item`, otherwise a single block shared by every item. Rows
/// `start..start + rows` of the item's block are copied.
#[derive(Debug, Clone, Copy)]
pub struct SeqPart {
    pub var: Var,
    pub block: usize,
    pub start: usize,
    pub rows: usize,
    pub per_item: bool,
}

impl SeqPart {
    /// The whole source, shared by every item.
    pub fn shared(var: Var, rows: usize) -> Self {
        Self { var, block: rows, start: 0, rows, per_item: false }
    }

    /// One full block of `rows` rows per item.
    pub fn per_item(var: Var, rows: usize) -> Self {
        Self { var, block: rows, start: 0, rows, per_item: true }
    }

    /// Rows `start..start + rows` of each item's block of `block` rows.
    pub fn window(var: Var, block: usize, start: usize, rows: usize) -> Self {
        Self { var, block, start, rows, per_item: true }
    }

    fn offset(&self, item: usize, d: usize) -> usize {
        let b = if self.per_item { item } else { 0 };
        (b * self.block + self.start) * d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Im2ColGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Im2ColGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

enum Op {
    Input,
    Param { name: String, trainable: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddTiled { x: Var, tile: Var },
    Scale { x: Var, factor: f64 },
    Gelu { x: Var },
    Relu { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
    Assemble { parts: Vec<SeqPart>, batch: usize },
    SelectRows { x: Var, seq: usize, index: usize },
    L2Normalize { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Sum { x: Var },
    Reshape { x: Var },
    Im2Col { x: Var, geom: Im2ColGeometry },
    MaxPool2 { x: Var, argmax: Vec<usize> },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward pass for later differentiation.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: HashMap<String, Var>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
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
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (never differentiated).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn input_ref(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named parameter. Registering the same name twice returns
    /// the existing node, so shared weights accumulate a single gradient.
    pub fn param(&mut self, name: &str, t: &'p Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Param {
                name: name.to_string(),
                trainable,
            },
            requires_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Registers `name` from a parameter set, honoring its trainable flag.
    pub fn bind(&mut self, params: &'p ParamSet, name: &str) -> Result<Var> {
        let p = params.get(name)?;
        Ok(self.param(name, &p.tensor, p.trainable))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn mat(&self, v: Var) -> (usize, usize) {
        self.value(v).as_matrix_dims()
    }

    /// `y = x W + b` with `x: [n, d_in]`, `W: [d_in, d_out]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, k) = self.mat(x);
        let ws = self.value(w).shape();
        if ws.len() != 2 || ws[0] != k {
            return Err(Error::dim(
                "linear",
                format!("x is [{n}, {k}] but W is {ws:?}"),
            ));
        }
        let m = ws[1];
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if self.value(b).numel() != m {
                return Err(Error::dim(
                    "linear",
                    format!("W is [{k}, {m}] but b is {bs:?}"),
                ));
            }
        }
        let mut out = vec![0.0; n * m];
        kernels::matmul(self.value(x).data(), self.value(w).data(), &mut out, n, k, m);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_exact_mut(m) {
                for (o, bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let mut shape = self.value(x).shape().to_vec();
        *shape.last_mut().unwrap() = m;
        if shape.len() == 1 {
            shape = vec![1, m];
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, rg))
    }

    /// `a bᵀ` with `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a);
        let (n, k2) = self.mat(b);
        if k != k2 {
            return Err(Error::dim(
                "matmul_nt",
                format!("a is [{m}, {k}] but b is [{n}, {k2}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_a_bt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add { a, b }, rg))
    }

    /// Adds `tile` (`[r, d]`) to every consecutive block of `r` rows of `x`.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (n, d) = self.mat(x);
        let (r, d2) = self.mat(tile);
        if d != d2 || n % r != 0 {
            return Err(Error::dim(
                "add_tiled",
                format!("x is [{n}, {d}] but tile is [{r}, {d2}]"),
            ));
        }
        let td = self.value(tile).data();
        let mut out = self.value(x).data().to_vec();
        for block in out.chunks_exact_mut(r * d) {
            for (o, t) in block.iter_mut().zip(td) {
                *o += t;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, tile]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddTiled { x, tile }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Scale { x, factor }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Gelu { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Relu { x }, rg)
    }

    /// Row-wise layer normalization followed by `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.mat(x);
        if d == 0 {
            return Err(Error::EmptyDimension("layer_norm"));
        }
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "rows have {d} features but gamma/beta have {}/{}",
                    self.value(gamma).numel(),
                    self.value(beta).numel()
                ),
            ));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            rg,
        ))
    }

    /// Scaled dot-product attention over `batch` sequences of `seq` rows,
    /// split into `heads` column groups: `softmax(Q Kᵀ / √d_h) V` per head.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (n, d) = self.mat(q);
        if self.mat(k) != (n, d) || self.mat(v) != (n, d) {
            return Err(Error::dim("attention", "q, k and v must share one shape"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {d} is not divisible by {heads} heads"
            )));
        }
        if n != batch * seq {
            return Err(Error::dim(
                "attention",
                format!("{n} rows cannot hold {batch} sequences of {seq}"),
            ));
        }
        let dh = d / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; n * d];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                let col = h * dh;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + col..][..dh];
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &kd[(b * seq + j) * d + col..][..dh];
                        *s = kernels::dot(qi, kj) * inv;
                        max = max.max(*s);
                    }
                    let mut z = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    for s in row.iter_mut() {
                        *s /= z;
                    }
                    let oi = &mut out[(b * seq + i) * d + col..][..dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let vj = &vd[(b * seq + j) * d + col..][..dh];
                        for (o, vv) in oi.iter_mut().zip(vj) {
                            *o += pij * vv;
                        }
                    }
                }
            }
        }
        let shape = self.value(q).shape().to_vec();
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Attention { q, k, v, batch, seq, heads, probs },
            rg,
        ))
    }

    /// Builds `batch` sequences, each the concatenation of one block of rows
    /// from every part, stacked into `[batch * Σrows, d]`.
    pub fn assemble(&mut self, parts: &[SeqPart], batch: usize) -> Result<Var> {
        let d = match parts.first() {
            Some(p) => self.mat(p.var).1,
            None => return Err(Error::dim("assemble", "no parts")),
        };
        for p in parts {
            let (n, dp) = self.mat(p.var);
            let want = if p.per_item { batch * p.block } else { p.block };
            if dp != d || n != want || p.start + p.rows > p.block {
                return Err(Error::dim(
                    "assemble",
                    format!(
                        "part is [{n}, {dp}], expected [{want}, {d}] with rows {}..{} of {}",
                        p.start,
                        p.start + p.rows,
                        p.block
                    ),
                ));
            }
        }
        let total: usize = parts.iter().map(|p| p.rows).sum();
        let mut out = Vec::with_capacity(batch * total * d);
        for b in 0..batch {
            for p in parts {
                let src = self.value(p.var).data();
                let start = p.offset(b, d);
                out.extend_from_slice(&src[start..start + p.rows * d]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(&[p.var]));
        Ok(self.push(
            Tensor::from_parts(vec![batch * total, d], out),
            Op::Assemble { parts: parts.to_vec(), batch },
            rg,
        ))
    }

    /// Row `index` of every block of `seq` rows.
    pub fn select_rows(&mut self, x: Var, seq: usize, index: usize) -> Result<Var> {
        let (n, d) = self.mat(x);
        if seq == 0 || n % seq != 0 || index >= seq {
            return Err(Error::dim(
                "select_rows",
                format!("cannot take row {index} of blocks of {seq} from {n} rows"),
            ));
        }
        let xd = self.value(x).data();
        let batch = n / seq;
        let mut out = Vec::with_capacity(batch * d);
        for b in 0..batch {
            out.extend_from_slice(&xd[(b * seq + index) * d..][..d]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, d], out),
            Op::SelectRows { x, seq, index },
            rg,
        ))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let (n, d) = self.mat(x);
        let xd = self.value(x).data();
        let mut norms = Vec::with_capacity(n);
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xd[r * d..(r + 1) * d];
            let norm = kernels::dot(row, row).sqrt().max(1e-12);
            norms.push(norm);
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::L2Normalize { x, norms }, rg)
    }

    /// Mean softmax cross-entropy of `logits: [n, C]` against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.mat(logits);
        if labels.len() != n {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{n} logit rows but {} labels", labels.len()),
            ));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Label { index, label, classes: c });
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &ld[r * c..(r + 1) * c];
            let p = &mut probs[r * c..(r + 1) * c];
            let lse = kernels::softmax_into(row, p);
            loss += lse - row[labels[r]];
        }
        loss /= n as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Unfolds square `kernel` windows of a channels-last image batch into
    /// rows of `kernel·kernel·channels` values ordered (row, column, channel).
    pub fn im2col(&mut self, x: Var, geom: Im2ColGeometry) -> Result<Var> {
        let expect = geom.batch * geom.height * geom.width * geom.channels;
        if self.value(x).numel() != expect
            || geom.kernel == 0
            || geom.stride == 0
            || geom.kernel > geom.height + 2 * geom.padding
            || geom.kernel > geom.width + 2 * geom.padding
        {
            return Err(Error::dim(
                "im2col",
                format!("input {:?} does not match {geom:?}", self.value(x).shape()),
            ));
        }
        let (ho, wo, pl) = (geom.out_height(), geom.out_width(), geom.patch_len());
        let xd = self.value(x).data();
        let mut out = vec![0.0; geom.batch * ho * wo * pl];
        kernels::for_each_im2col(&geom, |dst, src| out[dst] = xd[src]);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![geom.batch * ho * wo, pl], out),
            Op::Im2Col { x, geom },
            rg,
        ))
    }

    /// 2×2 max pooling with stride 2 on `[batch, h, w, c]`; ties pick the first
    /// element in row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::dim(
                "max_pool2",
                format!("expected [b, even h, even w, c], got {s:?}"),
            ));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * ho * wo * c];
        let mut argmax = vec![0; out.len()];
        for bi in 0..b {
            for i in 0..ho {
                for j in 0..wo {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let src = ((bi * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                            if best == usize::MAX || xd[src] > xd[best] {
                                best = src;
                            }
                        }
                        let dst = ((bi * ho + i) * wo + j) * c + ch;
                        out[dst] = xd[best];
                        argmax[dst] = best;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![b, ho, wo, c], out),
            Op::MaxPool2 { x, argmax },
            rg,
        ))
    }

    /// Reverse pass from the scalar `loss`. Returns gradients for exactly the
    /// trainable parameters the loss depends on, keyed by name.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut result = Gradients::new();
        if !self.nodes[loss.0].requires_grad {
            return Ok(result);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, g, &mut grads, &mut result);
        }
        Ok(result)
    }

    fn backprop_node(
        &self,
        node: &Node<'p>,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        result: &mut Gradients,
    ) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Input => {}
            Op::Param { name, trainable } => {
                if *trainable {
                    result.insert(
                        name.clone(),
                        Tensor::from_parts(node.value.shape().to_vec(), g),
                    );
                }
            }
            Op::Linear { x, w, b } => {
                let (n, k) = self.mat(*x);
                let m = self.value(*w).shape()[1];
                if needs(*w) {
                    let mut gw = vec![0.0; k * m];
                    kernels::matmul_at_b(val(*x), &g, &mut gw, n, k, m);
                    accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let mut gb = vec![0.0; m];
                        for row in g.chunks_exact(m) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        accumulate(grads, *b, gb);
                    }
                }
                if needs(*x) {
                    let mut gx = vec![0.0; n * k];
                    kernels::matmul_a_bt(&g, val(*w), &mut gx, n, m, k);
                    accumulate(grads, *x, gx);
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = self.mat(*a);
                let (n, _) = self.mat(*b);
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul(&g, val(*b), &mut ga, m, n, k);
                    accumulate(grads, *a, ga);
                }
                if needs(*b) {
                    let mut gb = vec![0.0; n * k];
                    kernels::matmul_at_b(&g, val(*a), &mut gb, m, n, k);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add { a, b } => {
                if needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
                if needs(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::AddTiled { x, tile } => {
                if needs(*tile) {
                    let len = self.value(*tile).numel();
                    let mut gt = vec![0.0; len];
                    for block in g.chunks_exact(len) {
                        for (o, v) in gt.iter_mut().zip(block) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *tile, gt);
                }
                if needs(*x) {
                    accumulate(grads, *x, g);
                }
            }
            Op::Scale { x, factor } => {
                accumulate(grads, *x, g.iter().map(|v| v * factor).collect());
            }
            Op::Gelu { x } => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::Relu { x } => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (n, d) = self.mat(*x);
                if needs(*gamma) {
                    let mut gg = vec![0.0; d];
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                    accumulate(grads, *gamma, gg);
                }
                if needs(*beta) {
                    let mut gb = vec![0.0; d];
                    for grow in g.chunks_exact(d) {
                        for (o, v) in gb.iter_mut().zip(grow) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *beta, gb);
                }
                if needs(*x) {
                    let gam = val(*gamma);
                    let mut gx = vec![0.0; n * d];
                    let mut dh = vec![0.0; d];
                    for r in 0..n {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dh[j] = grow[j] * gam[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = kernels::dot(&dh, hrow) / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Attention { q, k, v, batch, seq, heads, probs } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let (n, d) = self.mat(*q);
                let dh = d / heads;
                let inv = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut gq = vec![0.0; n * d];
                let mut gk = vec![0.0; n * d];
                let mut gv = vec![0.0; n * d];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                        let col = h * dh;
                        for i in 0..seq {
                            let gi = &g[(b * seq + i) * d + col..][..dh];
                            let prow = &p[i * seq..(i + 1) * seq];
                            for j in 0..seq {
                                let vj = &vd[(b * seq + j) * d + col..][..dh];
                                dp[j] = kernels::dot(gi, vj);
                                let gvj = &mut gv[(b * seq + j) * d + col..][..dh];
                                for (o, gg) in gvj.iter_mut().zip(gi) {
                                    *o += prow[j] * gg;
                                }
                            }
                            let centre = kernels::dot(prow, &dp);
                            let qi = &qd[(b * seq + i) * d + col..][..dh];
                            for j in 0..seq {
                                let ds = prow[j] * (dp[j] - centre) * inv;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kd[(b * seq + j) * d + col..][..dh];
                                let gqi = &mut gq[(b * seq + i) * d + col..][..dh];
                                for (o, kv) in gqi.iter_mut().zip(kj) {
                                    *o += ds * kv;
                                }
                                let gkj = &mut gk[(b * seq + j) * d + col..][..dh];
                                for (o, qv) in gkj.iter_mut().zip(qi) {
                                    *o += ds * qv;
                                }
                            }
                        }
                    }
                }
                if needs(*v) {
                    accumulate(grads, *v, gv);
                }
                if needs(*k) {
                    accumulate(grads, *k, gk);
                }
                if needs(*q) {
                    accumulate(grads, *q, gq);
                }
            }
            Op::Assemble { parts, batch } => {
                let d = self.mat(parts[0].var).1;
                let total: usize = parts.iter().map(|p| p.rows).sum();
                let mut pg: Vec<Option<Vec<f64>>> = parts
                    .iter()
                    .map(|p| needs(p.var).then(|| vec![0.0; self.value(p.var).numel()]))
                    .collect();
                for b in 0..*batch {
                    let mut off = b * total * d;
                    for (p, buf) in parts.iter().zip(pg.iter_mut()) {
                        let len = p.rows * d;
                        if let Some(buf) = buf {
                            let start = p.offset(b, d);
                            for (o, v) in buf[start..start + len].iter_mut().zip(&g[off..off + len]) {
                                *o += v;
                            }
                        }
                        off += len;
                    }
                }
                for (p, buf) in parts.iter().zip(pg) {
                    if let Some(buf) = buf {
                        accumulate(grads, p.var, buf);
                    }
                }
            }
            Op::SelectRows { x, seq, index } => {
                let (n, d) = self.mat(*x);
                let mut gx = vec![0.0; n * d];
                for (b, grow) in g.chunks_exact(d).enumerate() {
                    gx[(b * seq + index) * d..][..d].copy_from_slice(grow);
                }
                accumulate(grads, *x, gx);
            }
            Op::L2Normalize { x, norms } => {
                let d = self.mat(*x).1;
                let y = node.value.data();
                let mut gx = vec![0.0; g.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let proj = kernels::dot(yr, gr);
                    for j in 0..d {
                        gx[r * d + j] = (gr[j] - yr[j] * proj) / norm;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.mat(*logits).1;
                let n = labels.len();
                let scale = g[0] / n as f64;
                let mut gl = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * c + l] -= 1.0;
                }
                for v in gl.iter_mut() {
                    *v *= scale;
                }
                accumulate(grads, *logits, gl);
            }
            Op::Sum { x } => {
                accumulate(grads, *x, vec![g[0]; self.value(*x).numel()]);
            }
            Op::Reshape { x } => accumulate(grads, *x, g),
            Op::Im2Col { x, geom } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                kernels::for_each_im2col(geom, |dst, src| gx[src] += g[dst]);
                accumulate(grads, *x, gx);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (gv, &src) in g.iter().zip(argmax) {
                    gx[src] += gv;
                }
                accumulate(grads, *x, gx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(&g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) mod kernels {
    use super::Im2ColGeometry;

    const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const GELU_A: f64 = 0.044_715;

    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
    }

    pub fn gelu_grad(x: f64) -> f64 {
        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    }

    /// Writes softmax of `row` into `out` and returns log-sum-exp.
    pub fn softmax_into(row: &[f64], out: &mut [f64]) -> f64 {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - max).exp();
            z += *o;
        }
        for o in out.iter_mut() {
            *o /= z;
        }
        max + z.ln()
    }

    /// `out[m×n] += a[m×k] · b[k×n]`
    pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
    }

    /// `out[k×n] += a[m×k]ᵀ · g[m×n]`
    pub fn matmul_at_b(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
    }

    /// `out[m×n] = a[m×k] · b[n×k]ᵀ`
    pub fn matmul_a_bt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
    }

    /// Calls `f(dst, src)` for every in-bounds element copied by im2col.
    pub fn for_each_im2col(g: &Im2ColGeometry, mut f: impl FnMut(usize, usize)) {
        let (ho, wo, pl) = (g.out_height(), g.out_width(), g.patch_len());
        for b in 0..g.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (b * ho + oy) * wo + ox;
                    for ky in 0..g.kernel {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for kx in 0..g.kernel {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            let src = ((b * g.height + iy as usize) * g.width + ix as usize)
                                * g.channels;
                            let dst = row * pl + (ky * g.kernel + kx) * g.channels;
                            for c in 0..g.channels {
                                f(dst + c, src + c);
                            }
                        }
                    }
                }
            }
        }
    }
}
