//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs are earlier nodes, so the tape
//! is topologically ordered by construction and the backward pass is a single
//! reverse sweep. Operations work on 2-D row-major values; per-limb and
//! per-graph structure is expressed through row blocks (`block`) and row groups
//! (`group`), which lets one node process a whole minibatch.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, gemm_alloc, normalize_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Affine { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Relu(Var),
    Tanh(Var),
    Square(Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    Gram { a: Var, block: usize },
    AttnLogits { q: Var, k: Var, heads: usize, group: usize },
    Softmax(Var),
    AttnApply { alpha: Var, x: Var, heads: usize, group: usize, block: usize },
    HeadMean { alpha: Var, heads: usize, group: usize },
    LayerNorm { x: Var, gain: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BlockMatVec { u: Var, r: Var, block: usize },
    GroupMean { x: Var, group: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. One tape per logical thread of execution.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by a backward sweep. Interior nodes are not kept.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

/// Moves `src` into an empty slot, or adds it to an occupied one.
fn give(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

/// Adds `f(i)` to each entry, allocating the slot on first touch.
fn add_map(dst: &mut Option<Vec<f64>>, len: usize, f: impl Fn(usize) -> f64) {
    match dst {
        Some(d) => d.iter_mut().enumerate().for_each(|(i, a)| *a += f(i)),
        None => *dst = Some((0..len).map(f).collect()),
    }
}

fn slot(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
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

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf. Gradients flow to it iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let ng = t.requires_grad;
        self.push(t, Op::Leaf, ng)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((n, k), (k2, m)) = (dims2(ta), dims2(tb));
        if k != k2 || ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(shape_err(format!("matmul of {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let out = gemm_alloc(n, k, m, ta.data(), false, tb.data(), false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), ng))
    }

    /// `x·w + b` with the bias broadcast over rows; one node instead of a
    /// matmul followed by [`Tape::add_row_bias`].
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let ((n, k), (k2, m)) = (dims2(tx), dims2(tw));
        if k != k2 || tx.shape().len() != 2 || tw.shape().len() != 2 || tb.len() != m {
            return Err(shape_err(format!(
                "affine of {:?} with weight {:?} and bias {:?}",
                tx.shape(),
                tw.shape(),
                tb.shape()
            )));
        }
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(tb.data());
        }
        gemm(n, k, m, tx.data(), false, tw.data(), false, &mut out, true);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Affine { x, w, b }, ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!(
                "{what} of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let out: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x[n×m] + b[m]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let m = self.value(x).cols();
        if self.value(b).len() != m {
            return Err(shape_err(format!(
                "bias {:?} for rows of {:?}",
                self.value(b).shape(),
                self.value(x).shape()
            )));
        }
        let bias = self.data(b).to_vec();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(m) {
            row.iter_mut().zip(&bias).for_each(|(v, c)| *v += c);
        }
        let shape = self.value(x).shape().to_vec();
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRowBias(x, b), ng))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out: Vec<f64> = self.data(x).iter().map(|v| f(*v)).collect();
        let shape = self.value(x).shape().to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, op, ng))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Square(x), |v| v * v)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            let shapes: Vec<_> = parts.iter().map(|p| self.value(*p).shape().to_vec()).collect();
            return Err(shape_err(format!("concat_cols over row counts {shapes:?}")));
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(*p)[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// For each consecutive block of `block` rows `A_n` of `a` (width `c`),
    /// emits the flattened Gram matrix `A_nᵀ A_n` as one row of width `c²`.
    pub fn gram(&mut self, a: Var, block: usize) -> Result<Var> {
        let (rows, c) = dims2(self.value(a));
        if rows % block != 0 {
            return Err(shape_err(format!("gram blocks of {block} rows over {:?}", self.value(a).shape())));
        }
        let n = rows / block;
        let src = self.data(a);
        let mut out = vec![0.0; n * c * c];
        for b in 0..n {
            let blk = &src[b * block * c..(b + 1) * block * c];
            let dst = &mut out[b * c * c..(b + 1) * c * c];
            for i in 0..c {
                for j in i..c {
                    let mut s = 0.0;
                    for r in 0..block {
                        s += blk[r * c + i] * blk[r * c + j];
                    }
                    dst[i * c + j] = s;
                    dst[j * c + i] = s;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![n, c * c], out)?, Op::Gram { a, block }, ng))
    }

    /// Per graph (`group` consecutive rows) and head, the logits `q_iᵀ k_j`.
    /// Output row `(g·heads + h)·group + i` holds the logits of query `i`.
    pub fn attn_logits(&mut self, q: Var, k: Var, heads: usize, group: usize) -> Result<Var> {
        self.same_shape(q, k, "attention logits")?;
        let (rows, width) = dims2(self.value(q));
        if rows % group != 0 || width % heads != 0 {
            return Err(shape_err(format!(
                "attention over {:?} with {heads} heads and groups of {group}",
                self.value(q).shape()
            )));
        }
        let dk = width / heads;
        let graphs = rows / group;
        let (qd, kd) = (self.data(q), self.data(k));
        let mut out = vec![0.0; graphs * heads * group * group];
        for g in 0..graphs {
            for h in 0..heads {
                for i in 0..group {
                    let qi = &qd[(g * group + i) * width + h * dk..][..dk];
                    let orow = ((g * heads + h) * group + i) * group;
                    for j in 0..group {
                        let kj = &kd[(g * group + j) * width + h * dk..][..dk];
                        out[orow + j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k);
        let t = Tensor::new(vec![graphs * heads * group, group], out)?;
        Ok(self.push(t, Op::AttnLogits { q, k, heads, group }, ng))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = crate::tensor::softmax_rows(self.value(x))?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Softmax(x), ng))
    }

    /// Attention-weighted aggregation. `alpha` has rows `(g·heads + h)·group + i`;
    /// `x` has rows `(g·group + j)·block + r` and its columns are split into
    /// `heads` equal chunks. Output row `(g·group + i)·block + r`, chunk `h`
    /// is `Σ_j alpha[g,h,i,j] · x[(g·group + j)·block + r, chunk h]`.
    pub fn attn_apply(&mut self, alpha: Var, x: Var, heads: usize, group: usize, block: usize) -> Result<Var> {
        let (arows, acols) = dims2(self.value(alpha));
        let (xrows, width) = dims2(self.value(x));
        if acols != group
            || xrows % (group * block) != 0
            || arows != xrows / block * heads
            || width % heads != 0
        {
            return Err(shape_err(format!(
                "attention apply of {:?} to {:?} (heads {heads}, group {group}, block {block})",
                self.value(alpha).shape(),
                self.value(x).shape()
            )));
        }
        let graphs = xrows / (group * block);
        let dv = width / heads;
        let (ad, xd) = (self.data(alpha), self.data(x));
        let mut out = vec![0.0; xrows * width];
        for g in 0..graphs {
            for h in 0..heads {
                for i in 0..group {
                    let arow = &ad[((g * heads + h) * group + i) * group..][..group];
                    for r in 0..block {
                        let orow = ((g * group + i) * block + r) * width + h * dv;
                        for (j, &w) in arow.iter().enumerate() {
                            let xrow = ((g * group + j) * block + r) * width + h * dv;
                            for t in 0..dv {
                                out[orow + t] += w * xd[xrow + t];
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(alpha) || self.ng(x);
        let t = Tensor::new(vec![xrows, width], out)?;
        Ok(self.push(t, Op::AttnApply { alpha, x, heads, group, block }, ng))
    }

    /// Averages attention maps over heads: `[G·H·V × V] → [G·V × V]`.
    pub fn head_mean(&mut self, alpha: Var, heads: usize, group: usize) -> Result<Var> {
        let (rows, cols) = dims2(self.value(alpha));
        if cols != group || rows % (heads * group) != 0 {
            return Err(shape_err(format!("head mean of {:?}", self.value(alpha).shape())));
        }
        let graphs = rows / (heads * group);
        let ad = self.data(alpha);
        let mut out = vec![0.0; graphs * group * group];
        let inv = 1.0 / heads as f64;
        for g in 0..graphs {
            for h in 0..heads {
                let src = &ad[(g * heads + h) * group * group..][..group * group];
                let dst = &mut out[g * group * group..][..group * group];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s * inv);
            }
        }
        let ng = self.ng(alpha);
        let t = Tensor::new(vec![graphs * group, group], out)?;
        Ok(self.push(t, Op::HeadMean { alpha, heads, group }, ng))
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err(format!(
                "layer norm of {:?} with gain {:?} / bias {:?}",
                self.value(x).shape(),
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let mut xhat = self.data(x).to_vec();
        let mut inv_std = Vec::with_capacity(xhat.len() / d);
        for row in xhat.chunks_mut(d) {
            inv_std.push(normalize_in_place(row).1);
        }
        let g = self.data(gain);
        let out: Vec<f64> =
            xhat.chunks(d).flat_map(|row| row.iter().zip(g).map(|(v, g)| v * g)).collect();
        let shape = self.value(x).shape().to_vec();
        let ng = self.ng(x) || self.ng(gain);
        let scaled = self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gain, xhat, inv_std }, ng);
        self.add_row_bias(scaled, bias)
    }

    /// For each `n`, multiplies the `block × c` row block `U_n` of `u` by row
    /// `r_n` of `r`, giving a `[N·block × 1]` column.
    pub fn block_matvec(&mut self, u: Var, r: Var, block: usize) -> Result<Var> {
        let (urows, c) = dims2(self.value(u));
        let (rrows, rc) = dims2(self.value(r));
        if rc != c || urows != rrows * block {
            return Err(shape_err(format!(
                "block matvec of {:?} with {:?} (block {block})",
                self.value(u).shape(),
                self.value(r).shape()
            )));
        }
        let (ud, rd) = (self.data(u), self.data(r));
        let out: Vec<f64> = (0..urows)
            .map(|row| {
                let n = row / block;
                ud[row * c..(row + 1) * c].iter().zip(&rd[n * c..(n + 1) * c]).map(|(a, b)| a * b).sum()
            })
            .collect();
        let ng = self.ng(u) || self.ng(r);
        Ok(self.push(Tensor::new(vec![urows, 1], out)?, Op::BlockMatVec { u, r, block }, ng))
    }

    /// Mean over each group of `group` consecutive rows: `[G·V × c] → [G × c]`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, c) = dims2(self.value(x));
        if rows % group != 0 {
            return Err(shape_err(format!("group mean of {:?} by {group}", self.value(x).shape())));
        }
        let graphs = rows / group;
        let xd = self.data(x);
        let mut out = vec![0.0; graphs * c];
        for (row, chunk) in xd.chunks(c).enumerate() {
            let dst = &mut out[(row / group) * c..][..c];
            dst.iter_mut().zip(chunk).for_each(|(d, s)| *d += s / group as f64);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![graphs, c], out)?, Op::GroupMean { x, group }, ng))
    }

    /// Sign pattern of every ReLU input on the tape. Two evaluations with equal
    /// signatures lie on the same smooth piece of the network.
    pub fn relu_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                sig.extend(self.data(x).iter().map(|v| *v > 0.0));
            }
        }
        sig
    }

    /// Reverse sweep from a scalar `loss`. Only leaves keep their gradient.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
            } else if let Some(dy) = self.pass_through(node, dy, &mut grads) {
                self.backprop(node, &dy, &mut grads);
            }
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::gradients`] and accumulates the result into the `grad`
    /// field of every `requires_grad` leaf. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter_mut().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                if let Some(g) = grads.grads[i].as_deref() {
                    node.value.accumulate_grad(g);
                }
            }
        }
        Ok(grads)
    }

    pub fn leaf_grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    /// Ops whose input gradient is `dy` itself hand the buffer down instead
    /// of copying it. Returns `dy` back for every other op.
    fn pass_through(&self, node: &Node, dy: Vec<f64>, grads: &mut [Option<Vec<f64>>]) -> Option<Vec<f64>> {
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match node.op {
            Op::Reshape(x) => give(&mut grads[x.0], dy),
            Op::Add(a, b) => match (ng(a), ng(b)) {
                (true, true) => {
                    add_into(&mut grads[a.0], &dy);
                    give(&mut grads[b.0], dy);
                }
                (true, false) => give(&mut grads[a.0], dy),
                (false, true) => give(&mut grads[b.0], dy),
                (false, false) => {}
            },
            Op::Sub(a, b) => {
                if ng(b) {
                    add_map(&mut grads[b.0], dy.len(), |i| -dy[i]);
                }
                if ng(a) {
                    give(&mut grads[a.0], dy);
                }
            }
            Op::AddRowBias(x, b) => {
                if ng(b) {
                    let m = self.nodes[b.0].value.len();
                    let gb = slot(&mut grads[b.0], m);
                    for row in dy.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
                if ng(x) {
                    give(&mut grads[x.0], dy);
                }
            }
            _ => return Some(dy),
        }
        None
    }

    fn backprop(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ((n, k), (_, m)) = (dims2(val(*a)), dims2(val(*b)));
                if ng(*a) {
                    match &mut grads[a.0] {
                        Some(ga) => gemm(n, m, k, dy, false, val(*b).data(), true, ga, true),
                        g => *g = Some(gemm_alloc(n, m, k, dy, false, val(*b).data(), true)),
                    }
                }
                if ng(*b) {
                    match &mut grads[b.0] {
                        Some(gb) => gemm(k, n, m, val(*a).data(), true, dy, false, gb, true),
                        g => *g = Some(gemm_alloc(k, n, m, val(*a).data(), true, dy, false)),
                    }
                }
            }
            Op::Affine { x, w, b } => {
                let ((n, k), (_, m)) = (dims2(val(*x)), dims2(val(*w)));
                if ng(*x) {
                    match &mut grads[x.0] {
                        Some(gx) => gemm(n, m, k, dy, false, val(*w).data(), true, gx, true),
                        g => *g = Some(gemm_alloc(n, m, k, dy, false, val(*w).data(), true)),
                    }
                }
                if ng(*w) {
                    match &mut grads[w.0] {
                        Some(gw) => gemm(k, n, m, val(*x).data(), true, dy, false, gw, true),
                        g => *g = Some(gemm_alloc(k, n, m, val(*x).data(), true, dy, false)),
                    }
                }
                if ng(*b) {
                    let gb = slot(&mut grads[b.0], m);
                    for row in dy.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Add(a, b) => {
                if ng(*a) {
                    add_into(&mut grads[a.0], dy);
                }
                if ng(*b) {
                    add_into(&mut grads[b.0], dy);
                }
            }
            Op::Sub(a, b) => {
                if ng(*a) {
                    add_into(&mut grads[a.0], dy);
                }
                if ng(*b) {
                    add_map(&mut grads[b.0], dy.len(), |i| -dy[i]);
                }
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    let y = val(*b).data();
                    add_map(&mut grads[a.0], dy.len(), |i| dy[i] * y[i]);
                }
                if ng(*b) {
                    let x = val(*a).data();
                    add_map(&mut grads[b.0], dy.len(), |i| dy[i] * x[i]);
                }
            }
            Op::AddRowBias(x, b) => {
                if ng(*x) {
                    add_into(&mut grads[x.0], dy);
                }
                if ng(*b) {
                    let m = val(*b).len();
                    let gb = slot(&mut grads[b.0], m);
                    for row in dy.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Relu(x) => {
                let v = val(*x).data();
                add_map(&mut grads[x.0], dy.len(), |i| if v[i] > 0.0 { dy[i] } else { 0.0 });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                add_map(&mut grads[x.0], dy.len(), |i| dy[i] * (1.0 - y[i] * y[i]));
            }
            Op::Square(x) => {
                let v = val(*x).data();
                add_map(&mut grads[x.0], dy.len(), |i| 2.0 * dy[i] * v[i]);
            }
            Op::Scale(x, s) => {
                add_map(&mut grads[x.0], dy.len(), |i| dy[i] * s);
            }
            Op::Sum(x) => {
                add_map(&mut grads[x.0], val(*x).len(), |_| dy[0]);
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                add_map(&mut grads[x.0], n, |_| dy[0] / n as f64);
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], dy),
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if ng(*p) {
                        let gp = slot(&mut grads[p.0], rows * w);
                        for r in 0..rows {
                            let src = &dy[r * total + off..r * total + off + w];
                            gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(g, d)| *g += d);
                        }
                    }
                    off += w;
                }
            }
            Op::Gram { a, block } => {
                let (rows, c) = dims2(val(*a));
                let src = val(*a).data();
                let ga = slot(&mut grads[a.0], rows * c);
                // dA_n = A_n (G + Gᵀ)
                for b in 0..rows / block {
                    let g = &dy[b * c * c..(b + 1) * c * c];
                    for r in 0..*block {
                        let arow = &src[(b * block + r) * c..][..c];
                        let grow = &mut ga[(b * block + r) * c..][..c];
                        for j in 0..c {
                            let mut s = 0.0;
                            for i in 0..c {
                                s += arow[i] * (g[i * c + j] + g[j * c + i]);
                            }
                            grow[j] += s;
                        }
                    }
                }
            }
            Op::AttnLogits { q, k, heads, group } => {
                let (rows, width) = dims2(val(*q));
                let dk = width / heads;
                let graphs = rows / group;
                let (qd, kd) = (val(*q).data(), val(*k).data());
                let mut gq = vec![0.0; rows * width];
                let mut gk = vec![0.0; rows * width];
                for g in 0..graphs {
                    for h in 0..*heads {
                        for i in 0..*group {
                            let drow = &dy[((g * heads + h) * group + i) * group..][..*group];
                            let qi = (g * group + i) * width + h * dk;
                            for (j, &d) in drow.iter().enumerate() {
                                let kj = (g * group + j) * width + h * dk;
                                for t in 0..dk {
                                    gq[qi + t] += d * kd[kj + t];
                                    gk[kj + t] += d * qd[qi + t];
                                }
                            }
                        }
                    }
                }
                if ng(*q) {
                    add_into(&mut grads[q.0], &gq);
                }
                if ng(*k) {
                    add_into(&mut grads[k.0], &gk);
                }
            }
            Op::Softmax(x) => {
                let cols = node.value.cols();
                let mut g = Vec::with_capacity(dy.len());
                for (yr, dr) in node.value.data().chunks(cols).zip(dy.chunks(cols)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    g.extend(yr.iter().zip(dr).map(|(y, d)| y * (d - dot)));
                }
                add_into(&mut grads[x.0], &g);
            }
            Op::AttnApply { alpha, x, heads, group, block } => {
                let (xrows, width) = dims2(val(*x));
                let graphs = xrows / (group * block);
                let dv = width / heads;
                let (ad, xd) = (val(*alpha).data(), val(*x).data());
                let mut galpha = ng(*alpha).then(|| vec![0.0; ad.len()]);
                let mut gx = ng(*x).then(|| vec![0.0; xd.len()]);
                for g in 0..graphs {
                    for h in 0..*heads {
                        for i in 0..*group {
                            let arow = ((g * heads + h) * group + i) * group;
                            for r in 0..*block {
                                let orow = ((g * group + i) * block + r) * width + h * dv;
                                let dout = &dy[orow..orow + dv];
                                for j in 0..*group {
                                    let xrow = ((g * group + j) * block + r) * width + h * dv;
                                    if let Some(ga) = galpha.as_mut() {
                                        ga[arow + j] +=
                                            dout.iter().zip(&xd[xrow..xrow + dv]).map(|(a, b)| a * b).sum::<f64>();
                                    }
                                    if let Some(gxv) = gx.as_mut() {
                                        let w = ad[arow + j];
                                        for t in 0..dv {
                                            gxv[xrow + t] += w * dout[t];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(ga) = galpha {
                    add_into(&mut grads[alpha.0], &ga);
                }
                if let Some(gxv) = gx {
                    add_into(&mut grads[x.0], &gxv);
                }
            }
            Op::HeadMean { alpha, heads, group } => {
                let n = val(*alpha).len();
                let graphs = n / (heads * group * group);
                let ga = slot(&mut grads[alpha.0], n);
                let inv = 1.0 / *heads as f64;
                let sq = group * group;
                for g in 0..graphs {
                    for h in 0..*heads {
                        let dst = &mut ga[(g * heads + h) * sq..][..sq];
                        dst.iter_mut().zip(&dy[g * sq..(g + 1) * sq]).for_each(|(d, s)| *d += s * inv);
                    }
                }
            }
            Op::LayerNorm { x, gain, xhat, inv_std } => {
                // Bias gradient is handled by the AddRowBias node that follows.
                let d = val(*gain).len();
                let gd = val(*gain).data();
                if ng(*gain) {
                    let gg = slot(&mut grads[gain.0], d);
                    for (xr, dr) in xhat.chunks(d).zip(dy.chunks(d)) {
                        for c in 0..d {
                            gg[c] += xr[c] * dr[c];
                        }
                    }
                }
                if ng(*x) {
                    let mut gx = Vec::with_capacity(dy.len());
                    for ((xr, dr), inv) in xhat.chunks(d).zip(dy.chunks(d)).zip(inv_std) {
                        let dxhat: Vec<f64> = dr.iter().zip(gd).map(|(a, b)| a * b).collect();
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        gx.extend(dxhat.iter().zip(xr).map(|(dh, xh)| inv * (dh - m1 - xh * m2)));
                    }
                    add_into(&mut grads[x.0], &gx);
                }
            }
            Op::BlockMatVec { u, r, block } => {
                let (urows, c) = dims2(val(*u));
                let (ud, rd) = (val(*u).data(), val(*r).data());
                if ng(*u) {
                    let gu = slot(&mut grads[u.0], urows * c);
                    for row in 0..urows {
                        let n = row / block;
                        for t in 0..c {
                            gu[row * c + t] += dy[row] * rd[n * c + t];
                        }
                    }
                }
                if ng(*r) {
                    let gr = slot(&mut grads[r.0], rd.len());
                    for row in 0..urows {
                        let n = row / block;
                        for t in 0..c {
                            gr[n * c + t] += dy[row] * ud[row * c + t];
                        }
                    }
                }
            }
            Op::GroupMean { x, group } => {
                let (rows, c) = dims2(val(*x));
                let gx = slot(&mut grads[x.0], rows * c);
                for row in 0..rows {
                    let src = &dy[(row / group) * c..][..c];
                    gx[row * c..(row + 1) * c].iter_mut().zip(src).for_each(|(g, s)| *g += s / *group as f64);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_error, FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    /// Checks d/dx of `sum(w ⊙ op(inputs))` for every input against central
    /// differences.
    fn check(seed: u64, shapes: &[&[usize]], op: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let probe = {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
            let out = op(&mut t, &vs).unwrap();
            rand_tensor(&mut rng, t.value(out).shape())
        };
        let eval = |xs: &[Tensor], grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone().with_grad())).collect();
            let out = op(&mut t, &vs)?;
            let w = t.leaf(probe.clone());
            let prod = t.mul(out, w)?;
            let loss = t.sum(prod)?;
            let l = t.value(loss).item()?;
            if !grad {
                return Ok((l, vec![]));
            }
            let g = t.gradients(loss)?;
            Ok((l, vs.iter().map(|v| g.get(*v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.value(*v).len()])).collect()))
        };
        let (_, analytic) = eval(&inputs, true).unwrap();
        let mut worst: f64 = 0.0;
        for k in 0..inputs.len() {
            let f = |x: &[f64]| {
                let mut xs = inputs.clone();
                xs[k] = Tensor::new(inputs[k].shape().to_vec(), x.to_vec())?;
                Ok(eval(&xs, false)?.0)
            };
            worst = worst.max(max_rel_error(f, inputs[k].data(), &analytic[k], FD_STEP, 1e-8).unwrap());
        }
        worst
    }

    const TOL: f64 = 1e-6;

    #[test]
    fn grad_matmul() {
        for seed in 0..5 {
            assert!(check(seed, &[&[4, 6], &[6, 3]], |t, v| t.matmul(v[0], v[1])) < TOL);
        }
    }

    #[test]
    fn grad_sum_of_matmul_wrt_a() {
        // loss = sum(AB): dL/dA = 1 · Bᵀ row sums
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap().with_grad());
        let b = t.leaf(Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        let l = t.sum(c).unwrap();
        let g = t.gradients(l).unwrap();
        assert_eq!(g.get(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert!(check(9, &[&[3, 5], &[5, 2]], |t, v| t.matmul(v[0], v[1])) < TOL);
    }

    #[test]
    fn grad_elementwise() {
        assert!(check(1, &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1])) < TOL);
        assert!(check(2, &[&[3, 4], &[3, 4]], |t, v| t.sub(v[0], v[1])) < TOL);
        assert!(check(3, &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1])) < TOL);
        assert!(check(4, &[&[5, 3], &[3]], |t, v| t.add_row_bias(v[0], v[1])) < TOL);
        assert!(check(4, &[&[5, 3], &[3, 4], &[4]], |t, v| t.affine(v[0], v[1], v[2])) < TOL);
        assert!(check(5, &[&[4, 4]], |t, v| t.tanh(v[0])) < TOL);
        assert!(check(6, &[&[4, 4]], |t, v| t.relu(v[0])) < TOL);
        assert!(check(7, &[&[4, 4]], |t, v| t.square(v[0])) < TOL);
        assert!(check(8, &[&[4, 4]], |t, v| t.scale(v[0], -0.3)) < TOL);
        assert!(check(9, &[&[4, 4]], |t, v| t.mean(v[0])) < TOL);
        assert!(check(10, &[&[2, 6]], |t, v| t.reshape(v[0], vec![3, 4])) < TOL);
        assert!(check(11, &[&[3, 2], &[3, 1], &[3, 4]], |t, v| t.concat_cols(v)) < TOL);
        assert!(check(12, &[&[6, 2]], |t, v| t.group_mean(v[0], 3)) < TOL);
    }

    #[test]
    fn grad_structured() {
        assert!(check(20, &[&[6, 4]], |t, v| t.gram(v[0], 3)) < TOL);
        assert!(check(21, &[&[6, 4], &[6, 4]], |t, v| t.attn_logits(v[0], v[1], 2, 3)) < TOL);
        assert!(check(22, &[&[4, 5]], |t, v| t.softmax_rows(v[0])) < TOL);
        assert!(check(23, &[&[12, 3], &[6, 4]], |t, v| t.attn_apply(v[0], v[1], 2, 3, 1)) < TOL);
        assert!(check(24, &[&[6, 3], &[18, 5]], |t, v| t.attn_apply(v[0], v[1], 1, 3, 3)) < TOL);
        assert!(check(25, &[&[12, 3]], |t, v| t.head_mean(v[0], 2, 3)) < TOL);
        assert!(check(26, &[&[4, 6], &[6], &[6]], |t, v| t.layer_norm_rows(v[0], v[1], v[2])) < TOL);
        assert!(check(27, &[&[6, 4], &[2, 4]], |t, v| t.block_matvec(v[0], v[1], 3)) < TOL);
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).with_grad());
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.leaf_grad(x), Some(&[1.0, 1.0, 1.0][..]));
        // repeated backward accumulates
        t.backward(s).unwrap();
        assert_eq!(t.leaf_grad(x), Some(&[2.0, 2.0, 2.0][..]));
        t.zero_grad();
        assert_eq!(t.leaf_grad(x), Some(&[0.0, 0.0, 0.0][..]));

        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let sq = t.square(x).unwrap();
        let l = t.sum(sq).unwrap();
        let g = t.gradients(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);

        assert!(matches!(t.gradients(sq), Err(Error::Contract(_))));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let q = t.leaf(rand_tensor(&mut rng, &[10, 8]));
        let k = t.leaf(rand_tensor(&mut rng, &[10, 8]));
        let l = t.attn_logits(q, k, 2, 5).unwrap();
        let a = t.softmax_rows(l).unwrap();
        for row in t.data(a).chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
