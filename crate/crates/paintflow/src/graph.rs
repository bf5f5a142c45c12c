//! Tape-based reverse-mode autodiff over [`Tensor`]s.
//!
//! Each op computes its value eagerly and records what backward needs. The
//! tape is append-only, so insertion order is a topological order and
//! `backward` is a single reverse sweep. Gradients only flow into nodes that
//! (transitively) contain parameters.

use rayon::prelude::*;

use crate::kernels::{axpy, matmul_nn, matmul_tn, transpose};
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
pub struct ConvMeta {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvMeta {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    AddRowBias { x: NodeId, bias: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f32 },
    Gelu { x: NodeId },
    Silu { x: NodeId },
    Relu { x: NodeId },
    LayerNorm { x: NodeId, gamma: Option<NodeId>, beta: Option<NodeId> },
    RowAffine { x: NodeId, scale: NodeId, shift: NodeId, rows_per_group: usize },
    RowGateAdd { x: NodeId, branch: NodeId, gate: NodeId, rows_per_group: usize },
    Attention { qkv: NodeId, groups: usize, tokens: usize, heads: usize },
    ConcatGroups { a: NodeId, b: NodeId, groups: usize, a_rows: usize, b_rows: usize },
    SliceGroups { x: NodeId, groups: usize, group_rows: usize, start: usize, len: usize },
    GatherRows { table: NodeId, indices: Vec<usize> },
    Reshape { x: NodeId },
    MseLoss { pred: NodeId, target: Tensor },
    Im2Col { x: NodeId, meta: ConvMeta },
    UpsampleNearest2x { x: NodeId, h: usize, w: usize, c: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    /// Op-specific forward stash (softmax probabilities, layernorm stats).
    saved: Vec<f32>,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, saved: Vec<f32>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, saved, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant leaf: no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, Vec::new(), false)
    }

    /// Parameter leaf: gradient is accumulated for it.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, Vec::new(), true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let (kb, n) = (self.value(b).rows(), self.value(b).cols());
        assert_eq!(k, kb, "matmul inner dims {k} vs {kb}");
        let mut out = Tensor::zeros(&[m, n]);
        matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n, out.data_mut());
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatMul { a, b }, out, Vec::new(), needs)
    }

    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (rows, cols) = (self.value(x).rows(), self.value(x).cols());
        assert_eq!(self.value(bias).len(), cols, "bias length must equal cols");
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let _ = rows;
        let needs = self.needs(x) || self.needs(bias);
        self.push(Op::AddRowBias { x, bias }, out, Vec::new(), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).len(), self.value(b).len(), "add shape mismatch");
        let mut out = self.value(a).clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += bv;
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add { a, b }, out, Vec::new(), needs)
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> NodeId {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o *= factor;
        }
        let needs = self.needs(x);
        self.push(Op::Scale { x, factor }, out, Vec::new(), needs)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        let mut saved = vec![0.0f32; out.len()];
        for (o, t) in out.data_mut().iter_mut().zip(saved.iter_mut()) {
            let u = SQRT_2_OVER_PI * (*o + GELU_C * *o * *o * *o);
            *t = u.tanh();
            *o = 0.5 * *o * (1.0 + *t);
        }
        let needs = self.needs(x);
        self.push(Op::Gelu { x }, out, saved, needs)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = silu_f(*o);
        }
        let needs = self.needs(x);
        self.push(Op::Silu { x }, out, Vec::new(), needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = o.max(0.0);
        }
        let needs = self.needs(x);
        self.push(Op::Relu { x }, out, Vec::new(), needs)
    }

    /// Row-wise layer norm, optional affine (gamma, beta over columns).
    pub fn layernorm(&mut self, x: NodeId, gamma: Option<NodeId>, beta: Option<NodeId>) -> NodeId {
        let cols = self.value(x).cols();
        let rows = self.value(x).rows();
        if let Some(g) = gamma {
            assert_eq!(self.value(g).len(), cols);
        }
        if let Some(b) = beta {
            assert_eq!(self.value(b).len(), cols);
        }
        let mut out = Tensor::zeros(self.value(x).shape());
        let mut saved = vec![0.0f32; rows * 2];
        {
            let xv = self.value(x).data();
            let gv = gamma.map(|g| self.value(g).data().to_vec());
            let bv = beta.map(|b| self.value(b).data().to_vec());
            for r in 0..rows {
                let xr = &xv[r * cols..(r + 1) * cols];
                let mean = xr.iter().sum::<f32>() / cols as f32;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
                let inv_std = 1.0 / (var + LAYERNORM_EPS).sqrt();
                saved[r * 2] = mean;
                saved[r * 2 + 1] = inv_std;
                let or = &mut out.data_mut()[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    let xhat = (xr[c] - mean) * inv_std;
                    or[c] = match (&gv, &bv) {
                        (Some(g), Some(b)) => g[c] * xhat + b[c],
                        (Some(g), None) => g[c] * xhat,
                        (None, Some(b)) => xhat + b[c],
                        (None, None) => xhat,
                    };
                }
            }
        }
        let needs = self.needs(x) || gamma.is_some_and(|g| self.needs(g)) || beta.is_some_and(|b| self.needs(b));
        self.push(Op::LayerNorm { x, gamma, beta }, out, saved, needs)
    }

    /// out[r] = x[r] * (1 + scale[g]) + shift[g] with g = r / rows_per_group.
    pub fn row_affine(&mut self, x: NodeId, scale: NodeId, shift: NodeId, rows_per_group: usize) -> NodeId {
        let cols = self.value(x).cols();
        let rows = self.value(x).rows();
        assert_eq!(rows % rows_per_group, 0);
        let groups = rows / rows_per_group;
        assert_eq!(self.value(scale).rows(), groups);
        assert_eq!(self.value(scale).cols(), cols);
        assert_eq!(self.value(shift).rows(), groups);
        assert_eq!(self.value(shift).cols(), cols);
        let mut out = Tensor::zeros(self.value(x).shape());
        {
            let xv = self.value(x).data();
            let sv = self.value(scale).data();
            let tv = self.value(shift).data();
            for r in 0..rows {
                let g = r / rows_per_group;
                let xr = &xv[r * cols..(r + 1) * cols];
                let sr = &sv[g * cols..(g + 1) * cols];
                let tr = &tv[g * cols..(g + 1) * cols];
                let or = &mut out.data_mut()[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    or[c] = xr[c] * (1.0 + sr[c]) + tr[c];
                }
            }
        }
        let needs = self.needs(x) || self.needs(scale) || self.needs(shift);
        self.push(Op::RowAffine { x, scale, shift, rows_per_group }, out, Vec::new(), needs)
    }

    /// out[r] = x[r] + gate[g] * branch[r] with g = r / rows_per_group.
    pub fn row_gate_add(&mut self, x: NodeId, branch: NodeId, gate: NodeId, rows_per_group: usize) -> NodeId {
        let cols = self.value(x).cols();
        let rows = self.value(x).rows();
        assert_eq!(self.value(branch).rows(), rows);
        assert_eq!(self.value(branch).cols(), cols);
        assert_eq!(rows % rows_per_group, 0);
        let groups = rows / rows_per_group;
        assert_eq!(self.value(gate).rows(), groups);
        assert_eq!(self.value(gate).cols(), cols);
        let mut out = Tensor::zeros(self.value(x).shape());
        {
            let xv = self.value(x).data();
            let bv = self.value(branch).data();
            let gv = self.value(gate).data();
            for r in 0..rows {
                let g = r / rows_per_group;
                let xr = &xv[r * cols..(r + 1) * cols];
                let br = &bv[r * cols..(r + 1) * cols];
                let gr = &gv[g * cols..(g + 1) * cols];
                let or = &mut out.data_mut()[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    or[c] = xr[c] + gr[c] * br[c];
                }
            }
        }
        let needs = self.needs(x) || self.needs(branch) || self.needs(gate);
        self.push(Op::RowGateAdd { x, branch, gate, rows_per_group }, out, Vec::new(), needs)
    }

    /// Bidirectional multi-head self-attention within each group of `tokens`
    /// rows. `qkv` is (groups*tokens, 3*width) packed [Q | K | V].
    pub fn attention(&mut self, qkv: NodeId, groups: usize, tokens: usize, heads: usize) -> NodeId {
        let rows = self.value(qkv).rows();
        let three_w = self.value(qkv).cols();
        assert_eq!(rows, groups * tokens);
        assert_eq!(three_w % 3, 0);
        let width = three_w / 3;
        assert_eq!(width % heads, 0);
        let dh = width / heads;
        let scale = 1.0 / (dh as f32).sqrt();

        let mut out = Tensor::zeros(&[rows, width]);
        let mut saved = vec![0.0f32; groups * heads * tokens * tokens];
        {
            let qkv_v = self.value(qkv).data();
            let probs_per_group = heads * tokens * tokens;
            let do_group = |g: usize, out_g: &mut [f32], probs_g: &mut [f32]| {
                let base = g * tokens;
                let mut q = vec![0.0f32; tokens * dh];
                let mut kt = vec![0.0f32; dh * tokens];
                let mut v = vec![0.0f32; tokens * dh];
                let mut o = vec![0.0f32; tokens * dh];
                for h in 0..heads {
                    let qo = h * dh;
                    let ko = width + h * dh;
                    let vo = 2 * width + h * dh;
                    for i in 0..tokens {
                        let row = &qkv_v[(base + i) * three_w..];
                        q[i * dh..(i + 1) * dh].copy_from_slice(&row[qo..qo + dh]);
                        v[i * dh..(i + 1) * dh].copy_from_slice(&row[vo..vo + dh]);
                        for d in 0..dh {
                            kt[d * tokens + i] = row[ko + d];
                        }
                    }
                    let probs_h = &mut probs_g[h * tokens * tokens..(h + 1) * tokens * tokens];
                    probs_h.fill(0.0);
                    matmul_nn(&q, &kt, tokens, dh, tokens, probs_h);
                    for p_row in probs_h.chunks_mut(tokens) {
                        let mut max = f32::NEG_INFINITY;
                        for p in p_row.iter_mut() {
                            *p *= scale;
                            if *p > max {
                                max = *p;
                            }
                        }
                        let mut denom = 0.0f32;
                        for p in p_row.iter_mut() {
                            *p = (*p - max).exp();
                            denom += *p;
                        }
                        let inv = 1.0 / denom;
                        for p in p_row.iter_mut() {
                            *p *= inv;
                        }
                    }
                    o.fill(0.0);
                    matmul_nn(probs_h, &v, tokens, tokens, dh, &mut o);
                    for i in 0..tokens {
                        out_g[i * width + qo..i * width + qo + dh].copy_from_slice(&o[i * dh..(i + 1) * dh]);
                    }
                }
            };
            if groups > 1 && groups * heads * tokens * tokens * dh >= 1 << 16 {
                out.data_mut()
                    .par_chunks_mut(tokens * width)
                    .zip(saved.par_chunks_mut(probs_per_group))
                    .enumerate()
                    .for_each(|(g, (out_g, probs_g))| do_group(g, out_g, probs_g));
            } else {
                for (g, (out_g, probs_g)) in out
                    .data_mut()
                    .chunks_mut(tokens * width)
                    .zip(saved.chunks_mut(probs_per_group))
                    .enumerate()
                {
                    do_group(g, out_g, probs_g);
                }
            }
        }
        let needs = self.needs(qkv);
        self.push(Op::Attention { qkv, groups, tokens, heads }, out, saved, needs)
    }

    /// Per-group row concatenation: group g of the result is
    /// [a's g-th block of a_rows; b's g-th block of b_rows].
    pub fn concat_groups(&mut self, a: NodeId, b: NodeId, groups: usize) -> NodeId {
        let cols = self.value(a).cols();
        assert_eq!(self.value(b).cols(), cols);
        assert_eq!(self.value(a).rows() % groups, 0);
        assert_eq!(self.value(b).rows() % groups, 0);
        let a_rows = self.value(a).rows() / groups;
        let b_rows = self.value(b).rows() / groups;
        let total = groups * (a_rows + b_rows);
        let mut out = Tensor::zeros(&[total, cols]);
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let ov = out.data_mut();
            for g in 0..groups {
                let dst = g * (a_rows + b_rows) * cols;
                ov[dst..dst + a_rows * cols].copy_from_slice(&av[g * a_rows * cols..(g + 1) * a_rows * cols]);
                let dst_b = dst + a_rows * cols;
                ov[dst_b..dst_b + b_rows * cols].copy_from_slice(&bv[g * b_rows * cols..(g + 1) * b_rows * cols]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::ConcatGroups { a, b, groups, a_rows, b_rows }, out, Vec::new(), needs)
    }

    /// Take rows [start, start+len) of each group.
    pub fn slice_groups(&mut self, x: NodeId, groups: usize, start: usize, len: usize) -> NodeId {
        let cols = self.value(x).cols();
        assert_eq!(self.value(x).rows() % groups, 0);
        let group_rows = self.value(x).rows() / groups;
        assert!(start + len <= group_rows);
        let mut out = Tensor::zeros(&[groups * len, cols]);
        {
            let xv = self.value(x).data();
            let ov = out.data_mut();
            for g in 0..groups {
                let src = (g * group_rows + start) * cols;
                let dst = g * len * cols;
                ov[dst..dst + len * cols].copy_from_slice(&xv[src..src + len * cols]);
            }
        }
        let needs = self.needs(x);
        self.push(Op::SliceGroups { x, groups, group_rows, start, len }, out, Vec::new(), needs)
    }

    /// Gather rows of a table by index (used for task-embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, indices: Vec<usize>) -> NodeId {
        let cols = self.value(table).cols();
        let n_rows = self.value(table).rows();
        let mut out = Tensor::zeros(&[indices.len(), cols]);
        {
            let tv = self.value(table).data();
            let ov = out.data_mut();
            for (i, &idx) in indices.iter().enumerate() {
                assert!(idx < n_rows, "gather index {idx} out of range {n_rows}");
                ov[i * cols..(i + 1) * cols].copy_from_slice(&tv[idx * cols..(idx + 1) * cols]);
            }
        }
        let needs = self.needs(table);
        self.push(Op::GatherRows { table, indices }, out, Vec::new(), needs)
    }

    /// Reinterpret the row-major data under a new shape (same element count).
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let out = self
            .value(x)
            .clone()
            .reshaped(shape)
            .expect("reshape must preserve element count");
        let needs = self.needs(x);
        self.push(Op::Reshape { x }, out, Vec::new(), needs)
    }

    /// Mean squared error against a constant target, over all elements.
    pub fn mse_loss(&mut self, pred: NodeId, target: Tensor) -> NodeId {
        assert_eq!(self.value(pred).len(), target.len(), "mse target shape mismatch");
        let mut acc = 0.0f64;
        for (&p, &t) in self.value(pred).data().iter().zip(target.data()) {
            let d = (p - t) as f64;
            acc += d * d;
        }
        let loss = (acc / target.len() as f64) as f32;
        let needs = self.needs(pred);
        self.push(Op::MseLoss { pred, target }, Tensor::scalar(loss), Vec::new(), needs)
    }

    /// Unfold (B, H*W*C)-images into (B*out_h*out_w, k*k*C) patches.
    pub fn im2col(&mut self, x: NodeId, meta: ConvMeta) -> NodeId {
        assert_eq!(self.value(x).rows(), meta.batch);
        assert_eq!(self.value(x).cols(), meta.in_h * meta.in_w * meta.in_c);
        let (oh, ow) = (meta.out_h(), meta.out_w());
        let patch = meta.kernel * meta.kernel * meta.in_c;
        let mut out = Tensor::zeros(&[meta.batch * oh * ow, patch]);
        {
            let xv = self.value(x).data();
            let ov = out.data_mut();
            let mut r = 0;
            for b in 0..meta.batch {
                let img = &xv[b * meta.in_h * meta.in_w * meta.in_c..];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let dst = &mut ov[r * patch..(r + 1) * patch];
                        let mut idx = 0;
                        for ky in 0..meta.kernel {
                            let y = (oy * meta.stride + ky) as isize - meta.pad as isize;
                            for kx in 0..meta.kernel {
                                let x_ = (ox * meta.stride + kx) as isize - meta.pad as isize;
                                if y >= 0 && (y as usize) < meta.in_h && x_ >= 0 && (x_ as usize) < meta.in_w {
                                    let src = ((y as usize) * meta.in_w + (x_ as usize)) * meta.in_c;
                                    dst[idx..idx + meta.in_c].copy_from_slice(&img[src..src + meta.in_c]);
                                }
                                idx += meta.in_c;
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::Im2Col { x, meta }, out, Vec::new(), needs)
    }

    /// Nearest-neighbor 2x upsample of (B, H*W*C) images.
    pub fn upsample_nearest_2x(&mut self, x: NodeId, h: usize, w: usize, c: usize) -> NodeId {
        let batch = self.value(x).rows();
        assert_eq!(self.value(x).cols(), h * w * c);
        let mut out = Tensor::zeros(&[batch, 4 * h * w * c]);
        {
            let xv = self.value(x).data();
            let ov = out.data_mut();
            for b in 0..batch {
                let src = &xv[b * h * w * c..(b + 1) * h * w * c];
                let dst = &mut ov[b * 4 * h * w * c..(b + 1) * 4 * h * w * c];
                for y in 0..2 * h {
                    for x_ in 0..2 * w {
                        let s = ((y / 2) * w + x_ / 2) * c;
                        let d = (y * 2 * w + x_) * c;
                        dst[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::UpsampleNearest2x { x, h, w, c }, out, Vec::new(), needs)
    }

    /// All parameter leaves in insertion order.
    pub fn param_leaves(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.needs_grad && matches!(n.op, Op::Leaf))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    /// Reverse sweep from `root` (normally a scalar loss).
    pub fn backward(&mut self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.len()]);

        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let dout = grads[i].take().expect("checked above");
            self.backprop_node(i, &dout, &mut grads);
            grads[i] = Some(dout);
        }
        Gradients { grads }
    }

    fn grad_buf(grads: &mut [Option<Vec<f32>>], id: NodeId, len: usize) -> &mut [f32] {
        grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn backprop_node(&self, i: usize, dout: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if self.needs(*a) {
                    // dA = dOut . B^T, with B^T materialized so the fast
                    // row-major kernel applies.
                    let bv = self.value(*b).data();
                    let mut bt = vec![0.0f32; k * n];
                    transpose(bv, k, n, &mut bt);
                    let da = Self::grad_buf(grads, *a, m * k);
                    matmul_nn(dout, &bt, m, n, k, da);
                }
                if self.needs(*b) {
                    let db = Self::grad_buf(grads, *b, k * n);
                    matmul_tn(self.value(*a).data(), dout, m, k, n, db);
                }
            }
            Op::AddRowBias { x, bias } => {
                let cols = self.value(*x).cols();
                if self.needs(*x) {
                    let dx = Self::grad_buf(grads, *x, dout.len());
                    axpy(1.0, dout, dx);
                }
                if self.needs(*bias) {
                    let db = Self::grad_buf(grads, *bias, cols);
                    for row in dout.chunks(cols) {
                        axpy(1.0, row, db);
                    }
                }
            }
            Op::Add { a, b } => {
                for &p in &[*a, *b] {
                    if self.needs(p) {
                        let dp = Self::grad_buf(grads, p, dout.len());
                        axpy(1.0, dout, dp);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(*x) {
                    let dx = Self::grad_buf(grads, *x, dout.len());
                    axpy(*factor, dout, dx);
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x).data();
                    let dx = Self::grad_buf(grads, *x, dout.len());
                    for (i, (d, &g)) in dx.iter_mut().zip(dout).enumerate() {
                        let xi = xv[i];
                        let t = node.saved[i];
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * xi * xi);
                        *d += g * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du);
                    }
                }
            }
            Op::Silu { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x).data();
                    let dx = Self::grad_buf(grads, *x, dout.len());
                    for ((d, &g), &xi) in dx.iter_mut().zip(dout).zip(xv) {
                        *d += g * silu_df(xi);
                    }
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x).data();
                    let dx = Self::grad_buf(grads, *x, dout.len());
                    for ((d, &g), &xi) in dx.iter_mut().zip(dout).zip(xv) {
                        *d += if xi > 0.0 { g } else { 0.0 };
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let cols = self.value(*x).cols();
                let rows = self.value(*x).rows();
                let xv = self.value(*x).data();
                let gv = gamma.map(|g| self.value(g).data().to_vec());
                for r in 0..rows {
                    let mean = node.saved[r * 2];
                    let inv_std = node.saved[r * 2 + 1];
                    let xr = &xv[r * cols..(r + 1) * cols];
                    let dr = &dout[r * cols..(r + 1) * cols];

                    if let Some(b) = beta {
                        if self.needs(*b) {
                            let db = Self::grad_buf(grads, *b, cols);
                            axpy(1.0, dr, db);
                        }
                    }
                    if let Some(g) = gamma {
                        if self.needs(*g) {
                            let dg = Self::grad_buf(grads, *g, cols);
                            for c in 0..cols {
                                dg[c] += dr[c] * (xr[c] - mean) * inv_std;
                            }
                        }
                    }
                    if self.needs(*x) {
                        // dxhat = dout * gamma; standard layernorm backward per row.
                        let mut sum_d = 0.0f32;
                        let mut sum_dx = 0.0f32;
                        let mut dxhat = vec![0.0f32; cols];
                        for c in 0..cols {
                            let d = match &gv {
                                Some(g) => dr[c] * g[c],
                                None => dr[c],
                            };
                            let xhat = (xr[c] - mean) * inv_std;
                            dxhat[c] = d;
                            sum_d += d;
                            sum_dx += d * xhat;
                        }
                        let dx = Self::grad_buf(grads, *x, rows * cols);
                        let dxr = &mut dx[r * cols..(r + 1) * cols];
                        let n = cols as f32;
                        for c in 0..cols {
                            let xhat = (xr[c] - mean) * inv_std;
                            dxr[c] += inv_std / n * (n * dxhat[c] - sum_d - xhat * sum_dx);
                        }
                    }
                }
            }
            Op::RowAffine { x, scale, shift, rows_per_group } => {
                let cols = self.value(*x).cols();
                let rows = self.value(*x).rows();
                let xv = self.value(*x).data();
                let sv = self.value(*scale).data();
                for r in 0..rows {
                    let g = r / rows_per_group;
                    let dr = &dout[r * cols..(r + 1) * cols];
                    if self.needs(*x) {
                        let dx = Self::grad_buf(grads, *x, rows * cols);
                        let dxr = &mut dx[r * cols..(r + 1) * cols];
                        let sr = &sv[g * cols..(g + 1) * cols];
                        for c in 0..cols {
                            dxr[c] += dr[c] * (1.0 + sr[c]);
                        }
                    }
                    if self.needs(*scale) {
                        let ds = Self::grad_buf(grads, *scale, sv.len());
                        let dsr = &mut ds[g * cols..(g + 1) * cols];
                        let xr = &xv[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dsr[c] += dr[c] * xr[c];
                        }
                    }
                    if self.needs(*shift) {
                        let dt = Self::grad_buf(grads, *shift, sv.len());
                        axpy(1.0, dr, &mut dt[g * cols..(g + 1) * cols]);
                    }
                }
            }
            Op::RowGateAdd { x, branch, gate, rows_per_group } => {
                let cols = self.value(*x).cols();
                let rows = self.value(*x).rows();
                let bv = self.value(*branch).data();
                let gv = self.value(*gate).data();
                for r in 0..rows {
                    let g = r / rows_per_group;
                    let dr = &dout[r * cols..(r + 1) * cols];
                    if self.needs(*x) {
                        let dx = Self::grad_buf(grads, *x, rows * cols);
                        axpy(1.0, dr, &mut dx[r * cols..(r + 1) * cols]);
                    }
                    if self.needs(*branch) {
                        let db = Self::grad_buf(grads, *branch, rows * cols);
                        let dbr = &mut db[r * cols..(r + 1) * cols];
                        let gr = &gv[g * cols..(g + 1) * cols];
                        for c in 0..cols {
                            dbr[c] += dr[c] * gr[c];
                        }
                    }
                    if self.needs(*gate) {
                        let dg = Self::grad_buf(grads, *gate, gv.len());
                        let dgr = &mut dg[g * cols..(g + 1) * cols];
                        let br = &bv[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dgr[c] += dr[c] * br[c];
                        }
                    }
                }
            }
            Op::Attention { qkv, groups, tokens, heads } => {
                if !self.needs(*qkv) {
                    return;
                }
                let (groups, tokens, heads) = (*groups, *tokens, *heads);
                let three_w = self.value(*qkv).cols();
                let width = three_w / 3;
                let dh = width / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let qkv_v = self.value(*qkv).data();
                let probs_per_group = heads * tokens * tokens;
                let rows = groups * tokens;
                let dqkv = Self::grad_buf(grads, *qkv, rows * three_w);

                let do_group = |g: usize, dqkv_g: &mut [f32]| {
                    let base = g * tokens;
                    let probs_g = &node.saved[g * probs_per_group..(g + 1) * probs_per_group];
                    let mut q = vec![0.0f32; tokens * dh];
                    let mut kbuf = vec![0.0f32; tokens * dh];
                    let mut vt = vec![0.0f32; dh * tokens];
                    let mut do_h = vec![0.0f32; tokens * dh];
                    let mut pt = vec![0.0f32; tokens * tokens];
                    let mut dp = vec![0.0f32; tokens * tokens];
                    let mut dst = vec![0.0f32; tokens * tokens];
                    let mut dq = vec![0.0f32; tokens * dh];
                    let mut dk = vec![0.0f32; tokens * dh];
                    let mut dv = vec![0.0f32; tokens * dh];
                    for h in 0..heads {
                        let qo = h * dh;
                        let ko = width + h * dh;
                        let vo = 2 * width + h * dh;
                        for i in 0..tokens {
                            let row = &qkv_v[(base + i) * three_w..];
                            q[i * dh..(i + 1) * dh].copy_from_slice(&row[qo..qo + dh]);
                            kbuf[i * dh..(i + 1) * dh].copy_from_slice(&row[ko..ko + dh]);
                            for d in 0..dh {
                                vt[d * tokens + i] = row[vo + d];
                            }
                            do_h[i * dh..(i + 1) * dh]
                                .copy_from_slice(&dout[(base + i) * width + qo..(base + i) * width + qo + dh]);
                        }
                        let probs_h = &probs_g[h * tokens * tokens..(h + 1) * tokens * tokens];

                        // dV = P^T . dO
                        transpose(probs_h, tokens, tokens, &mut pt);
                        dv.fill(0.0);
                        matmul_nn(&pt, &do_h, tokens, tokens, dh, &mut dv);

                        // dP = dO . V^T, then softmax backward into dS (scaled).
                        dp.fill(0.0);
                        matmul_nn(&do_h, &vt, tokens, dh, tokens, &mut dp);
                        for i in 0..tokens {
                            let p_row = &probs_h[i * tokens..(i + 1) * tokens];
                            let dp_row = &mut dp[i * tokens..(i + 1) * tokens];
                            let mut dot_pp = 0.0f32;
                            for j in 0..tokens {
                                dot_pp += dp_row[j] * p_row[j];
                            }
                            for j in 0..tokens {
                                dp_row[j] = p_row[j] * (dp_row[j] - dot_pp) * scale;
                            }
                        }

                        // dQ = dS . K and dK = dS^T . Q
                        dq.fill(0.0);
                        matmul_nn(&dp, &kbuf, tokens, tokens, dh, &mut dq);
                        transpose(&dp, tokens, tokens, &mut dst);
                        dk.fill(0.0);
                        matmul_nn(&dst, &q, tokens, tokens, dh, &mut dk);

                        for i in 0..tokens {
                            let drow = &mut dqkv_g[i * three_w..(i + 1) * three_w];
                            axpy(1.0, &dq[i * dh..(i + 1) * dh], &mut drow[qo..qo + dh]);
                            axpy(1.0, &dk[i * dh..(i + 1) * dh], &mut drow[ko..ko + dh]);
                            axpy(1.0, &dv[i * dh..(i + 1) * dh], &mut drow[vo..vo + dh]);
                        }
                    }
                };
                if groups * heads * tokens * tokens * dh >= 1 << 16 {
                    dqkv.par_chunks_mut(tokens * three_w)
                        .enumerate()
                        .for_each(|(g, dqkv_g)| do_group(g, dqkv_g));
                } else {
                    for (g, dqkv_g) in dqkv.chunks_mut(tokens * three_w).enumerate() {
                        do_group(g, dqkv_g);
                    }
                }
            }
            Op::ConcatGroups { a, b, groups, a_rows, b_rows } => {
                let cols = self.value(*a).cols();
                for g in 0..*groups {
                    let src = g * (a_rows + b_rows) * cols;
                    if self.needs(*a) {
                        let da = Self::grad_buf(grads, *a, groups * a_rows * cols);
                        axpy(
                            1.0,
                            &dout[src..src + a_rows * cols],
                            &mut da[g * a_rows * cols..(g + 1) * a_rows * cols],
                        );
                    }
                    if self.needs(*b) {
                        let db = Self::grad_buf(grads, *b, groups * b_rows * cols);
                        axpy(
                            1.0,
                            &dout[src + a_rows * cols..src + (a_rows + b_rows) * cols],
                            &mut db[g * b_rows * cols..(g + 1) * b_rows * cols],
                        );
                    }
                }
            }
            Op::SliceGroups { x, groups, group_rows, start, len } => {
                if self.needs(*x) {
                    let cols = self.value(*x).cols();
                    let dx = Self::grad_buf(grads, *x, groups * group_rows * cols);
                    for g in 0..*groups {
                        let dst = (g * group_rows + start) * cols;
                        axpy(1.0, &dout[g * len * cols..(g + 1) * len * cols], &mut dx[dst..dst + len * cols]);
                    }
                }
            }
            Op::GatherRows { table, indices } => {
                if self.needs(*table) {
                    let cols = self.value(*table).cols();
                    let dt = Self::grad_buf(grads, *table, self.value(*table).len());
                    for (i, &idx) in indices.iter().enumerate() {
                        axpy(1.0, &dout[i * cols..(i + 1) * cols], &mut dt[idx * cols..(idx + 1) * cols]);
                    }
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    let dx = Self::grad_buf(grads, *x, dout.len());
                    axpy(1.0, dout, dx);
                }
            }
            Op::MseLoss { pred, target } => {
                if self.needs(*pred) {
                    let n = target.len() as f32;
                    let scale = 2.0 * dout[0] / n;
                    let pv = self.value(*pred).data();
                    let dp = Self::grad_buf(grads, *pred, target.len());
                    for ((d, &p), &t) in dp.iter_mut().zip(pv).zip(target.data()) {
                        *d += scale * (p - t);
                    }
                }
            }
            Op::Im2Col { x, meta } => {
                if self.needs(*x) {
                    let (oh, ow) = (meta.out_h(), meta.out_w());
                    let patch = meta.kernel * meta.kernel * meta.in_c;
                    let dx = Self::grad_buf(grads, *x, meta.batch * meta.in_h * meta.in_w * meta.in_c);
                    let mut r = 0;
                    for b in 0..meta.batch {
                        let img = &mut dx[b * meta.in_h * meta.in_w * meta.in_c..(b + 1) * meta.in_h * meta.in_w * meta.in_c];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let src = &dout[r * patch..(r + 1) * patch];
                                let mut idx = 0;
                                for ky in 0..meta.kernel {
                                    let y = (oy * meta.stride + ky) as isize - meta.pad as isize;
                                    for kx in 0..meta.kernel {
                                        let x_ = (ox * meta.stride + kx) as isize - meta.pad as isize;
                                        if y >= 0 && (y as usize) < meta.in_h && x_ >= 0 && (x_ as usize) < meta.in_w {
                                            let d = ((y as usize) * meta.in_w + (x_ as usize)) * meta.in_c;
                                            axpy(1.0, &src[idx..idx + meta.in_c], &mut img[d..d + meta.in_c]);
                                        }
                                        idx += meta.in_c;
                                    }
                                }
                                r += 1;
                            }
                        }
                    }
                }
            }
            Op::UpsampleNearest2x { x, h, w, c } => {
                if self.needs(*x) {
                    let batch = self.value(*x).rows();
                    let dx = Self::grad_buf(grads, *x, batch * h * w * c);
                    for b in 0..batch {
                        let src = &dout[b * 4 * h * w * c..(b + 1) * 4 * h * w * c];
                        let dst = &mut dx[b * h * w * c..(b + 1) * h * w * c];
                        for y in 0..2 * h {
                            for x_ in 0..2 * w {
                                let s = (y * 2 * w + x_) * c;
                                let d = ((y / 2) * w + x_ / 2) * c;
                                axpy(1.0, &src[s..s + c], &mut dst[d..d + c]);
                            }
                        }
                    }
                }
            }
        }
    }
}

const GELU_C: f32 = 0.044715;
const SQRT_2_OVER_PI: f32 = 0.797_884_6;

#[inline]
fn silu_f(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

#[inline]
fn silu_df(x: f32) -> f32 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo_random(len: usize, seed: u64) -> Vec<f32> {
        let mut state = seed;
        (0..len)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f32 / (1u64 << 31) as f32) - 0.5
            })
            .collect()
    }

    /// Finite-difference check of d(loss)/d(leaf) for a graph builder.
    /// The builder maps leaf tensors to the final loss node.
    fn check_grads<F>(leaf_shapes: &[&[usize]], seed: u64, build: F)
    where
        F: Fn(&mut Graph, &[NodeId]) -> NodeId,
    {
        let leaves: Vec<Tensor> = leaf_shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                Tensor::from_vec(shape, pseudo_random(shape.iter().product(), seed + i as u64)).unwrap()
            })
            .collect();

        let mut g = Graph::new();
        let ids: Vec<NodeId> = leaves.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &ids);
        assert_eq!(g.value(loss).len(), 1, "loss must be scalar");
        let grads = g.backward(loss);

        let h = 1e-2f32;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(ids[li]).expect("param grad must exist");
            #[allow(clippy::needless_range_loop)]
            for e in 0..leaf.len().min(7) {
                let run = |delta: f32| -> f64 {
                    let mut g2 = Graph::new();
                    let ids2: Vec<NodeId> = leaves
                        .iter()
                        .enumerate()
                        .map(|(i, t)| {
                            let mut t = t.clone();
                            if i == li {
                                t.data_mut()[e] += delta;
                            }
                            g2.param(t)
                        })
                        .collect();
                    let l = build(&mut g2, &ids2);
                    g2.value(l).data()[0] as f64
                };
                let fd = ((run(h) - run(-h)) / (2.0 * h as f64)) as f32;
                let a = analytic[e];
                let denom = fd.abs().max(a.abs()).max(0.05);
                assert!(
                    (fd - a).abs() / denom < 0.05,
                    "leaf {li} elem {e}: fd {fd} vs analytic {a}"
                );
            }
        }
    }

    #[test]
    fn matmul_bias_grads() {
        check_grads(&[&[3, 4], &[4, 5], &[5]], 10, |g, ids| {
            let mm = g.matmul(ids[0], ids[1]);
            let wb = g.add_row_bias(mm, ids[2]);
            g.mse_loss(wb, Tensor::zeros(&[3, 5]))
        });
    }

    #[test]
    fn activation_grads() {
        check_grads(&[&[4, 6]], 20, |g, ids| {
            let a = g.gelu(ids[0]);
            let b = g.silu(a);
            let c = g.relu(b);
            let d = g.scale(c, 1.7);
            g.mse_loss(d, Tensor::filled(&[4, 6], 0.1))
        });
    }

    #[test]
    fn layernorm_grads_with_affine() {
        check_grads(&[&[5, 8], &[8], &[8]], 30, |g, ids| {
            let ln = g.layernorm(ids[0], Some(ids[1]), Some(ids[2]));
            g.mse_loss(ln, Tensor::filled(&[5, 8], 0.3))
        });
    }

    #[test]
    fn layernorm_grads_without_affine() {
        check_grads(&[&[3, 8]], 31, |g, ids| {
            let ln = g.layernorm(ids[0], None, None);
            g.mse_loss(ln, Tensor::filled(&[3, 8], -0.2))
        });
    }

    #[test]
    fn row_affine_and_gate_grads() {
        // 2 groups of 3 rows.
        check_grads(&[&[6, 4], &[2, 4], &[2, 4], &[6, 4], &[2, 4]], 40, |g, ids| {
            let aff = g.row_affine(ids[0], ids[1], ids[2], 3);
            let gated = g.row_gate_add(aff, ids[3], ids[4], 3);
            g.mse_loss(gated, Tensor::zeros(&[6, 4]))
        });
    }

    #[test]
    fn attention_grads() {
        // 2 groups x 3 tokens, width 4, 2 heads -> qkv cols 12.
        check_grads(&[&[6, 12]], 50, |g, ids| {
            let att = g.attention(ids[0], 2, 3, 2);
            g.mse_loss(att, Tensor::filled(&[6, 4], 0.05))
        });
    }

    #[test]
    fn concat_slice_gather_grads() {
        check_grads(&[&[4, 3], &[2, 3], &[5, 3]], 60, |g, ids| {
            // 2 groups: a has 2 rows/group, b has 1 row/group.
            let cat = g.concat_groups(ids[0], ids[1], 2);
            let sl = g.slice_groups(cat, 2, 1, 2);
            let gathered = g.gather_rows(ids[2], vec![0, 2, 2, 4]);
            let sum = g.add(sl, gathered);
            g.mse_loss(sum, Tensor::zeros(&[4, 3]))
        });
    }

    #[test]
    fn im2col_conv_grads() {
        let meta = ConvMeta { batch: 2, in_h: 4, in_w: 4, in_c: 2, kernel: 3, stride: 2, pad: 1 };
        let (oh, ow) = (meta.out_h(), meta.out_w());
        assert_eq!((oh, ow), (2, 2));
        check_grads(&[&[2, 32], &[18, 3]], 70, move |g, ids| {
            let cols = g.im2col(ids[0], meta.clone());
            let conv = g.matmul(cols, ids[1]);
            g.mse_loss(conv, Tensor::filled(&[8, 3], 0.1))
        });
    }

    #[test]
    fn upsample_grads() {
        check_grads(&[&[2, 8]], 80, |g, ids| {
            // 2x2 single-channel images.
            let up = g.upsample_nearest_2x(ids[0], 2, 2, 2);
            g.mse_loss(up, Tensor::filled(&[2, 32], 0.2))
        });
    }

    #[test]
    fn constant_inputs_get_no_grad() {
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(&[2, 3], 1.0));
        let w = g.param(Tensor::filled(&[3, 2], 0.5));
        let y = g.matmul(x, w);
        let loss = g.mse_loss(y, Tensor::zeros(&[2, 2]));
        let grads = g.backward(loss);
        assert!(grads.get(x).is_none());
        assert!(grads.get(w).is_some());
    }

    #[test]
    fn mse_loss_value() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let loss = g.mse_loss(x, Tensor::zeros(&[2, 2]));
        // (1 + 4 + 9 + 16) / 4
        assert!((g.value(loss).data()[0] - 7.5).abs() < 1e-6);
    }

    #[test]
    fn attention_rows_mix_only_within_groups() {
        let mut g = Graph::new();
        let mut data = pseudo_random(6 * 12, 99);
        let qkv = g.param(Tensor::from_vec(&[6, 12], data.clone()).unwrap());
        let out1 = g.attention(qkv, 2, 3, 2).0;
        let v1 = g.nodes[out1].value.clone();

        // Perturb a token in group 1; group 0 output must be unchanged.
        data[5 * 12] += 1.0;
        let mut g2 = Graph::new();
        let qkv2 = g2.param(Tensor::from_vec(&[6, 12], data).unwrap());
        let out2 = g2.attention(qkv2, 2, 3, 2).0;
        let v2 = g2.nodes[out2].value.clone();
        assert_eq!(v1.data()[..3 * 4], v2.data()[..3 * 4], "group 0 unchanged");
        assert_ne!(v1.data()[3 * 4..], v2.data()[3 * 4..], "group 1 changed");
    }
}
