//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a Wengert tape: every operation appends one node holding
//! the forward value, so append order is a topological order and backward
//! is a single reverse sweep. Graphs are rebuilt each forward pass and are
//! confined to one thread while a pass is active; parallel work always uses
//! independent graphs.
//!
//! All math is 64-bit. There is no implicit broadcasting beyond the
//! row-wise cases the models actually use ([`Graph::add_row`]); anything
//! else requires an explicit reshape so shape bugs fail loudly.

use crate::error::{Error, Result};
use crate::rng;
use rand_chacha::ChaCha8Rng;

pub type NodeId = usize;

/// A named, trainable (or frozen) tensor living outside any graph.
///
/// Parameters are leafed into a graph at the start of each forward pass and
/// receive gradients back through [`Graph::grad`].
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Param { name: name.to_string(), shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn ones(name: &str, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Param { name: name.to_string(), shape: shape.to_vec(), data: vec![1.0; n] }
    }

    /// Gaussian init with the given standard deviation.
    pub fn normal(name: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        rng::fill_normal(rng, &mut data, std);
        Param { name: name.to_string(), shape: shape.to_vec(), data }
    }

    /// Xavier/Glorot init for a `[fan_in, fan_out]` projection.
    pub fn xavier(name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        Self::normal(name, &[fan_in, fan_out], std, rng)
    }

    /// Random direction of unit Euclidean norm.
    pub fn unit_norm(name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::normal(name, &[1, dim], 1.0, rng);
        let norm = p.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut p.data {
                *x /= norm;
            }
        } else {
            p.data[0] = 1.0;
        }
        p
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

// ── Raw matmul kernels ───────────────────────────────────────────────
// The hot path of the whole crate. All three accumulate into `c` so the
// backward pass never materializes transposes.

/// c[m×n] += a[m×k] · b[k×n]
fn mm_nn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// c[m×n] += a[m×k] · bᵀ where b is [n×k]
fn mm_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            crow[j] += s;
        }
    }
}

/// c[k×n] += aᵀ · b where a is [m×k], b is [m×n]
fn mm_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += api * brow[j];
            }
        }
    }
}

const GELU_COEF: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + eˣ), stable for large |x|.
fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Softmax(NodeId, usize),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Cosine(NodeId, NodeId),
    LogSumExp(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize, len: usize },
    Sum(NodeId),
    Mean(NodeId),
    /// Reassemble per-patch pixel rows `[L × p²]` into an image `[H × W]`.
    PatchAssemble { x: NodeId, grid: usize, patch: usize },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    /// True when some leaf with `requires_grad` feeds this node; backward
    /// skips every branch where this is false.
    needs_grad: bool,
}

/// Append-only computation tape. Rebuilt for every forward pass.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].data
    }

    /// Value of a single-element tensor.
    pub fn value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].data.len(), 1);
        self.nodes[id].data[0]
    }

    /// Gradient of a leaf after [`Graph::backward`]; `None` when the leaf
    /// does not require gradients.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    fn rows(&self, id: NodeId) -> usize {
        self.nodes[id].shape[0]
    }

    fn cols(&self, id: NodeId) -> usize {
        self.nodes[id].shape[1]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.nodes.len();
        self.nodes.push(Node { op, shape, data, grad: None, requires_grad: false, needs_grad });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn assert_2d(&self, id: NodeId, op: &'static str) {
        assert!(self.nodes[id].shape.len() == 2, "{op}: rank-2 tensor required");
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> NodeId {
        let id = self.push(Op::Leaf, shape.to_vec(), data, requires_grad);
        self.nodes[id].requires_grad = requires_grad;
        id
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> NodeId {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(vec![v], &[1, 1], false)
    }

    /// Leaf a parameter's current value into the graph.
    pub fn param(&mut self, p: &Param, trainable: bool) -> NodeId {
        self.leaf(p.data.clone(), &p.shape, trainable)
    }

    // ── Ops ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", left: sa.clone(), right: sb.clone() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm_nn_acc(&mut out, &self.nodes[a].data, &self.nodes[b].data, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], out, ng))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        self.assert_2d(x, "transpose");
        let (r, c) = (self.rows(x), self.cols(x));
        let src = &self.nodes[x].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.needs(x);
        self.push(Op::Transpose(x), vec![c, r], out, ng)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.nodes[x].data.len(), "reshape: element count must be preserved");
        let data = self.nodes[x].data.clone();
        let ng = self.needs(x);
        self.push(Op::Reshape(x), shape.to_vec(), data, ng)
    }

    fn zip_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
        name: &'static str,
    ) -> NodeId {
        assert_eq!(self.nodes[a].shape, self.nodes[b].shape, "{name}: shapes must match");
        let out: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(self.nodes[b].data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a].shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(op, shape, out, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_elementwise(a, b, Op::Add(a, b), |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_elementwise(a, b, Op::Sub(a, b), |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_elementwise(a, b, Op::Mul(a, b), |x, y| x * y, "mul")
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip_elementwise(a, b, Op::Div(a, b), |x, y| x / y, "div")
    }

    /// `[r×c] + [1×c]`, the bias/row-broadcast case.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        self.assert_2d(x, "add_row");
        let c = self.cols(x);
        assert_eq!(self.nodes[row].shape, vec![1, c], "add_row: row must be [1×{c}]");
        let r = self.rows(x);
        let mut out = self.nodes[x].data.clone();
        let rowd = &self.nodes[row].data;
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += rowd[j];
            }
        }
        let ng = self.needs(x) || self.needs(row);
        self.push(Op::AddRow(x, row), vec![r, c], out, ng)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[x].data.iter().map(|&v| v * s).collect();
        let shape = self.nodes[x].shape.clone();
        let ng = self.needs(x);
        self.push(Op::Scale(x, s), shape, out, ng)
    }

    pub fn add_scalar(&mut self, x: NodeId, s: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[x].data.iter().map(|&v| v + s).collect();
        let shape = self.nodes[x].shape.clone();
        let ng = self.needs(x);
        self.push(Op::AddScalar(x), shape, out, ng)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[x].data.iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.nodes[x].shape.clone();
        let ng = self.needs(x);
        self.push(Op::Gelu(x), shape, out, ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[x].data.iter().map(|&v| sigmoid_scalar(v)).collect();
        let shape = self.nodes[x].shape.clone();
        let ng = self.needs(x);
        self.push(Op::Sigmoid(x), shape, out, ng)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[x].data.iter().map(|&v| softplus_scalar(v)).collect();
        let shape = self.nodes[x].shape.clone();
        let ng = self.needs(x);
        self.push(Op::Softplus(x), shape, out, ng)
    }

    /// Max-stabilized softmax along `axis` (0 = down columns, 1 = along rows)
    /// of a rank-2 tensor. Every slice sums to one.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.assert_2d(x, "softmax");
        assert!(axis < 2, "softmax: axis must be 0 or 1");
        if self.nodes[x].data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let (r, c) = (self.rows(x), self.cols(x));
        let src = &self.nodes[x].data;
        let mut out = vec![0.0; r * c];
        let (slices, len, stride, step) =
            if axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
        for s in 0..slices {
            let base = s * stride;
            let mut mx = f64::NEG_INFINITY;
            for i in 0..len {
                mx = mx.max(src[base + i * step]);
            }
            let mut sum = 0.0;
            for i in 0..len {
                let e = (src[base + i * step] - mx).exp();
                out[base + i * step] = e;
                sum += e;
            }
            for i in 0..len {
                out[base + i * step] /= sum;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Op::Softmax(x, axis), vec![r, c], out, ng))
    }

    /// Row-wise layer norm over the last axis with affine parameters
    /// `gamma`, `beta` of shape `[1×C]`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        self.assert_2d(x, "layer_norm");
        let (r, c) = (self.rows(x), self.cols(x));
        for (p, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.nodes[p].shape != [1, c] {
                return Err(Error::ShapeMismatch {
                    op: if name == "gamma" { "layer_norm gamma" } else { "layer_norm beta" },
                    left: self.nodes[x].shape.clone(),
                    right: self.nodes[p].shape.clone(),
                });
            }
        }
        let mut out = vec![0.0; r * c];
        {
            let src = &self.nodes[x].data;
            let g = &self.nodes[gamma].data;
            let b = &self.nodes[beta].data;
            for i in 0..r {
                let row = &src[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..c {
                    out[i * c + j] = (row[j] - mean) * inv * g[j] + b[j];
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, vec![r, c], out, ng))
    }

    /// Cosine similarity of two equal-length vectors, as a scalar node.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].data.len() != self.nodes[b].data.len() {
            return Err(Error::ShapeMismatch {
                op: "cosine",
                left: self.nodes[a].shape.clone(),
                right: self.nodes[b].shape.clone(),
            });
        }
        let na: f64 = self.nodes[a].data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = self.nodes[b].data.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroVector { op: "cosine" });
        }
        let dot: f64 = self.nodes[a]
            .data
            .iter()
            .zip(self.nodes[b].data.iter())
            .map(|(&x, &y)| x * y)
            .sum();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Cosine(a, b), vec![1, 1], vec![dot / (na * nb)], ng))
    }

    /// ln Σ exp over all elements, max-stabilized, as a scalar node.
    pub fn logsumexp(&mut self, x: NodeId) -> NodeId {
        let src = &self.nodes[x].data;
        let mx = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = src.iter().map(|&v| (v - mx).exp()).sum();
        let v = mx + sum.ln();
        let ng = self.needs(x);
        self.push(Op::LogSumExp(x), vec![1, 1], vec![v], ng)
    }

    /// Stack rank-2 tensors with equal column counts along axis 0.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows: need at least one part");
        let c = self.cols(parts[0]);
        let mut data = Vec::new();
        let mut r = 0;
        for &p in parts {
            self.assert_2d(p, "concat_rows");
            assert_eq!(self.cols(p), c, "concat_rows: column counts must match");
            r += self.rows(p);
            data.extend_from_slice(&self.nodes[p].data);
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatRows(parts.to_vec()), vec![r, c], data, ng)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        self.assert_2d(x, "slice_rows");
        let c = self.cols(x);
        assert!(start + len <= self.rows(x), "slice_rows: range out of bounds");
        let data = self.nodes[x].data[start * c..(start + len) * c].to_vec();
        let ng = self.needs(x);
        self.push(Op::SliceRows { x, start, len }, vec![len, c], data, ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols: need at least one part");
        let r = self.rows(parts[0]);
        let mut total_c = 0;
        for &p in parts {
            self.assert_2d(p, "concat_cols");
            assert_eq!(self.rows(p), r, "concat_cols: row counts must match");
            total_c += self.cols(p);
        }
        let mut data = vec![0.0; r * total_c];
        let mut off = 0;
        for &p in parts {
            let pc = self.cols(p);
            for i in 0..r {
                data[i * total_c + off..i * total_c + off + pc]
                    .copy_from_slice(&self.nodes[p].data[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatCols(parts.to_vec()), vec![r, total_c], data, ng)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        self.assert_2d(x, "slice_cols");
        let (r, c) = (self.rows(x), self.cols(x));
        assert!(start + len <= c, "slice_cols: range out of bounds");
        let src = &self.nodes[x].data;
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let ng = self.needs(x);
        self.push(Op::SliceCols { x, start, len }, vec![r, len], data, ng)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v: f64 = self.nodes[x].data.iter().sum();
        let ng = self.needs(x);
        self.push(Op::Sum(x), vec![1, 1], vec![v], ng)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].data.len().max(1);
        let v: f64 = self.nodes[x].data.iter().sum::<f64>() / n as f64;
        let ng = self.needs(x);
        self.push(Op::Mean(x), vec![1, 1], vec![v], ng)
    }

    /// `[grid² × patch²]` per-patch pixels → `[grid·patch × grid·patch]` image.
    pub fn patch_assemble(&mut self, x: NodeId, grid: usize, patch: usize) -> NodeId {
        self.assert_2d(x, "patch_assemble");
        assert_eq!(self.rows(x), grid * grid, "patch_assemble: row count must be grid²");
        assert_eq!(self.cols(x), patch * patch, "patch_assemble: col count must be patch²");
        let side = grid * patch;
        let src = &self.nodes[x].data;
        let mut out = vec![0.0; side * side];
        for l in 0..grid * grid {
            let (gy, gx) = (l / grid, l % grid);
            for py in 0..patch {
                for px in 0..patch {
                    out[(gy * patch + py) * side + gx * patch + px] =
                        src[l * patch * patch + py * patch + px];
                }
            }
        }
        let ng = self.needs(x);
        self.push(Op::PatchAssemble { x, grid, patch }, vec![side, side], out, ng)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of every `requires_grad`
    /// leaf accumulate additively into [`Graph::grad`]; leaves without
    /// `requires_grad` keep no gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].data.len() != 1 {
            return Err(Error::NonScalarLoss { shape: self.nodes[loss].shape.clone() });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let seed = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.backprop_node(id, &seed, &mut grads);
            if self.nodes[id].requires_grad {
                match &mut self.nodes[id].grad {
                    Some(acc) => {
                        for (a, s) in acc.iter_mut().zip(seed.iter()) {
                            *a += s;
                        }
                    }
                    None => self.nodes[id].grad = Some(seed),
                }
            }
        }
        // Trainable leaves the loss never touched get an explicit zero grad.
        for id in 0..=loss {
            if self.nodes[id].requires_grad && self.nodes[id].grad.is_none() {
                let len = self.nodes[id].data.len();
                self.nodes[id].grad = Some(vec![0.0; len]);
            }
        }
        Ok(())
    }

    fn accum(grads: &mut Vec<Option<Vec<f64>>>, id: NodeId, len: usize) -> &mut Vec<f64> {
        grads[id].get_or_insert_with(|| vec![0.0; len])
    }

    fn backprop_node(&self, id: NodeId, d: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        // Local shorthands over immutable node storage.
        let len_of = |i: NodeId| self.nodes[i].data.len();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if self.needs(*a) {
                    let bd = &self.nodes[*b].data;
                    // dA += dC · Bᵀ
                    let ga = Self::accum(grads, *a, m * k);
                    mm_nt_acc(ga, d, bd, m, n, k);
                }
                if self.needs(*b) {
                    let ad = &self.nodes[*a].data;
                    // dB += Aᵀ · dC
                    let gb = Self::accum(grads, *b, k * n);
                    mm_tn_acc(gb, ad, d, m, k, n);
                }
            }
            Op::Transpose(x) => {
                if self.needs(*x) {
                    let (r, c) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                    let gx = Self::accum(grads, *x, r * c);
                    // d has shape [c×r]
                    for i in 0..c {
                        for j in 0..r {
                            gx[j * c + i] += d[i * r + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    let gx = Self::accum(grads, *x, len_of(*x));
                    for (g, &dv) in gx.iter_mut().zip(d.iter()) {
                        *g += dv;
                    }
                }
            }
            Op::Add(a, b) => {
                for &i in [a, b] {
                    if self.needs(i) {
                        let gi = Self::accum(grads, i, len_of(i));
                        for (g, &dv) in gi.iter_mut().zip(d.iter()) {
                            *g += dv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    let ga = Self::accum(grads, *a, len_of(*a));
                    for (g, &dv) in ga.iter_mut().zip(d.iter()) {
                        *g += dv;
                    }
                }
                if self.needs(*b) {
                    let gb = Self::accum(grads, *b, len_of(*b));
                    for (g, &dv) in gb.iter_mut().zip(d.iter()) {
                        *g -= dv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bd = &self.nodes[*b].data;
                    let ga = Self::accum(grads, *a, len_of(*a));
                    for i in 0..d.len() {
                        ga[i] += d[i] * bd[i];
                    }
                }
                if self.needs(*b) {
                    let ad = &self.nodes[*a].data;
                    let gb = Self::accum(grads, *b, len_of(*b));
                    for i in 0..d.len() {
                        gb[i] += d[i] * ad[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let bd = &self.nodes[*b].data;
                if self.needs(*a) {
                    let ga = Self::accum(grads, *a, len_of(*a));
                    for i in 0..d.len() {
                        ga[i] += d[i] / bd[i];
                    }
                }
                if self.needs(*b) {
                    let ad = &self.nodes[*a].data;
                    let gb = Self::accum(grads, *b, len_of(*b));
                    for i in 0..d.len() {
                        gb[i] -= d[i] * ad[i] / (bd[i] * bd[i]);
                    }
                }
            }
            Op::AddRow(x, row) => {
                let c = self.nodes[*row].shape[1];
                if self.needs(*x) {
                    let gx = Self::accum(grads, *x, len_of(*x));
                    for (g, &dv) in gx.iter_mut().zip(d.iter()) {
                        *g += dv;
                    }
                }
                if self.needs(*row) {
                    let gr = Self::accum(grads, *row, c);
                    for (i, &dv) in d.iter().enumerate() {
                        gr[i % c] += dv;
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.needs(*x) {
                    let gx = Self::accum(grads, *x, len_of(*x));
                    for (g, &dv) in gx.iter_mut().zip(d.iter()) {
                        *g += dv * s;
                    }
                }
            }
            Op::AddScalar(x) => {
                if self.needs(*x) {
                    let gx = Self::accum(grads, *x, len_of(*x));
                    for (g, &dv) in gx.iter_mut().zip(d.iter()) {
                        *g += dv;
                    }
                }
            }
            Op::Gelu(x) => {
                if self.needs(*x) {
                    let xd = &self.nodes[*x].data;
                    let gx = Self::accum(grads, *x, len_of(*x));
                    for i in 0..d.len() {
                        gx[i] += d[i] * gelu_grad_scalar(xd[i]);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let yd = &self.nodes[id].data;
                    let gx = Self::accum(grads, *x, len_of(*x));
                    for i in 0..d.len() {
                        gx[i] += d[i] * yd[i] * (1.0 - yd[i]);
                    }
                }
            }
            Op::Softplus(x) => {
                if self.needs(*x) {
                    let xd = &self.nodes[*x].data;
                    let gx = Self::accum(grads, *x, len_of(*x));
                    for i in 0..d.len() {
                        gx[i] += d[i] * sigmoid_scalar(xd[i]);
                    }
                }
            }
            Op::Softmax(x, axis) => {
                if self.needs(*x) {
                    let y = &self.nodes[id].data;
                    let (r, c) = (self.nodes[id].shape[0], self.nodes[id].shape[1]);
                    let (slices, len, stride, step) =
                        if *axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
                    let gx = Self::accum(grads, *x, r * c);
                    for s in 0..slices {
                        let base = s * stride;
                        let mut dot = 0.0;
                        for i in 0..len {
                            dot += d[base + i * step] * y[base + i * step];
                        }
                        for i in 0..len {
                            let idx = base + i * step;
                            gx[idx] += y[idx] * (d[idx] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (r, c) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                let xd = &self.nodes[*x].data;
                let g = &self.nodes[*gamma].data;
                let cf = c as f64;
                // Recompute per-row statistics; cheaper than saving them.
                for i in 0..r {
                    let row = &xd[i * c..(i + 1) * c];
                    let drow = &d[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / cf;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                    let inv = 1.0 / (var + eps).sqrt();
                    if self.needs(*gamma) {
                        let gg = Self::accum(grads, *gamma, c);
                        for j in 0..c {
                            gg[j] += drow[j] * (row[j] - mean) * inv;
                        }
                    }
                    if self.needs(*beta) {
                        let gb = Self::accum(grads, *beta, c);
                        for j in 0..c {
                            gb[j] += drow[j];
                        }
                    }
                    if self.needs(*x) {
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for j in 0..c {
                            let dy = drow[j] * g[j];
                            let xhat = (row[j] - mean) * inv;
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                        }
                        let gx = Self::accum(grads, *x, r * c);
                        for j in 0..c {
                            let dy = drow[j] * g[j];
                            let xhat = (row[j] - mean) * inv;
                            gx[i * c + j] +=
                                inv * (dy - sum_dy / cf - xhat * sum_dy_xhat / cf);
                        }
                    }
                }
            }
            Op::Cosine(a, b) => {
                let ad = &self.nodes[*a].data;
                let bd = &self.nodes[*b].data;
                let na = ad.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = bd.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cosv = self.nodes[id].data[0];
                let dv = d[0];
                if self.needs(*a) {
                    let ga = Self::accum(grads, *a, ad.len());
                    for i in 0..ad.len() {
                        ga[i] += dv * (bd[i] / (na * nb) - cosv * ad[i] / (na * na));
                    }
                }
                if self.needs(*b) {
                    let gb = Self::accum(grads, *b, bd.len());
                    for i in 0..bd.len() {
                        gb[i] += dv * (ad[i] / (na * nb) - cosv * bd[i] / (nb * nb));
                    }
                }
            }
            Op::LogSumExp(x) => {
                if self.needs(*x) {
                    let xd = &self.nodes[*x].data;
                    let v = self.nodes[id].data[0];
                    let dv = d[0];
                    let gx = Self::accum(grads, *x, xd.len());
                    for i in 0..xd.len() {
                        gx[i] += dv * (xd[i] - v).exp();
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let n = len_of(p);
                    if self.needs(p) {
                        let gp = Self::accum(grads, p, n);
                        for i in 0..n {
                            gp[i] += d[off + i];
                        }
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start, len } => {
                if self.needs(*x) {
                    let c = self.nodes[*x].shape[1];
                    let gx = Self::accum(grads, *x, len_of(*x));
                    for i in 0..len * c {
                        gx[start * c + i] += d[i];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let r = self.nodes[id].shape[0];
                let total_c = self.nodes[id].shape[1];
                let mut off = 0;
                for p in parts {
                    let pc = self.nodes[p].shape[1];
                    if self.needs(p) {
                        let gp = Self::accum(grads, p, r * pc);
                        for i in 0..r {
                            for j in 0..pc {
                                gp[i * pc + j] += d[i * total_c + off + j];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.needs(*x) {
                    let (r, c) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                    let gx = Self::accum(grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..*len {
                            gx[i * c + start + j] += d[i * len + j];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let dv = d[0];
                    let gx = Self::accum(grads, *x, len_of(*x));
                    for g in gx.iter_mut() {
                        *g += dv;
                    }
                }
            }
            Op::Mean(x) => {
                if self.needs(*x) {
                    let n = len_of(*x).max(1);
                    let dv = d[0] / n as f64;
                    let gx = Self::accum(grads, *x, len_of(*x));
                    for g in gx.iter_mut() {
                        *g += dv;
                    }
                }
            }
            Op::PatchAssemble { x, grid, patch } => {
                if self.needs(*x) {
                    let (grid, patch) = (*grid, *patch);
                    let side = grid * patch;
                    let gx = Self::accum(grads, *x, grid * grid * patch * patch);
                    for l in 0..grid * grid {
                        let (gy, gxi) = (l / grid, l % grid);
                        for py in 0..patch {
                            for px in 0..patch {
                                gx[l * patch * patch + py * patch + px] +=
                                    d[(gy * patch + py) * side + gxi * patch + px];
                            }
                        }
                    }
                }
            }
        }
    }
}

// ── Adam ─────────────────────────────────────────────────────────────

/// Adam hyperparameters. Defaults: lr 1e-3, β₁ 0.9, β₂ 0.999, ε 1e-8.
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams { lr, ..Default::default() }
    }
}

/// Per-parameter Adam state: first/second moments and step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        AdamState { m: vec![0.0; numel], v: vec![0.0; numel], t: 0 }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(param: &mut [f64], grad: &[f64], state: &mut AdamState, hp: &AdamParams) {
    assert_eq!(param.len(), grad.len(), "adam_step: grad length mismatch");
    assert_eq!(param.len(), state.m.len(), "adam_step: state length mismatch");
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for i in 0..param.len() {
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * grad[i];
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * grad[i] * grad[i];
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        param[i] -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
    }
}

/// Adam over a list of parameters, holding one state per parameter.
pub struct Adam {
    pub hp: AdamParams,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(hp: AdamParams, params: &[&Param]) -> Self {
        Adam { hp, states: params.iter().map(|p| AdamState::new(p.numel())).collect() }
    }

    /// Apply one step; `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), self.states.len());
        assert_eq!(params.len(), grads.len());
        for ((p, g), s) in params.iter_mut().zip(grads.iter()).zip(self.states.iter_mut()) {
            adam_step(&mut p.data, g, s, &self.hp);
        }
    }
}

// ── Gradient checking ────────────────────────────────────────────────

/// Compare reverse-mode gradients against central finite differences.
///
/// `build` must deterministically construct a scalar loss from the leafed
/// parameters (in order). Returns the worst relative error
/// `|fd − ad| / max(|fd|, |ad|, 1)` over every parameter element.
pub fn finite_diff_check<F>(params: &[Param], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |ps: &[Param]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.param(p, false)).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss))
    };

    // Reverse-mode gradients at the base point.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p, true)).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let ad: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).expect("trainable leaf must have a gradient").to_vec())
        .collect();

    let mut probe: Vec<Param> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for j in 0..p.numel() {
            let orig = probe[pi].data[j];
            probe[pi].data[j] = orig + eps;
            let up = eval(&probe)?;
            probe[pi].data[j] = orig - eps;
            let down = eval(&probe)?;
            probe[pi].data[j] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = ad[pi][j];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_with(data: &[f64], shape: &[usize]) -> (Graph, NodeId) {
        let mut g = Graph::new();
        let id = g.leaf(data.to_vec(), shape, true);
        (g, id)
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let out = g.matmul(i2, i2).unwrap();
        assert_eq!(g.data(out), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_hand_product() {
        let mut g = Graph::new();
        let a = g.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = g.constant(vec![0.0, 1.0], &[2, 1]);
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(out), &[2, 1]);
        assert_eq!(g.data(out), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut g = Graph::new();
        let z = g.constant(vec![0.0; 6], &[2, 3]);
        let b = g.constant(vec![1.0, -2.0, 3.0, 0.5, 0.25, -1.0], &[3, 2]);
        let out = g.matmul(z, b).unwrap();
        assert!(g.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(vec![0.0; 6], &[2, 3]);
        let b = g.constant(vec![0.0; 4], &[2, 2]);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_on_constant_rows() {
        let (mut g, x) = graph_with(&[0.0, 0.0, 0.0], &[1, 3]);
        let y = g.softmax(x, 1).unwrap();
        for &v in g.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form_two_logits() {
        let (mut g, x) = graph_with(&[0.0, 2.0f64.ln()], &[1, 2]);
        let y = g.softmax(x, 1).unwrap();
        assert!((g.data(y)[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((g.data(y)[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = rng::rng_for(3, "softmax");
        let mut data = vec![0.0; 5 * 7];
        rng::fill_normal(&mut rng, &mut data, 3.0);
        let mut g = Graph::new();
        let x = g.constant(data.clone(), &[5, 7]);
        let y = g.softmax(x, 1).unwrap();
        for i in 0..5 {
            let s: f64 = g.data(y)[i * 7..(i + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
        }
        let shifted: Vec<f64> = data.iter().map(|v| v + 17.25).collect();
        let xs = g.constant(shifted, &[5, 7]);
        let ys = g.softmax(xs, 1).unwrap();
        for (a, b) in g.data(y).to_vec().iter().zip(g.data(ys)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, f64::NAN], &[1, 2]);
        assert_eq!(g.softmax(x, 1).unwrap_err(), Error::NonFinite { op: "softmax" });
    }

    #[test]
    fn softmax_axis_zero_normalizes_columns() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 5.0, 1.0, -5.0], &[2, 2]);
        let y = g.softmax(x, 0).unwrap();
        let d = g.data(y);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-12);
        assert!((d[1] + d[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_beta() {
        let mut g = Graph::new();
        let x = g.constant(vec![4.0, 4.0, 4.0], &[1, 3]);
        let gamma = g.constant(vec![1.0; 3], &[1, 3]);
        let beta = g.constant(vec![0.0; 3], &[1, 3]);
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in g.data(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_already_normalized_row_is_fixed_point() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, -1.0], &[1, 2]);
        let gamma = g.constant(vec![1.0; 2], &[1, 2]);
        let beta = g.constant(vec![0.0; 2], &[1, 2]);
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert!((g.data(y)[0] - 1.0).abs() < 1e-6);
        assert!((g.data(y)[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_zero_gamma_outputs_beta() {
        let mut g = Graph::new();
        let x = g.constant(vec![3.0, -7.0, 0.5, 2.0], &[2, 2]);
        let gamma = g.constant(vec![0.0; 2], &[1, 2]);
        let beta = g.constant(vec![0.25, -0.5], &[1, 2]);
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.data(y), &[0.25, -0.5, 0.25, -0.5]);
    }

    #[test]
    fn gelu_known_values() {
        let mut g = Graph::new();
        let x = g.constant(vec![0.0, 1.0, 8.0], &[1, 3]);
        let y = g.gelu(x);
        let d = g.data(y);
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 0.84122).abs() < 1e-4, "gelu(1) = {}", d[1]);
        assert!((d[2] - 8.0).abs() < 1e-6, "gelu saturates to identity, got {}", d[2]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let (mut g, x) = graph_with(&[3.0, -1.0, 0.5, 2.0, 7.0, -4.0], &[2, 3]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square_sum() {
        let (mut g, x) = graph_with(&[1.0, 2.0], &[1, 2]);
        let sq = g.mul(x, x);
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_across_uses() {
        let (mut g, x) = graph_with(&[5.0, -2.0], &[1, 2]);
        let doubled = g.add(x, x);
        let s = g.sum(doubled);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let (mut g, x) = graph_with(&[1.0, 2.0], &[1, 2]);
        let y = g.add(x, x);
        let err = g.backward(y).unwrap_err();
        assert_eq!(err, Error::NonScalarLoss { shape: vec![1, 2] });
    }

    #[test]
    fn frozen_leaf_keeps_no_grad() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], &[1, 2], false);
        let y = g.leaf(vec![3.0, 4.0], &[1, 2], true);
        let p = g.mul(x, y);
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(y).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn unreached_trainable_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0], &[1, 1], true);
        let y = g.leaf(vec![2.0], &[1, 1], true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
        assert_eq!(g.grad(y).unwrap(), &[0.0]);
        let _ = y;
    }

    #[test]
    fn cosine_matches_hand_value_and_rejects_zero() {
        let mut g = Graph::new();
        let a = g.constant(vec![3.0, 4.0], &[1, 2]);
        let b = g.constant(vec![4.0, 3.0], &[1, 2]);
        let c = g.cosine(a, b).unwrap();
        assert!((g.value(c) - 0.96).abs() < 1e-12);
        let z = g.constant(vec![0.0, 0.0], &[1, 2]);
        assert_eq!(g.cosine(a, z).unwrap_err(), Error::ZeroVector { op: "cosine" });
    }

    #[test]
    fn logsumexp_is_stable_and_correct() {
        let mut g = Graph::new();
        let x = g.constant(vec![1000.0, 1000.0], &[1, 2]);
        let l = g.logsumexp(x);
        assert!((g.value(l) - (1000.0 + 2.0f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let top = g.slice_rows(x, 0, 1);
        let rest = g.slice_rows(x, 1, 2);
        let back = g.concat_rows(&[top, rest]);
        assert_eq!(g.data(back), g.data(x));
        let left = g.slice_cols(x, 0, 1);
        let right = g.slice_cols(x, 1, 1);
        let back2 = g.concat_cols(&[left, right]);
        assert_eq!(g.data(back2), g.data(x));
    }

    #[test]
    fn patch_assemble_places_blocks_spatially() {
        let mut g = Graph::new();
        // 2×2 grid of 2×2 patches; patch l filled with value l.
        let mut data = vec![0.0; 16];
        for l in 0..4 {
            for p in 0..4 {
                data[l * 4 + p] = l as f64;
            }
        }
        let x = g.constant(data, &[4, 4]);
        let img = g.patch_assemble(x, 2, 2);
        let d = g.data(img);
        // Row 0: patches 0,0,1,1
        assert_eq!(&d[0..4], &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(&d[12..16], &[2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn adam_zero_grad_leaves_parameter_unchanged() {
        let mut p = vec![1.5, -0.5];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &AdamParams::default());
        assert_eq!(p, vec![1.5, -0.5]);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        let hp = AdamParams::default();
        for &g0 in &[0.3, -2.0, 1e-4] {
            let mut p = vec![1.0];
            let mut s = AdamState::new(1);
            adam_step(&mut p, &[g0], &mut s, &hp);
            let delta = (p[0] - 1.0).abs();
            assert!(delta <= hp.lr && delta > hp.lr * 0.99, "delta {delta}");
            assert_eq!((p[0] - 1.0).signum(), -g0.signum());
        }
    }

    #[test]
    fn adam_default_lr_is_1e_minus_3() {
        assert_eq!(AdamParams::default().lr, 1e-3);
    }

    #[test]
    fn adam_is_bit_deterministic() {
        let run = || {
            let mut p = vec![0.7, -0.3, 1.1];
            let mut s = AdamState::new(3);
            for i in 0..50 {
                let g = vec![0.1 * i as f64, -0.2, 0.05];
                adam_step(&mut p, &g, &mut s, &AdamParams::default());
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn finite_diff_quadratic_is_tight() {
        let mut rng = rng::rng_for(11, "fd-quad");
        let p = Param::normal("w", &[3, 3], 1.0, &mut rng);
        let err = finite_diff_check(&[p], 1e-5, |g, ids| {
            let sq = g.mul(ids[0], ids[0]);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-7, "quadratic fd error {err}");
    }

    #[test]
    fn finite_diff_linear_is_rounding_level() {
        let mut rng = rng::rng_for(12, "fd-lin");
        let p = Param::normal("w", &[2, 4], 1.0, &mut rng);
        let err = finite_diff_check(&[p], 1e-5, |g, ids| Ok(g.sum(ids[0]))).unwrap();
        assert!(err < 1e-9, "linear fd error {err}");
    }

    #[test]
    fn finite_diff_covers_composite_ops() {
        // softmax ∘ layer_norm ∘ matmul ∘ gelu chain plus cosine and lse.
        let mut rng = rng::rng_for(13, "fd-mix");
        let w = Param::normal("w", &[4, 4], 0.7, &mut rng);
        let x = Param::normal("x", &[3, 4], 0.9, &mut rng);
        let gam = Param::ones("gam", &[1, 4]);
        let bet = Param::zeros("bet", &[1, 4]);
        let k = Param::normal("k", &[1, 4], 1.0, &mut rng);
        let err = finite_diff_check(&[w, x, gam, bet, k], 1e-5, |g, ids| {
            let h = g.matmul(ids[1], ids[0])?;
            let h = g.gelu(h);
            let h = g.layer_norm(h, ids[2], ids[3], 1e-5)?;
            let sm = g.softmax(h, 1)?;
            let q = g.slice_rows(sm, 0, 1);
            let c = g.cosine(q, ids[4])?;
            let lse = g.logsumexp(h);
            let sp = g.softplus(c);
            let sg = g.sigmoid(lse);
            let both = g.add(sp, sg);
            Ok(g.mean(both))
        })
        .unwrap();
        assert!(err < 1e-7, "composite fd error {err}");
    }
}
