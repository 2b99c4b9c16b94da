//! Recorded-operation graph and its reverse pass.

use super::{fmt_shape, matmul, matmul_nt, numel};
use crate::error::{shape_err, Result};

pub type NodeId = usize;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

/// One recorded operation. Input ids always point at earlier nodes, so tape
/// order is a valid topological order.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    /// x[R,C] + bias[C] broadcast over rows.
    AddBias { x: NodeId, bias: NodeId },
    /// x[R,C] * s[R] broadcast over columns.
    ScaleRows { x: NodeId, s: NodeId },
    /// x[R,C] + b[R] broadcast over columns.
    BiasRows { x: NodeId, b: NodeId },
    /// A[batch,m,k] * B[k,n] (batch may be 1; rhs shared across batch) or
    /// A[batch,m,k] * B[batch,k,n] when `rhs_batched`.
    MatMul { a: NodeId, b: NodeId, batch: usize, m: usize, k: usize, n: usize, rhs_batched: bool },
    /// A[m,k] * B[n,k]^T.
    MatMulNT { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Gelu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Softmax { x: NodeId, axis: usize },
    LogSoftmax { x: NodeId, axis: usize },
    /// Normalization over the last dim with per-feature affine.
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    /// x[1,C] tiled to [times,C].
    RepeatRows { x: NodeId, times: usize },
    ConcatRows(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize, len: usize },
    /// Swap the first two axes of a >=2-d tensor.
    Transpose01 { x: NodeId, d0: usize, d1: usize, rest: usize },
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// image[C,H,W] -> [N, C*P*P] rows in row-major patch-grid order.
    Patchify { x: NodeId, c: usize, h: usize, w: usize, p: usize },
    /// Grouped dot products: q[G,D] against kv[G*T,D] -> [G,T], scaled.
    ScoreNT { q: NodeId, kv: NodeId, t: usize, scale: f64 },
    /// Grouped weighted sum: attn[G,T] with kv[G*T,D] -> [G,D].
    MixNT { attn: NodeId, kv: NodeId, t: usize },
    /// Same-padded stride-1 convolution; im2col buffer kept for the reverse pass.
    Conv2d { x: NodeId, kernel: NodeId, bias: NodeId, cin: usize, cout: usize, k: usize, h: usize, w: usize, cols: Vec<f64> },
    /// 2x bilinear upsampling, align-corners=false.
    BilinearUp2 { x: NodeId, c: usize, h: usize, w: usize },
}

#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    pub(crate) op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    pub(crate) tensors: Vec<Tensor>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { tensors: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.tensors[id].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.tensors[id].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.tensors[id].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.tensors[id].requires_grad
    }

    /// Value of a single-element node.
    pub fn value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.tensors[id].data.len(), 1);
        self.tensors[id].data[0]
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert_eq!(data.len(), numel(&shape));
        let id = self.tensors.len();
        self.tensors.push(Tensor { shape, data, requires_grad, grad: None, op });
        id
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.tensors[i].requires_grad)
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<NodeId> {
        if data.len() != numel(&shape) {
            return Err(shape_err!(
                "leaf data length {} does not match shape {}",
                data.len(),
                fmt_shape(&shape)
            ));
        }
        Ok(self.push(data, shape, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<NodeId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(vec![v], vec![1], Op::Leaf, false)
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, name: &str) -> Result<()> {
        if self.tensors[a].shape != self.tensors[b].shape {
            return Err(shape_err!(
                "{name} operands differ: {} vs {}",
                fmt_shape(&self.tensors[a].shape),
                fmt_shape(&self.tensors[b].shape)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<f64> = self.tensors[a]
            .data
            .iter()
            .zip(&self.tensors[b].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.tensors[a].shape.clone();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(data, shape, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.tensors[a]
            .data
            .iter()
            .zip(&self.tensors[b].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.tensors[a].shape.clone();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(data, shape, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.tensors[a]
            .data
            .iter()
            .zip(&self.tensors[b].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.tensors[a].shape.clone();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(data, shape, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "div")?;
        let data: Vec<f64> = self.tensors[a]
            .data
            .iter()
            .zip(&self.tensors[b].data)
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.tensors[a].shape.clone();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(data, shape, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.tensors[x].data.iter().map(|v| v * c).collect();
        let shape = self.tensors[x].shape.clone();
        let rg = self.tensors[x].requires_grad;
        Ok(self.push(data, shape, Op::Scale(x, c), rg))
    }

    fn rows_cols(&self, x: NodeId, name: &str) -> Result<(usize, usize)> {
        let s = &self.tensors[x].shape;
        if s.len() != 2 {
            return Err(shape_err!("{name} expects a 2-d tensor, got {}", fmt_shape(s)));
        }
        Ok((s[0], s[1]))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x, "add_bias")?;
        if self.tensors[bias].shape != [c] {
            return Err(shape_err!(
                "add_bias: bias {} does not match row width of {}",
                fmt_shape(&self.tensors[bias].shape),
                fmt_shape(&self.tensors[x].shape)
            ));
        }
        let bd = &self.tensors[bias].data;
        let mut data = Vec::with_capacity(r * c);
        for row in self.tensors[x].data.chunks(c) {
            for (v, b) in row.iter().zip(bd.iter()) {
                data.push(v + b);
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(data, vec![r, c], Op::AddBias { x, bias }, rg))
    }

    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x, "scale_rows")?;
        if self.tensors[s].data.len() != r {
            return Err(shape_err!(
                "scale_rows: scale {} does not match row count of {}",
                fmt_shape(&self.tensors[s].shape),
                fmt_shape(&self.tensors[x].shape)
            ));
        }
        let sd = &self.tensors[s].data;
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in self.tensors[x].data.chunks(c).enumerate() {
            for v in row {
                data.push(v * sd[i]);
            }
        }
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(data, vec![r, c], Op::ScaleRows { x, s }, rg))
    }

    pub fn bias_rows(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x, "bias_rows")?;
        if self.tensors[b].data.len() != r {
            return Err(shape_err!(
                "bias_rows: bias {} does not match row count of {}",
                fmt_shape(&self.tensors[b].shape),
                fmt_shape(&self.tensors[x].shape)
            ));
        }
        let bd = &self.tensors[b].data;
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in self.tensors[x].data.chunks(c).enumerate() {
            for v in row {
                data.push(v + bd[i]);
            }
        }
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(data, vec![r, c], Op::BiasRows { x, b }, rg))
    }

    /// Matrix product. Accepts [m,k]*[k,n], [B,m,k]*[k,n] (shared rhs) and
    /// [B,m,k]*[B,k,n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.tensors[a].shape.clone();
        let sb = self.tensors[b].shape.clone();
        let (batch, m, k) = match sa.len() {
            2 => (1, sa[0], sa[1]),
            3 => (sa[0], sa[1], sa[2]),
            _ => return Err(shape_err!("matmul lhs must be 2-d or 3-d, got {}", fmt_shape(&sa))),
        };
        let (rhs_batched, kb, n) = match sb.len() {
            2 => (false, sb[0], sb[1]),
            3 => (true, sb[1], sb[2]),
            _ => return Err(shape_err!("matmul rhs must be 2-d or 3-d, got {}", fmt_shape(&sb))),
        };
        if k != kb || (rhs_batched && sb[0] != batch) {
            return Err(shape_err!(
                "matmul shapes incompatible: {} vs {}",
                fmt_shape(&sa),
                fmt_shape(&sb)
            ));
        }
        let ad = &self.tensors[a].data;
        let bd = &self.tensors[b].data;
        let mut data = vec![0.0; batch * m * n];
        if rhs_batched {
            for bi in 0..batch {
                matmul(
                    &ad[bi * m * k..(bi + 1) * m * k],
                    &bd[bi * k * n..(bi + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut data[bi * m * n..(bi + 1) * m * n],
                );
            }
        } else {
            matmul(ad, bd, batch * m, k, n, &mut data);
        }
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(data, shape, Op::MatMul { a, b, batch, m, k, n, rhs_batched }, rg))
    }

    /// A[m,k] * B[n,k]^T.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.rows_cols(a, "matmul_nt")?;
        let (n, kb) = self.rows_cols(b, "matmul_nt")?;
        if k != kb {
            return Err(shape_err!(
                "matmul_nt shapes incompatible: {} vs {}",
                fmt_shape(&self.tensors[a].shape),
                fmt_shape(&self.tensors[b].shape)
            ));
        }
        let mut data = vec![0.0; m * n];
        matmul_nt(&self.tensors[a].data, &self.tensors[b].data, m, k, n, &mut data);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(data, vec![m, n], Op::MatMulNT { a, b, m, k, n }, rg))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.tensors[x]
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()))
            .collect();
        let shape = self.tensors[x].shape.clone();
        let rg = self.tensors[x].requires_grad;
        Ok(self.push(data, shape, Op::Gelu(x), rg))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.tensors[x].data.iter().map(|v| v.exp()).collect();
        let shape = self.tensors[x].shape.clone();
        let rg = self.tensors[x].requires_grad;
        Ok(self.push(data, shape, Op::Exp(x), rg))
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.tensors[x].data.iter().map(|v| v.ln()).collect();
        let shape = self.tensors[x].shape.clone();
        let rg = self.tensors[x].requires_grad;
        Ok(self.push(data, shape, Op::Ln(x), rg))
    }

    fn axis_split(&self, x: NodeId, axis: usize, name: &str) -> Result<(usize, usize, usize)> {
        let s = &self.tensors[x].shape;
        if axis >= s.len() {
            return Err(shape_err!("{name}: axis {axis} out of range for {}", fmt_shape(s)));
        }
        let outer = s[..axis].iter().product();
        let inner = s[axis + 1..].iter().product();
        Ok((outer, s[axis], inner))
    }

    /// Max-subtracted softmax along `axis`; slices sum to one.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let (outer, asz, inner) = self.axis_split(x, axis, "softmax")?;
        let xd = &self.tensors[x].data;
        let mut data = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * asz * inner + j * inner + i;
                let mut maxv = f64::NEG_INFINITY;
                for j in 0..asz {
                    maxv = maxv.max(xd[at(j)]);
                }
                let mut denom = 0.0;
                for j in 0..asz {
                    let e = (xd[at(j)] - maxv).exp();
                    data[at(j)] = e;
                    denom += e;
                }
                for j in 0..asz {
                    data[at(j)] /= denom;
                }
            }
        }
        let shape = self.tensors[x].shape.clone();
        let rg = self.tensors[x].requires_grad;
        Ok(self.push(data, shape, Op::Softmax { x, axis }, rg))
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let (outer, asz, inner) = self.axis_split(x, axis, "log_softmax")?;
        let xd = &self.tensors[x].data;
        let mut data = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * asz * inner + j * inner + i;
                let mut maxv = f64::NEG_INFINITY;
                for j in 0..asz {
                    maxv = maxv.max(xd[at(j)]);
                }
                let mut denom = 0.0;
                for j in 0..asz {
                    denom += (xd[at(j)] - maxv).exp();
                }
                let lse = maxv + denom.ln();
                for j in 0..asz {
                    data[at(j)] = xd[at(j)] - lse;
                }
            }
        }
        let shape = self.tensors[x].shape.clone();
        let rg = self.tensors[x].requires_grad;
        Ok(self.push(data, shape, Op::LogSoftmax { x, axis }, rg))
    }

    /// Layer normalization over the last dim: gamma * (x - mu) / sqrt(var + eps) + beta.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let s = self.tensors[x].shape.clone();
        let d = *s.last().ok_or_else(|| shape_err!("layer_norm on 0-d tensor"))?;
        if self.tensors[gamma].data.len() != d || self.tensors[beta].data.len() != d {
            return Err(shape_err!(
                "layer_norm: gamma {} / beta {} do not match feature dim {d}",
                fmt_shape(&self.tensors[gamma].shape),
                fmt_shape(&self.tensors[beta].shape)
            ));
        }
        if eps <= 0.0 {
            return Err(shape_err!("layer_norm: eps must be positive, got {eps}"));
        }
        let xd = &self.tensors[x].data;
        let gd = &self.tensors[gamma].data;
        let bd = &self.tensors[beta].data;
        let mut data = vec![0.0; xd.len()];
        for (vi, row) in xd.chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[vi * d + j] = (row[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(data, s, Op::LayerNorm { x, gamma, beta, eps }, rg))
    }

    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x, "repeat_rows")?;
        if r != 1 {
            return Err(shape_err!("repeat_rows expects a single row, got {}", fmt_shape(&self.tensors[x].shape)));
        }
        let row = self.tensors[x].data.clone();
        let mut data = Vec::with_capacity(times * c);
        for _ in 0..times {
            data.extend_from_slice(&row);
        }
        let rg = self.tensors[x].requires_grad;
        Ok(self.push(data, vec![times, c], Op::RepeatRows { x, times }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(shape_err!("concat_rows of zero tensors"));
        }
        let (_, c) = self.rows_cols(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, cc) = self.rows_cols(p, "concat_rows")?;
            if cc != c {
                return Err(shape_err!(
                    "concat_rows: column mismatch {} vs {}",
                    fmt_shape(&self.tensors[parts[0]].shape),
                    fmt_shape(&self.tensors[p].shape)
                ));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(&self.tensors[p].data);
        }
        let rg = self.any_grad(parts);
        Ok(self.push(data, vec![rows, c], Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x, "slice_rows")?;
        if start + len > r {
            return Err(shape_err!("slice_rows {start}..{} out of range for {}", start + len, fmt_shape(&self.tensors[x].shape)));
        }
        let data = self.tensors[x].data[start * c..(start + len) * c].to_vec();
        let rg = self.tensors[x].requires_grad;
        Ok(self.push(data, vec![len, c], Op::SliceRows { x, start, len }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(shape_err!("concat_cols of zero tensors"));
        }
        let (r, _) = self.rows_cols(parts[0], "concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (rr, cc) = self.rows_cols(p, "concat_cols")?;
            if rr != r {
                return Err(shape_err!(
                    "concat_cols: row mismatch {} vs {}",
                    fmt_shape(&self.tensors[parts[0]].shape),
                    fmt_shape(&self.tensors[p].shape)
                ));
            }
            cols += cc;
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let c = self.tensors[p].shape[1];
                data.extend_from_slice(&self.tensors[p].data[i * c..(i + 1) * c]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(data, vec![r, cols], Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.rows_cols(x, "slice_cols")?;
        if start + len > c {
            return Err(shape_err!("slice_cols {start}..{} out of range for {}", start + len, fmt_shape(&self.tensors[x].shape)));
        }
        let xd = &self.tensors[x].data;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let rg = self.tensors[x].requires_grad;
        Ok(self.push(data, vec![r, len], Op::SliceCols { x, start, len }, rg))
    }

    /// Swap axes 0 and 1, e.g. [T,N,D] -> [N,T,D].
    pub fn transpose01(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.tensors[x].shape.clone();
        if s.len() < 2 {
            return Err(shape_err!("transpose01 expects >=2-d tensor, got {}", fmt_shape(&s)));
        }
        let (d0, d1) = (s[0], s[1]);
        let rest: usize = s[2..].iter().product();
        let xd = &self.tensors[x].data;
        let mut data = vec![0.0; xd.len()];
        for i in 0..d0 {
            for j in 0..d1 {
                let src = (i * d1 + j) * rest;
                let dst = (j * d0 + i) * rest;
                data[dst..dst + rest].copy_from_slice(&xd[src..src + rest]);
            }
        }
        let mut shape = s.clone();
        shape.swap(0, 1);
        let rg = self.tensors[x].requires_grad;
        Ok(self.push(data, shape, Op::Transpose01 { x, d0, d1, rest }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if numel(&shape) != self.tensors[x].data.len() {
            return Err(shape_err!(
                "reshape {} -> {}: element count differs",
                fmt_shape(&self.tensors[x].shape),
                fmt_shape(&shape)
            ));
        }
        let data = self.tensors[x].data.clone();
        let rg = self.tensors[x].requires_grad;
        Ok(self.push(data, shape, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.tensors[x].data.iter().sum();
        let rg = self.tensors[x].requires_grad;
        Ok(self.push(vec![s], vec![1], Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.tensors[x].data.len() as f64;
        let s: f64 = self.tensors[x].data.iter().sum();
        let rg = self.tensors[x].requires_grad;
        Ok(self.push(vec![s / n], vec![1], Op::Mean(x), rg))
    }

    /// Split image[C,H,W] into non-overlapping P x P patches, one row per
    /// patch in row-major grid order; within a row, (py, px, channel) order.
    pub fn patchify(&mut self, x: NodeId, p: usize) -> Result<NodeId> {
        let s = self.tensors[x].shape.clone();
        if s.len() != 3 {
            return Err(shape_err!("patchify expects [C,H,W], got {}", fmt_shape(&s)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(shape_err!("patchify: image {}x{} not divisible by patch size {p}", h, w));
        }
        let (gh, gw) = (h / p, w / p);
        let n = gh * gw;
        let row = c * p * p;
        let xd = &self.tensors[x].data;
        let mut data = vec![0.0; n * row];
        for gy in 0..gh {
            for gx in 0..gw {
                let base = (gy * gw + gx) * row;
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            data[base + (py * p + px) * c + ch] =
                                xd[ch * h * w + (gy * p + py) * w + (gx * p + px)];
                        }
                    }
                }
            }
        }
        let rg = self.tensors[x].requires_grad;
        Ok(self.push(data, vec![n, row], Op::Patchify { x, c, h, w, p }, rg))
    }

    /// score[g,t] = scale * <q[g,:], kv[g*T+t,:]>. Materializes exactly G*T scores.
    pub fn score_nt(&mut self, q: NodeId, kv: NodeId, t: usize, scale: f64) -> Result<NodeId> {
        let (g, d) = self.rows_cols(q, "score_nt")?;
        let (gt, dk) = self.rows_cols(kv, "score_nt")?;
        if dk != d || gt != g * t {
            return Err(shape_err!(
                "score_nt: q {} incompatible with kv {} for T={t}",
                fmt_shape(&self.tensors[q].shape),
                fmt_shape(&self.tensors[kv].shape)
            ));
        }
        let qd = &self.tensors[q].data;
        let kd = &self.tensors[kv].data;
        let mut data = vec![0.0; g * t];
        for gi in 0..g {
            let qrow = &qd[gi * d..(gi + 1) * d];
            for ti in 0..t {
                let krow = &kd[(gi * t + ti) * d..(gi * t + ti + 1) * d];
                let mut s = 0.0;
                for (&a, &b) in qrow.iter().zip(krow.iter()) {
                    s += a * b;
                }
                data[gi * t + ti] = s * scale;
            }
        }
        let rg = self.any_grad(&[q, kv]);
        Ok(self.push(data, vec![g, t], Op::ScoreNT { q, kv, t, scale }, rg))
    }

    /// out[g,:] = sum_t attn[g,t] * kv[g*T+t,:].
    pub fn mix_nt(&mut self, attn: NodeId, kv: NodeId) -> Result<NodeId> {
        let (g, t) = self.rows_cols(attn, "mix_nt")?;
        let (gt, d) = self.rows_cols(kv, "mix_nt")?;
        if gt != g * t {
            return Err(shape_err!(
                "mix_nt: attn {} incompatible with kv {}",
                fmt_shape(&self.tensors[attn].shape),
                fmt_shape(&self.tensors[kv].shape)
            ));
        }
        let ad = &self.tensors[attn].data;
        let kd = &self.tensors[kv].data;
        let mut data = vec![0.0; g * d];
        for gi in 0..g {
            let orow = &mut data[gi * d..(gi + 1) * d];
            for ti in 0..t {
                let w = ad[gi * t + ti];
                let krow = &kd[(gi * t + ti) * d..(gi * t + ti + 1) * d];
                for (o, &v) in orow.iter_mut().zip(krow.iter()) {
                    *o += w * v;
                }
            }
        }
        let rg = self.any_grad(&[attn, kv]);
        Ok(self.push(data, vec![g, d], Op::MixNT { attn, kv, t }, rg))
    }

    /// Same-padded stride-1 convolution of x[Cin,H,W] with kernel[Cout,Cin,K,K].
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.tensors[x].shape.clone();
        let sk = self.tensors[kernel].shape.clone();
        if sx.len() != 3 || sk.len() != 4 || sk[2] != sk[3] || sk[2] % 2 == 0 {
            return Err(shape_err!(
                "conv2d expects x [C,H,W] and odd square kernel [Cout,Cin,K,K], got {} and {}",
                fmt_shape(&sx),
                fmt_shape(&sk)
            ));
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sk[0], sk[2]);
        if sk[1] != cin || self.tensors[bias].data.len() != cout {
            return Err(shape_err!(
                "conv2d: kernel {} / bias {} incompatible with input {}",
                fmt_shape(&sk),
                fmt_shape(&self.tensors[bias].shape),
                fmt_shape(&sx)
            ));
        }
        let pad = k / 2;
        let ck = cin * k * k;
        let hw = h * w;
        let xd = &self.tensors[x].data;
        // im2col: one row of taps per output pixel
        let mut cols = vec![0.0; hw * ck];
        for y in 0..h {
            for xx in 0..w {
                let base = (y * w + xx) * ck;
                for ci in 0..cin {
                    for dy in 0..k {
                        let sy = y as isize + dy as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..k {
                            let sxx = xx as isize + dx as isize - pad as isize;
                            if sxx < 0 || sxx >= w as isize {
                                continue;
                            }
                            cols[base + ci * k * k + dy * k + dx] =
                                xd[ci * hw + sy as usize * w + sxx as usize];
                        }
                    }
                }
            }
        }
        let kd = &self.tensors[kernel].data;
        let mut data = vec![0.0; cout * hw];
        matmul_nt(kd, &cols, cout, ck, hw, &mut data);
        let bd = &self.tensors[bias].data;
        for co in 0..cout {
            let row = &mut data[co * hw..(co + 1) * hw];
            let b = bd[co];
            for v in row.iter_mut() {
                *v += b;
            }
        }
        let rg = self.any_grad(&[x, kernel, bias]);
        Ok(self.push(
            data,
            vec![cout, h, w],
            Op::Conv2d { x, kernel, bias, cin, cout, k, h, w, cols },
            rg,
        ))
    }

    /// 2x bilinear upsampling with the align-corners=false convention.
    pub fn bilinear_up2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.tensors[x].shape.clone();
        if s.len() != 3 {
            return Err(shape_err!("bilinear_up2 expects [C,H,W], got {}", fmt_shape(&s)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let ty = up2_taps(h);
        let tx = up2_taps(w);
        let xd = &self.tensors[x].data;
        let mut data = vec![0.0; c * 4 * h * w];
        for ci in 0..c {
            let plane = &xd[ci * h * w..(ci + 1) * h * w];
            let out = &mut data[ci * 4 * h * w..(ci + 1) * 4 * h * w];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    out[oy * 2 * w + ox] = wy0 * (wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1])
                        + wy1 * (wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1]);
                }
            }
        }
        let rg = self.tensors[x].requires_grad;
        Ok(self.push(data, vec![c, 2 * h, 2 * w], Op::BilinearUp2 { x, c, h, w }, rg))
    }

    /// Reverse pass from a scalar node. Gradients accumulate additively into
    /// every tracked ancestor; untracked tensors never get a grad buffer.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.tensors[loss].data.len() != 1 {
            return Err(shape_err!(
                "backward requires a scalar, got {}",
                fmt_shape(&self.tensors[loss].shape)
            ));
        }
        if !self.tensors[loss].requires_grad {
            return Err(shape_err!("backward on an untracked tensor (no graph recorded)"));
        }
        self.tensors[loss].grad = Some(vec![1.0]);
        for i in (0..=loss).rev() {
            if !self.tensors[i].requires_grad || self.tensors[i].grad.is_none() {
                continue;
            }
            self.step_back(i);
        }
        Ok(())
    }

    /// Zero every allocated gradient buffer (leaves allocation in place).
    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn step_back(&mut self, i: NodeId) {
        let (head, tail) = self.tensors.split_at_mut(i);
        let node = &tail[0];
        let g = node.grad.as_deref().expect("grad present");
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(&mut head[*a], g);
                accumulate(&mut head[*b], g);
            }
            Op::Sub(a, b) => {
                accumulate(&mut head[*a], g);
                accumulate_scaled(&mut head[*b], g, -1.0);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if head[a].requires_grad {
                    let da: Vec<f64> = g.iter().zip(&head[b].data).map(|(gv, bv)| gv * bv).collect();
                    accumulate(&mut head[a], &da);
                }
                if head[b].requires_grad {
                    let db: Vec<f64> = g.iter().zip(&head[a].data).map(|(gv, av)| gv * av).collect();
                    accumulate(&mut head[b], &db);
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                if head[a].requires_grad {
                    let da: Vec<f64> = g.iter().zip(&head[b].data).map(|(gv, bv)| gv / bv).collect();
                    accumulate(&mut head[a], &da);
                }
                if head[b].requires_grad {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(head[a].data.iter().zip(&head[b].data))
                        .map(|(gv, (av, bv))| -gv * av / (bv * bv))
                        .collect();
                    accumulate(&mut head[b], &db);
                }
            }
            Op::Scale(x, c) => {
                accumulate_scaled(&mut head[*x], g, *c);
            }
            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let c = head[bias].data.len();
                accumulate(&mut head[x], g);
                if head[bias].requires_grad {
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut head[bias], &db);
                }
            }
            Op::ScaleRows { x, s } => {
                let (x, s) = (*x, *s);
                let r = head[s].data.len();
                let c = head[x].data.len() / r;
                if head[x].requires_grad {
                    let sd = &head[s].data;
                    let mut dx = vec![0.0; r * c];
                    for i2 in 0..r {
                        for j in 0..c {
                            dx[i2 * c + j] = g[i2 * c + j] * sd[i2];
                        }
                    }
                    accumulate(&mut head[x], &dx);
                }
                if head[s].requires_grad {
                    let xd = &head[x].data;
                    let mut ds = vec![0.0; r];
                    for i2 in 0..r {
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += g[i2 * c + j] * xd[i2 * c + j];
                        }
                        ds[i2] = acc;
                    }
                    accumulate(&mut head[s], &ds);
                }
            }
            Op::BiasRows { x, b } => {
                let (x, b) = (*x, *b);
                let r = head[b].data.len();
                let c = head[x].data.len() / r;
                accumulate(&mut head[x], g);
                if head[b].requires_grad {
                    let mut db = vec![0.0; r];
                    for i2 in 0..r {
                        db[i2] = g[i2 * c..(i2 + 1) * c].iter().sum();
                    }
                    accumulate(&mut head[b], &db);
                }
            }
            Op::MatMul { a, b, batch, m, k, n, rhs_batched } => {
                let (a, b) = (*a, *b);
                let (batch, m, k, n, rhs_batched) = (*batch, *m, *k, *n, *rhs_batched);
                if head[a].requires_grad {
                    let bd = &head[b].data;
                    let mut da = vec![0.0; batch * m * k];
                    if rhs_batched {
                        for bi in 0..batch {
                            matmul_nt(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &bd[bi * k * n..(bi + 1) * k * n],
                                m,
                                n,
                                k,
                                &mut da[bi * m * k..(bi + 1) * m * k],
                            );
                        }
                    } else {
                        // dA = dC * B^T; B stored [k,n] so rows of B have length n
                        matmul_nt(g, bd, batch * m, n, k, &mut da);
                    }
                    accumulate(&mut head[a], &da);
                }
                if head[b].requires_grad {
                    let ad = &head[a].data;
                    let rows = batch * m;
                    if rhs_batched {
                        let mut db = vec![0.0; batch * k * n];
                        for bi in 0..batch {
                            let mut at = vec![0.0; k * m];
                            transpose_into(&ad[bi * m * k..(bi + 1) * m * k], m, k, &mut at);
                            matmul(
                                &at,
                                &g[bi * m * n..(bi + 1) * m * n],
                                k,
                                m,
                                n,
                                &mut db[bi * k * n..(bi + 1) * k * n],
                            );
                        }
                        accumulate(&mut head[b], &db);
                    } else {
                        let mut at = vec![0.0; k * rows];
                        transpose_into(ad, rows, k, &mut at);
                        let mut db = vec![0.0; k * n];
                        matmul(&at, g, k, rows, n, &mut db);
                        accumulate(&mut head[b], &db);
                    }
                }
            }
            Op::MatMulNT { a, b, m, k, n } => {
                let (a, b) = (*a, *b);
                let (m, k, n) = (*m, *k, *n);
                if head[a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul(g, &head[b].data, m, n, k, &mut da);
                    accumulate(&mut head[a], &da);
                }
                if head[b].requires_grad {
                    let mut gt = vec![0.0; n * m];
                    transpose_into(g, m, n, &mut gt);
                    let mut db = vec![0.0; n * k];
                    matmul(&gt, &head[a].data, n, m, k, &mut db);
                    accumulate(&mut head[b], &db);
                }
            }
            Op::Gelu(x) => {
                let x = *x;
                if head[x].requires_grad {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&head[x].data)
                        .map(|(gv, &v)| {
                            let inner = GELU_C * (v + GELU_K * v * v * v);
                            let t = inner.tanh();
                            let sech2 = 1.0 - t * t;
                            gv * (0.5 * (1.0 + t) + 0.5 * v * sech2 * GELU_C * (1.0 + 3.0 * GELU_K * v * v))
                        })
                        .collect();
                    accumulate(&mut head[x], &dx);
                }
            }
            Op::Exp(x) => {
                let dx: Vec<f64> = g.iter().zip(&node.data).map(|(gv, ov)| gv * ov).collect();
                accumulate(&mut head[*x], &dx);
            }
            Op::Ln(x) => {
                let x = *x;
                if head[x].requires_grad {
                    let dx: Vec<f64> = g.iter().zip(&head[x].data).map(|(gv, xv)| gv / xv).collect();
                    accumulate(&mut head[x], &dx);
                }
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                if head[x].requires_grad {
                    let s = &node.shape;
                    let outer: usize = s[..axis].iter().product();
                    let asz = s[axis];
                    let inner: usize = s[axis + 1..].iter().product();
                    let out = &node.data;
                    let mut dx = vec![0.0; out.len()];
                    for o in 0..outer {
                        for i2 in 0..inner {
                            let at = |j: usize| o * asz * inner + j * inner + i2;
                            let mut dot = 0.0;
                            for j in 0..asz {
                                dot += g[at(j)] * out[at(j)];
                            }
                            for j in 0..asz {
                                dx[at(j)] = out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    accumulate(&mut head[x], &dx);
                }
            }
            Op::LogSoftmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                if head[x].requires_grad {
                    let s = &node.shape;
                    let outer: usize = s[..axis].iter().product();
                    let asz = s[axis];
                    let inner: usize = s[axis + 1..].iter().product();
                    let out = &node.data;
                    let mut dx = vec![0.0; out.len()];
                    for o in 0..outer {
                        for i2 in 0..inner {
                            let at = |j: usize| o * asz * inner + j * inner + i2;
                            let mut gsum = 0.0;
                            for j in 0..asz {
                                gsum += g[at(j)];
                            }
                            for j in 0..asz {
                                dx[at(j)] = g[at(j)] - out[at(j)].exp() * gsum;
                            }
                        }
                    }
                    accumulate(&mut head[x], &dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let d = head[gamma].data.len();
                let (dx, dgamma, dbeta) = {
                    let xd = &head[x].data;
                    let gd = &head[gamma].data;
                    let rows = xd.len() / d;
                    let mut dx = vec![0.0; xd.len()];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    let df = d as f64;
                    for vi in 0..rows {
                        let row = &xd[vi * d..(vi + 1) * d];
                        let grow = &g[vi * d..(vi + 1) * d];
                        let mean = row.iter().sum::<f64>() / df;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut dxh_sum = 0.0;
                        let mut dxh_xh_sum = 0.0;
                        for j in 0..d {
                            let xh = (row[j] - mean) * inv;
                            dgamma[j] += grow[j] * xh;
                            dbeta[j] += grow[j];
                            let dxh = grow[j] * gd[j];
                            dxh_sum += dxh;
                            dxh_xh_sum += dxh * xh;
                        }
                        for j in 0..d {
                            let xh = (row[j] - mean) * inv;
                            let dxh = grow[j] * gd[j];
                            dx[vi * d + j] = inv / df * (df * dxh - dxh_sum - xh * dxh_xh_sum);
                        }
                    }
                    (dx, dgamma, dbeta)
                };
                accumulate(&mut head[x], &dx);
                accumulate(&mut head[gamma], &dgamma);
                accumulate(&mut head[beta], &dbeta);
            }
            Op::RepeatRows { x, times } => {
                let (x, times) = (*x, *times);
                if head[x].requires_grad {
                    let c = head[x].data.len();
                    let mut dx = vec![0.0; c];
                    for r in 0..times {
                        for j in 0..c {
                            dx[j] += g[r * c + j];
                        }
                    }
                    accumulate(&mut head[x], &dx);
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = head[p].data.len();
                    if head[p].requires_grad {
                        let dp = g[offset..offset + len].to_vec();
                        accumulate(&mut head[p], &dp);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start, len: _ } => {
                let (x, start) = (*x, *start);
                if head[x].requires_grad {
                    let c = head[x].shape[1];
                    let mut dx = vec![0.0; head[x].data.len()];
                    dx[start * c..start * c + g.len()].copy_from_slice(g);
                    accumulate(&mut head[x], &dx);
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let r = node.shape[0];
                let total: usize = node.shape[1];
                let mut offset = 0;
                for p in parts {
                    let c = head[p].shape[1];
                    if head[p].requires_grad {
                        let mut dp = vec![0.0; r * c];
                        for i2 in 0..r {
                            dp[i2 * c..(i2 + 1) * c]
                                .copy_from_slice(&g[i2 * total + offset..i2 * total + offset + c]);
                        }
                        accumulate(&mut head[p], &dp);
                    }
                    offset += c;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                if head[x].requires_grad {
                    let c = head[x].shape[1];
                    let r = head[x].shape[0];
                    let mut dx = vec![0.0; head[x].data.len()];
                    for i2 in 0..r {
                        dx[i2 * c + start..i2 * c + start + len]
                            .copy_from_slice(&g[i2 * len..(i2 + 1) * len]);
                    }
                    accumulate(&mut head[x], &dx);
                }
            }
            Op::Transpose01 { x, d0, d1, rest } => {
                let (x, d0, d1, rest) = (*x, *d0, *d1, *rest);
                if head[x].requires_grad {
                    let mut dx = vec![0.0; head[x].data.len()];
                    for i2 in 0..d0 {
                        for j in 0..d1 {
                            let src = (j * d0 + i2) * rest;
                            let dst = (i2 * d1 + j) * rest;
                            dx[dst..dst + rest].copy_from_slice(&g[src..src + rest]);
                        }
                    }
                    accumulate(&mut head[x], &dx);
                }
            }
            Op::Reshape(x) => {
                accumulate(&mut head[*x], g);
            }
            Op::Sum(x) => {
                let x = *x;
                if head[x].requires_grad {
                    let dx = vec![g[0]; head[x].data.len()];
                    accumulate(&mut head[x], &dx);
                }
            }
            Op::Mean(x) => {
                let x = *x;
                if head[x].requires_grad {
                    let n = head[x].data.len();
                    let dx = vec![g[0] / n as f64; n];
                    accumulate(&mut head[x], &dx);
                }
            }
            Op::Patchify { x, c, h, w, p } => {
                let (x, c, h, w, p) = (*x, *c, *h, *w, *p);
                if head[x].requires_grad {
                    let (gh, gw) = (h / p, w / p);
                    let row = c * p * p;
                    let mut dx = vec![0.0; c * h * w];
                    for gy in 0..gh {
                        for gx in 0..gw {
                            let base = (gy * gw + gx) * row;
                            for py in 0..p {
                                for px in 0..p {
                                    for ch in 0..c {
                                        dx[ch * h * w + (gy * p + py) * w + (gx * p + px)] +=
                                            g[base + (py * p + px) * c + ch];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut head[x], &dx);
                }
            }
            Op::ScoreNT { q, kv, t, scale } => {
                let (q, kv, t, scale) = (*q, *kv, *t, *scale);
                let d = head[q].shape[1];
                let gcount = head[q].shape[0];
                if head[q].requires_grad {
                    let kd = &head[kv].data;
                    let mut dq = vec![0.0; gcount * d];
                    for gi in 0..gcount {
                        let drow = &mut dq[gi * d..(gi + 1) * d];
                        for ti in 0..t {
                            let gv = g[gi * t + ti] * scale;
                            let krow = &kd[(gi * t + ti) * d..(gi * t + ti + 1) * d];
                            for (o, &kv2) in drow.iter_mut().zip(krow.iter()) {
                                *o += gv * kv2;
                            }
                        }
                    }
                    accumulate(&mut head[q], &dq);
                }
                if head[kv].requires_grad {
                    let qd = &head[q].data;
                    let mut dk = vec![0.0; gcount * t * d];
                    for gi in 0..gcount {
                        let qrow = &qd[gi * d..(gi + 1) * d];
                        for ti in 0..t {
                            let gv = g[gi * t + ti] * scale;
                            let drow = &mut dk[(gi * t + ti) * d..(gi * t + ti + 1) * d];
                            for (o, &qv) in drow.iter_mut().zip(qrow.iter()) {
                                *o += gv * qv;
                            }
                        }
                    }
                    accumulate(&mut head[kv], &dk);
                }
            }
            Op::MixNT { attn, kv, t } => {
                let (attn, kv, t) = (*attn, *kv, *t);
                let gcount = head[attn].shape[0];
                let d = head[kv].shape[1];
                if head[attn].requires_grad {
                    let kd = &head[kv].data;
                    let mut da = vec![0.0; gcount * t];
                    for gi in 0..gcount {
                        let grow = &g[gi * d..(gi + 1) * d];
                        for ti in 0..t {
                            let krow = &kd[(gi * t + ti) * d..(gi * t + ti + 1) * d];
                            let mut s = 0.0;
                            for (&gv, &kv2) in grow.iter().zip(krow.iter()) {
                                s += gv * kv2;
                            }
                            da[gi * t + ti] = s;
                        }
                    }
                    accumulate(&mut head[attn], &da);
                }
                if head[kv].requires_grad {
                    let ad = &head[attn].data;
                    let mut dk = vec![0.0; gcount * t * d];
                    for gi in 0..gcount {
                        let grow = &g[gi * d..(gi + 1) * d];
                        for ti in 0..t {
                            let w2 = ad[gi * t + ti];
                            let drow = &mut dk[(gi * t + ti) * d..(gi * t + ti + 1) * d];
                            for (o, &gv) in drow.iter_mut().zip(grow.iter()) {
                                *o += w2 * gv;
                            }
                        }
                    }
                    accumulate(&mut head[kv], &dk);
                }
            }
            Op::Conv2d { x, kernel, bias, cin, cout, k, h, w, cols } => {
                let (x, kernel, bias) = (*x, *kernel, *bias);
                let (cin, cout, k, h, w) = (*cin, *cout, *k, *h, *w);
                let ck = cin * k * k;
                let hw = h * w;
                let pad = k / 2;
                if head[kernel].requires_grad {
                    let mut dk = vec![0.0; cout * ck];
                    matmul(g, cols, cout, hw, ck, &mut dk);
                    accumulate(&mut head[kernel], &dk);
                }
                if head[bias].requires_grad {
                    let mut db = vec![0.0; cout];
                    for co in 0..cout {
                        db[co] = g[co * hw..(co + 1) * hw].iter().sum();
                    }
                    accumulate(&mut head[bias], &db);
                }
                if head[x].requires_grad {
                    let kd = &head[kernel].data;
                    let mut gt = vec![0.0; hw * cout];
                    transpose_into(g, cout, hw, &mut gt);
                    let mut dcols = vec![0.0; hw * ck];
                    matmul(&gt, kd, hw, cout, ck, &mut dcols);
                    let mut dx = vec![0.0; cin * hw];
                    for y in 0..h {
                        for xx in 0..w {
                            let base = (y * w + xx) * ck;
                            for ci in 0..cin {
                                for dy in 0..k {
                                    let sy = y as isize + dy as isize - pad as isize;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for dx2 in 0..k {
                                        let sxx = xx as isize + dx2 as isize - pad as isize;
                                        if sxx < 0 || sxx >= w as isize {
                                            continue;
                                        }
                                        dx[ci * hw + sy as usize * w + sxx as usize] +=
                                            dcols[base + ci * k * k + dy * k + dx2];
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut head[x], &dx);
                }
            }
            Op::BilinearUp2 { x, c, h, w } => {
                let (x, c, h, w) = (*x, *c, *h, *w);
                if head[x].requires_grad {
                    let ty = up2_taps(h);
                    let tx = up2_taps(w);
                    let mut dx = vec![0.0; c * h * w];
                    for ci in 0..c {
                        let gplane = &g[ci * 4 * h * w..(ci + 1) * 4 * h * w];
                        let dplane = &mut dx[ci * h * w..(ci + 1) * h * w];
                        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                                let gv = gplane[oy * 2 * w + ox];
                                dplane[y0 * w + x0] += gv * wy0 * wx0;
                                dplane[y0 * w + x1] += gv * wy0 * wx1;
                                dplane[y1 * w + x0] += gv * wy1 * wx0;
                                dplane[y1 * w + x1] += gv * wy1 * wx1;
                            }
                        }
                    }
                    accumulate(&mut head[x], &dx);
                }
            }
        }
    }
}

/// Source taps and weights for one output axis of a 2x upsample.
fn up2_taps(size: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * size)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let i0 = src.floor();
            let w1 = src - i0;
            let a = (i0 as isize).clamp(0, size as isize - 1) as usize;
            let b = (i0 as isize + 1).clamp(0, size as isize - 1) as usize;
            (a, b, 1.0 - w1, w1)
        })
        .collect()
}

fn accumulate(t: &mut Tensor, src: &[f64]) {
    if !t.requires_grad {
        return;
    }
    let g = t.grad.get_or_insert_with(|| vec![0.0; t.data.len()]);
    for (a, b) in g.iter_mut().zip(src) {
        *a += b;
    }
}

fn accumulate_scaled(t: &mut Tensor, src: &[f64], c: f64) {
    if !t.requires_grad {
        return;
    }
    let g = t.grad.get_or_insert_with(|| vec![0.0; t.data.len()]);
    for (a, b) in g.iter_mut().zip(src) {
        *a += b * c;
    }
}

fn transpose_into(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}
