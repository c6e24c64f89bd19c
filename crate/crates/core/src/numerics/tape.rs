//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node in
//! construction order, which is a topological order by construction. The
//! backward pass walks the node list in exact reverse, propagating adjoints
//! with per-op gradient rules, then accumulates (`+=`) into the persistent
//! gradient of every `requires_grad` leaf. The tape is rebuilt per forward
//! pass (define-by-run), so iterative stages such as routing unroll into the
//! graph and gradients flow through every iteration.
//!
//! Broadcasting is deliberately narrow: scalar-times-tensor, bias-vector
//! addition over leading axes, and explicit per-row scaling. Every other op
//! requires exact shape agreement, which keeps the gradient rules small and
//! auditable.

use crate::error::{shape_string, Error, Result};

use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    AddBias { x: usize, bias: usize },
    AddScalar { x: usize },
    MulScalar { x: usize, c: f64 },
    ScaleVar { x: usize, s: usize },
    Tanh { x: usize },
    Relu { x: usize },
    Ln { x: usize },
    Sqrt { x: usize },
    SumAll { x: usize },
    SumLast { x: usize },
    Softmax { x: usize, axis: usize },
    ScaleLast { x: usize, f: usize },
    Stack1 { parts: Vec<usize> },
    Index1 { x: usize, k: usize },
    ConcatLast { parts: Vec<usize> },
    SliceLast { x: usize, offset: usize, len: usize },
    PickPerRow { x: usize, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Leaves only: whether gradients should be retained for this node.
    requires_grad: bool,
    /// Leaves only: persistent gradient accumulated across backward calls.
    grad: Option<Vec<f64>>,
}

/// One recorded forward pass plus its gradient machinery.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// (parameter id, leaf node) pairs bound via [`Tape::param`].
    bindings: Vec<(ParamId, usize)>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Guard divisor used in the sqrt gradient so zero-norm vectors produce a
/// zero (not NaN) gradient once multiplied by the zero chain factor.
const SQRT_GRAD_GUARD: f64 = 1e-12;

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

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let var = self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec());
        self.nodes[var.0].requires_grad = t.requires_grad();
        var
    }

    /// Bind a parameter as a leaf and remember the binding for
    /// [`Tape::add_grads_to`].
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let var = self.leaf(params.get(id));
        self.nodes[var.0].requires_grad = true;
        self.bindings.push((id, var.0));
        var
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dimension(
                "Tape::constant",
                shape_string(&shape),
                format!("data length {}", data.len()),
            ));
        }
        Ok(self.push(Op::Leaf, shape, data))
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, vec![1], vec![value])
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn value_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("tape node shape/data agree")
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[v.0];
        if node.data.len() != 1 {
            return Err(Error::contract(
                "Tape::scalar_value",
                format!("expected scalar, found shape {}", shape_string(&node.shape)),
            ));
        }
        Ok(node.data[0])
    }

    /// Persistent gradient of a `requires_grad` leaf; `None` for detached
    /// leaves and interior nodes.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    // ── elementwise and linear ops ──────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dimension(
                "matmul",
                shape_string(sa),
                shape_string(sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        Ok(self.push(Op::MatMul { a: a.0, b: b.0 }, vec![m, n], data))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::dimension(op, shape_string(sa), shape_string(sb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, shape, data))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Sub { a: a.0, b: b.0 }, shape, data))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, shape, data))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Div { a: a.0, b: b.0 }, shape, data))
    }

    /// `x + bias`, broadcasting a rank-1 bias over all leading axes of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (&self.nodes[x.0].shape, &self.nodes[b_idx(bias)].shape);
        if sb.len() != 1 || sx.is_empty() || *sx.last().unwrap() != sb[0] {
            return Err(Error::dimension(
                "add_bias",
                shape_string(sx),
                shape_string(sb),
            ));
        }
        let width = sb[0];
        let bias_data = &self.nodes[bias.0].data;
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias_data[i % width])
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(
            Op::AddBias {
                x: x.0,
                bias: bias.0,
            },
            shape,
            data,
        ))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v + c).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::AddScalar { x: x.0 }, shape, data))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::MulScalar { x: x.0, c }, shape, data))
    }

    /// Multiply a tensor by a scalar tape variable (a learnable weight).
    pub fn scale_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(Error::contract(
                "scale_var",
                format!(
                    "scale must be a scalar, found shape {}",
                    shape_string(&self.nodes[s.0].shape)
                ),
            ));
        }
        let sv = self.nodes[s.0].data[0];
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * sv).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::ScaleVar { x: x.0, s: s.0 }, shape, data))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Tanh { x: x.0 }, shape, data))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Relu { x: x.0 }, shape, data))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.ln()).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Ln { x: x.0 }, shape, data))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.sqrt()).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Sqrt { x: x.0 }, shape, data))
    }

    // ── reductions ──────────────────────────────────────────────────────

    /// Sum of all elements; output shape `[1]`.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.nodes[x.0].data.iter().sum();
        Ok(self.push(Op::SumAll { x: x.0 }, vec![1], vec![total]))
    }

    /// Sum over the last axis, keeping it as a length-1 dimension.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.is_empty() {
            return Err(Error::contract("sum_last", "rank must be >= 1"));
        }
        let width = *shape.last().unwrap();
        let rows = self.nodes[x.0].data.len() / width;
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            data[r] = self.nodes[x.0].data[r * width..(r + 1) * width]
                .iter()
                .sum();
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = 1;
        Ok(self.push(Op::SumLast { x: x.0 }, out_shape, data))
    }

    /// Numerically stable softmax along `axis`. Errors on NaN input.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::contract(
                "softmax",
                format!(
                    "axis {axis} out of range for shape {}",
                    shape_string(&shape)
                ),
            ));
        }
        if self.nodes[x.0].data.iter().any(|v| v.is_nan()) {
            return Err(Error::numeric("softmax", "NaN in input"));
        }
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * axis_len * inner + j * inner + i;
                let mut max_val = f64::NEG_INFINITY;
                for j in 0..axis_len {
                    max_val = max_val.max(src[at(j)]);
                }
                let mut denom = 0.0;
                for j in 0..axis_len {
                    let e = (src[at(j)] - max_val).exp();
                    data[at(j)] = e;
                    denom += e;
                }
                for j in 0..axis_len {
                    data[at(j)] /= denom;
                }
            }
        }
        Ok(self.push(Op::Softmax { x: x.0, axis }, shape, data))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let axis = self.nodes[x.0].shape.len() - 1;
        self.softmax(x, axis)
    }

    // ── structural ops ──────────────────────────────────────────────────

    /// Scale each trailing vector of `x` (`[..., d]`) by the matching entry
    /// of `f` (`[..., 1]`).
    pub fn scale_last(&mut self, x: Var, f: Var) -> Result<Var> {
        let (sx, sf) = (&self.nodes[x.0].shape, &self.nodes[f.0].shape);
        let ok = sf.len() == sx.len()
            && *sf.last().unwrap_or(&0) == 1
            && sf[..sf.len() - 1] == sx[..sx.len() - 1];
        if !ok {
            return Err(Error::dimension(
                "scale_last",
                shape_string(sx),
                shape_string(sf),
            ));
        }
        let width = *sx.last().unwrap();
        let fd = &self.nodes[f.0].data;
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * fd[i / width])
            .collect();
        let shape = sx.clone();
        Ok(self.push(Op::ScaleLast { x: x.0, f: f.0 }, shape, data))
    }

    /// Stack rank-2 parts `[B, d]` into `[B, n, d]` along a new middle axis.
    pub fn stack_caps(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("stack_caps", "no parts"));
        }
        let first = self.nodes[parts[0].0].shape.clone();
        if first.len() != 2 {
            return Err(Error::contract("stack_caps", "parts must be rank 2"));
        }
        for p in parts {
            if self.nodes[p.0].shape != first {
                return Err(Error::dimension(
                    "stack_caps",
                    shape_string(&first),
                    shape_string(&self.nodes[p.0].shape),
                ));
            }
        }
        let (batch, d) = (first[0], first[1]);
        let n = parts.len();
        let mut data = vec![0.0; batch * n * d];
        for (k, p) in parts.iter().enumerate() {
            let src = &self.nodes[p.0].data;
            for b in 0..batch {
                data[(b * n + k) * d..(b * n + k + 1) * d]
                    .copy_from_slice(&src[b * d..(b + 1) * d]);
            }
        }
        Ok(self.push(
            Op::Stack1 {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            vec![batch, n, d],
            data,
        ))
    }

    /// Select capsule `k` from `[B, n, d]`, yielding `[B, d]`.
    pub fn index_cap(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 3 || k >= shape[1] {
            return Err(Error::contract(
                "index_cap",
                format!("index {k} invalid for shape {}", shape_string(&shape)),
            ));
        }
        let (batch, n, d) = (shape[0], shape[1], shape[2]);
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; batch * d];
        for b in 0..batch {
            data[b * d..(b + 1) * d].copy_from_slice(&src[(b * n + k) * d..(b * n + k + 1) * d]);
        }
        Ok(self.push(Op::Index1 { x: x.0, k }, vec![batch, d], data))
    }

    /// Concatenate rank-2 parts `[B, d_i]` along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_last", "no parts"));
        }
        let batch = self.nodes[parts[0].0].shape[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != 2 || s[0] != batch {
                return Err(Error::dimension(
                    "concat_last",
                    format!("[{batch}, _]"),
                    shape_string(s),
                ));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; batch * total];
        let mut offset = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let src = &self.nodes[p.0].data;
            for b in 0..batch {
                data[b * total + offset..b * total + offset + w]
                    .copy_from_slice(&src[b * w..(b + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(
            Op::ConcatLast {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            vec![batch, total],
            data,
        ))
    }

    /// Columns `offset..offset+len` of a rank-2 tensor.
    pub fn slice_last(&mut self, x: Var, offset: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 || offset + len > shape[1] || len == 0 {
            return Err(Error::contract(
                "slice_last",
                format!(
                    "slice {offset}..{} invalid for shape {}",
                    offset + len,
                    shape_string(&shape)
                ),
            ));
        }
        let (batch, width) = (shape[0], shape[1]);
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; batch * len];
        for b in 0..batch {
            data[b * len..(b + 1) * len]
                .copy_from_slice(&src[b * width + offset..b * width + offset + len]);
        }
        Ok(self.push(
            Op::SliceLast {
                x: x.0,
                offset,
                len,
            },
            vec![batch, len],
            data,
        ))
    }

    /// Per-row gather: `out[b, 0] = x[b, idx[b]]` for `x: [B, C]`.
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 || idx.len() != shape[0] {
            return Err(Error::contract(
                "pick_per_row",
                format!("{} indices for shape {}", idx.len(), shape_string(&shape)),
            ));
        }
        let (batch, width) = (shape[0], shape[1]);
        let mut data = vec![0.0; batch];
        for (b, &j) in idx.iter().enumerate() {
            if j >= width {
                return Err(Error::contract(
                    "pick_per_row",
                    format!("index {j} out of range for {width} columns at row {b}"),
                ));
            }
            data[b] = self.nodes[x.0].data[b * width + j];
        }
        Ok(self.push(
            Op::PickPerRow {
                x: x.0,
                idx: idx.to_vec(),
            },
            vec![batch, 1],
            data,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Interior adjoints are transient;
    /// every `requires_grad` leaf accumulates into its persistent gradient,
    /// so running backward twice without zeroing doubles leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!(
                    "loss must be scalar, found shape {}",
                    shape_string(&self.nodes[loss.0].shape)
                ),
            ));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|nd| vec![0.0; nd.data.len()])
            .collect();
        adj[loss.0][0] = 1.0;

        for i in (0..n).rev() {
            if adj[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            // Take this node's adjoint out so inputs can be borrowed freely.
            let g = std::mem::take(&mut adj[i]);
            match &self.nodes[i].op {
                Op::Leaf => {
                    adj[i] = g;
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let nn = self.nodes[b].shape[1];
                    let bt = transpose_raw(&self.nodes[b].data, k, nn);
                    let da = matmul_raw(&g, &bt, m, nn, k);
                    let at = transpose_raw(&self.nodes[a].data, m, k);
                    let db = matmul_raw(&at, &g, k, m, nn);
                    axpy(&mut adj[a], &da);
                    axpy(&mut adj[b], &db);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    axpy(&mut adj[a], &g);
                    axpy(&mut adj[b], &g);
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    axpy(&mut adj[a], &g);
                    for (dst, gv) in adj[b].iter_mut().zip(&g) {
                        *dst -= gv;
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    for idx in 0..g.len() {
                        adj[a][idx] += g[idx] * self.nodes[b].data[idx];
                    }
                    for idx in 0..g.len() {
                        adj[b][idx] += g[idx] * self.nodes[a].data[idx];
                    }
                }
                Op::Div { a, b } => {
                    let (a, b) = (*a, *b);
                    for idx in 0..g.len() {
                        let bv = self.nodes[b].data[idx];
                        adj[a][idx] += g[idx] / bv;
                        adj[b][idx] -= g[idx] * self.nodes[a].data[idx] / (bv * bv);
                    }
                }
                Op::AddBias { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    let width = self.nodes[bias].data.len();
                    axpy(&mut adj[x], &g);
                    for (idx, gv) in g.iter().enumerate() {
                        adj[bias][idx % width] += gv;
                    }
                }
                Op::AddScalar { x } => {
                    let x = *x;
                    axpy(&mut adj[x], &g);
                }
                Op::MulScalar { x, c } => {
                    let (x, c) = (*x, *c);
                    for (dst, gv) in adj[x].iter_mut().zip(&g) {
                        *dst += gv * c;
                    }
                }
                Op::ScaleVar { x, s } => {
                    let (x, s) = (*x, *s);
                    let sv = self.nodes[s].data[0];
                    let mut ds = 0.0;
                    for idx in 0..g.len() {
                        adj[x][idx] += g[idx] * sv;
                        ds += g[idx] * self.nodes[x].data[idx];
                    }
                    adj[s][0] += ds;
                }
                Op::Tanh { x } => {
                    let x = *x;
                    for idx in 0..g.len() {
                        let y = self.nodes[i].data[idx];
                        adj[x][idx] += g[idx] * (1.0 - y * y);
                    }
                }
                Op::Relu { x } => {
                    let x = *x;
                    for idx in 0..g.len() {
                        if self.nodes[x].data[idx] > 0.0 {
                            adj[x][idx] += g[idx];
                        }
                    }
                }
                Op::Ln { x } => {
                    let x = *x;
                    for idx in 0..g.len() {
                        adj[x][idx] += g[idx] / self.nodes[x].data[idx];
                    }
                }
                Op::Sqrt { x } => {
                    let x = *x;
                    for idx in 0..g.len() {
                        let y = self.nodes[i].data[idx].max(SQRT_GRAD_GUARD);
                        adj[x][idx] += g[idx] * 0.5 / y;
                    }
                }
                Op::SumAll { x } => {
                    let x = *x;
                    let gv = g[0];
                    for dst in adj[x].iter_mut() {
                        *dst += gv;
                    }
                }
                Op::SumLast { x } => {
                    let x = *x;
                    let width = *self.nodes[x].shape.last().unwrap();
                    for (idx, dst) in adj[x].iter_mut().enumerate() {
                        *dst += g[idx / width];
                    }
                }
                Op::Softmax { x, axis } => {
                    let (x, axis) = (*x, *axis);
                    let shape = &self.nodes[i].shape;
                    let axis_len = shape[axis];
                    let outer: usize = shape[..axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let y = &self.nodes[i].data;
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| o * axis_len * inner + j * inner + ii;
                            let mut dot = 0.0;
                            for j in 0..axis_len {
                                dot += g[at(j)] * y[at(j)];
                            }
                            for j in 0..axis_len {
                                adj[x][at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
                Op::ScaleLast { x, f } => {
                    let (x, f) = (*x, *f);
                    let width = *self.nodes[x].shape.last().unwrap();
                    for idx in 0..g.len() {
                        adj[x][idx] += g[idx] * self.nodes[f].data[idx / width];
                        adj[f][idx / width] += g[idx] * self.nodes[x].data[idx];
                    }
                }
                Op::Stack1 { parts } => {
                    let parts = parts.clone();
                    let shape = &self.nodes[i].shape;
                    let (batch, nc, d) = (shape[0], shape[1], shape[2]);
                    for (k, p) in parts.iter().enumerate() {
                        for b in 0..batch {
                            for j in 0..d {
                                adj[*p][b * d + j] += g[(b * nc + k) * d + j];
                            }
                        }
                    }
                }
                Op::Index1 { x, k } => {
                    let (x, k) = (*x, *k);
                    let shape = &self.nodes[x].shape;
                    let (batch, nc, d) = (shape[0], shape[1], shape[2]);
                    let _ = batch;
                    for (idx, gv) in g.iter().enumerate() {
                        let (b, j) = (idx / d, idx % d);
                        adj[x][(b * nc + k) * d + j] += gv;
                    }
                }
                Op::ConcatLast { parts } => {
                    let parts = parts.clone();
                    let total = self.nodes[i].shape[1];
                    let batch = self.nodes[i].shape[0];
                    let mut offset = 0;
                    for p in &parts {
                        let w = self.nodes[*p].shape[1];
                        for b in 0..batch {
                            for j in 0..w {
                                adj[*p][b * w + j] += g[b * total + offset + j];
                            }
                        }
                        offset += w;
                    }
                }
                Op::SliceLast { x, offset, len } => {
                    let (x, offset, len) = (*x, *offset, *len);
                    let width = self.nodes[x].shape[1];
                    for (idx, gv) in g.iter().enumerate() {
                        let (b, j) = (idx / len, idx % len);
                        adj[x][b * width + offset + j] += gv;
                    }
                }
                Op::PickPerRow { x, idx } => {
                    let (x, idx) = (*x, idx.clone());
                    let width = self.nodes[x].shape[1];
                    for (b, &j) in idx.iter().enumerate() {
                        adj[x][b * width + j] += g[b];
                    }
                }
            }
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
                for (dst, src) in grad.iter_mut().zip(&adj[i]) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }

    /// Accumulate this tape's leaf gradients into their bound parameters.
    pub fn add_grads_to(&self, params: &mut ParamSet) {
        for (id, node_idx) in &self.bindings {
            if let Some(grad) = &self.nodes[*node_idx].grad {
                params.get_mut(*id).accumulate_grad(grad);
            }
        }
    }
}

fn b_idx(v: Var) -> usize {
    v.0
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.leaf(&t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let m = tape.leaf(&t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.data(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_product() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&t(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(out), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(vec![2, 3], vec![0.0; 6]));
        let b = tape.leaf(&t(vec![2, 2], vec![0.0; 4]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1, 2], vec![0.0, 0.0]));
        let y = tape.softmax_last(x).unwrap();
        assert_eq!(tape.data(y), &[0.5, 0.5]);

        let x = tape.leaf(&t(vec![1, 2], vec![4.0f64.ln(), 0.0]));
        let y = tape.softmax_last(x).unwrap();
        let d = tape.data(y);
        assert!((d[0] - 0.8).abs() < 1e-12 && (d[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_inputs_stable() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1, 2], vec![1000.0, 0.0]));
        let y = tape.softmax_last(x).unwrap();
        let d = tape.data(y);
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![1, 2], vec![f64::NAN, 0.0]));
        assert!(matches!(
            tape.softmax_last(x).unwrap_err(),
            Error::Numeric { .. }
        ));
    }

    #[test]
    fn tanh_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![3], vec![0.0, 1.0, 40.0]));
        let y = tape.tanh(x).unwrap();
        let d = tape.data(y);
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 0.7615941559557649).abs() < 1e-12);
        assert!((d[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2, 3], vec![1.0; 6]).with_requires_grad(true));
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![3], vec![1.0, 2.0, 3.0]).with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn detached_leaf_has_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![3], vec![1.0, 2.0, 3.0]));
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_twice_doubles_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![3], vec![1.0, 2.0, 3.0]).with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0, 12.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(vec![2], vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x).unwrap_err(),
            Error::Contract { .. }
        ));
    }

    #[test]
    fn ops_are_bitwise_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.leaf(&t(vec![2, 3], vec![0.3, -1.7, 2.9, 0.01, 5.5, -0.4]));
            let b = tape.leaf(&t(vec![3, 2], vec![1.1, 0.2, -0.7, 3.3, 0.9, -2.2]));
            let c = tape.matmul(a, b).unwrap();
            let d = tape.tanh(c).unwrap();
            let e = tape.softmax_last(d).unwrap();
            let f = tape.sum_all(e).unwrap();
            (tape.data(e).to_vec(), tape.scalar_value(f).unwrap())
        };
        let (e1, f1) = run();
        let (e2, f2) = run();
        assert!(e1.iter().zip(&e2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(f1.to_bits(), f2.to_bits());
    }

    #[test]
    fn param_binding_accumulates_into_paramset() {
        use crate::numerics::params::ParamSet;
        let mut params = ParamSet::new();
        let id = params.add("w", t(vec![2], vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let w = tape.param(&params, id);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        tape.add_grads_to(&mut params);
        assert_eq!(params.get(id).grad().unwrap(), &[2.0, 4.0]);
    }
}
