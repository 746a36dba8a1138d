use super::kernels;
use super::{check_same_shape, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Abs,
    Square,
    Sigmoid,
    Relu,
    Gelu,
    Softplus,
    Tanh,
}

impl Unary {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Sigmoid => kernels::sigmoid(x),
            Unary::Relu => x.max(T::ZERO),
            Unary::Gelu => kernels::gelu(x),
            Unary::Softplus => kernels::softplus(x),
            Unary::Tanh => x.tanh(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Unary::Abs => {
                if x > T::ZERO {
                    T::ONE
                } else if x < T::ZERO {
                    -T::ONE
                } else {
                    T::ZERO
                }
            }
            Unary::Square => x + x,
            Unary::Sigmoid => y * (T::ONE - y),
            Unary::Relu => {
                if x > T::ZERO {
                    T::ONE
                } else {
                    T::ZERO
                }
            }
            Unary::Gelu => kernels::gelu_grad(x),
            Unary::Softplus => kernels::sigmoid(x),
            Unary::Tanh => T::ONE - y * y,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axes {
    All,
    Last,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Binary(Binary, Var, Var),
    Scale(Var, f32),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Unary(Unary, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        kernels: Var,
        stride: usize,
    },
    Upsample2x(Var),
    DepthToSpace(Var, Vec<usize>),
    Reduce(ReduceKind, Axes, Var),
    CosineRows {
        a: Var,
        b: Var,
        eps: f32,
    },
    L2Normalize {
        x: Var,
        eps: f32,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run recording of a forward computation.
///
/// Nodes are appended in execution order, so every node's inputs precede
/// it and a single reverse sweep visits each node once.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Tape { nodes: Vec::new() }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn cols_of(shape: &[usize]) -> usize {
    *shape.last().expect("rank >= 1")
}

impl Tape<f32> {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<T: Real> Tape<T> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// First element of `v`, widened to f64.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0].to_f64()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf carrying the tensor's value; it participates in
    /// differentiation iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            T::from_f32_slice(tensor.data()),
            Op::Leaf,
            tensor.requires_grad,
        )
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), T::from_f32_vec(data), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, T::to_f32_vec(n.value.clone())).expect("tape nodes hold valid tensors")
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let bt = self.transpose(b)?;
        self.matmul(a, bt)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let out = kernels::transpose(self.value(a), r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), rg))
    }

    // ---- elementwise ----------------------------------------------------

    /// Binary elementwise op. Shapes must match, or one side must hold a
    /// single element, which is broadcast.
    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        let shape = if sa == sb || nb == 1 {
            sa
        } else if na == 1 {
            sb
        } else {
            return Err(Error::shape("elementwise", &sa, &sb));
        };
        let n = shape.iter().product::<usize>();
        let (va, vb) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<T> = (0..n)
            .map(|i| f(va[if na == 1 { 0 } else { i }], vb[if nb == 1 { 0 } else { i }]))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let st = T::from_f32(s);
        let out = self.value(a).iter().map(|&v| v * st).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Scale(a, s), rg)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let out = self.value(a).iter().map(|&v| kind.apply(v)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Unary(kind, a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    /// `x[n×c] + bias[c]`, bias broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = cols_of(self.shape(x));
        if self.shape(bias) != [c] {
            return Err(Error::shape("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(shape, out, Op::AddRowBias(x, bias), rg))
    }

    /// `x[c×h×w] + bias[c]`, bias broadcast over each channel plane.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || self.shape(bias) != [s[0]] {
            return Err(Error::shape("add_channel_bias", s, self.shape(bias)));
        }
        let plane = s[1] * s[2];
        let b = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i / plane])
            .collect();
        let shape = s.to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(shape, out, Op::AddChannelBias(x, bias), rg))
    }

    // ---- normalisation --------------------------------------------------

    pub fn softmax(&mut self, x: Var) -> Var {
        let c = cols_of(self.shape(x));
        let out = kernels::softmax_rows(self.value(x), c);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::Softmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let c = cols_of(self.shape(x));
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (mean, rstd) = kernels::row_stats(self.value(x), c, eps);
        let (g, b) = (self.value(gain), self.value(bias));
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let r = i / c;
                T::from_f64((v.to_f64() - mean[r]) * rstd[r]) * g[i % c] + b[i % c]
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Per-row cosine similarity of two `rows×d` (or `h×w×d`) tensors; each
    /// norm is clamped below by `eps`.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f32) -> Result<Var> {
        check_same_shape("cosine", self.shape(a), self.shape(b))?;
        let shape = self.shape(a).to_vec();
        let d = cols_of(&shape);
        let out = cosine_values(self.value(a), self.value(b), d, eps);
        let out_shape = if shape.len() > 1 {
            shape[..shape.len() - 1].to_vec()
        } else {
            vec![1]
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out_shape, out, Op::CosineRows { a, b, eps }, rg))
    }

    pub fn l2_normalize(&mut self, x: Var, eps: f32) -> Var {
        let shape = self.shape(x).to_vec();
        let d = cols_of(&shape);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(d) {
            let e = T::from_f64(norm(row).max(eps as f64));
            row.iter_mut().for_each(|v| *v /= e);
        }
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::L2Normalize { x, eps }, rg)
    }

    // ---- spatial --------------------------------------------------------

    /// 3×3 cross-correlation, padding 1. `x: c_in×h×w`,
    /// `kernels: c_out×c_in×3×3`.
    pub fn conv2d(&mut self, x: Var, kernels_v: Var, stride: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernels_v));
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] || sk[2] != 3 || sk[3] != 3 {
            return Err(Error::shape("conv2d", sx, sk));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::Contract(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        let (c_in, h, w, c_out) = (sx[0], sx[1], sx[2], sk[0]);
        let out = kernels::conv2d(self.value(x), c_in, h, w, self.value(kernels_v), c_out, stride);
        let shape = vec![
            c_out,
            kernels::conv_out_dim(h, stride),
            kernels::conv_out_dim(w, stride),
        ];
        let rg = self.rg(&[x, kernels_v]);
        Ok(self.push(
            shape,
            out,
            Op::Conv2d {
                x,
                kernels: kernels_v,
                stride,
            },
            rg,
        ))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::shape("upsample_nearest", s, &[]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let out = kernels::upsample2x(self.value(x), c, h, w);
        let rg = self.rg(&[x]);
        Ok(self.push(vec![c, 2 * h, 2 * w], out, Op::Upsample2x(x), rg))
    }

    /// `(c·r²)×h×w → c×(h·r)×(w·r)`.
    pub fn depth_to_space(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || r == 0 || !s[0].is_multiple_of(r * r) {
            return Err(Error::shape("depth_to_space", s, &[r]));
        }
        let (c, h, w) = (s[0] / (r * r), s[1], s[2]);
        let idx = kernels::depth_to_space_index(c, h, w, r);
        let v = self.value(x);
        let out = idx.iter().map(|&i| v[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![c, h * r, w * r], out, Op::DepthToSpace(x, idx), rg))
    }

    // ---- reductions -----------------------------------------------------

    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axes: Axes) -> Var {
        let shape = self.shape(x).to_vec();
        let v = self.value(x);
        let (out_shape, out) = match axes {
            Axes::All => {
                let s: f64 = v.iter().map(|e| e.to_f64()).sum();
                let s = match kind {
                    ReduceKind::Sum => s,
                    ReduceKind::Mean => s / v.len() as f64,
                };
                (vec![1], vec![T::from_f64(s)])
            }
            Axes::Last => {
                let d = cols_of(&shape);
                let out: Vec<T> = v
                    .chunks(d)
                    .map(|row| {
                        let s: f64 = row.iter().map(|e| e.to_f64()).sum();
                        match kind {
                            ReduceKind::Sum => T::from_f64(s),
                            ReduceKind::Mean => T::from_f64(s / d as f64),
                        }
                    })
                    .collect();
                let os = if shape.len() > 1 {
                    shape[..shape.len() - 1].to_vec()
                } else {
                    vec![1]
                };
                (os, out)
            }
        };
        let rg = self.rg(&[x]);
        self.push(out_shape, out, Op::Reduce(kind, axes, x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(ReduceKind::Sum, x, Axes::All)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(ReduceKind::Mean, x, Axes::All)
    }

    // ---- structural -----------------------------------------------------

    /// Concatenates along axis 0; trailing dimensions must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::shape("concat_rows", self.shape(*first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(shape, out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Concatenates 2-D tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rows = self.shape(*first)[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols", self.shape(*first), s));
            }
            total += s[1];
        }
        let mut out = vec![T::ZERO; rows * total];
        let mut offset = 0;
        for &p in parts {
            let c = self.shape(p)[1];
            let v = self.value(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + c]
                    .copy_from_slice(&v[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(Error::shape("slice_rows", &s, &[start, len]));
        }
        let inner: usize = s[1..].iter().product();
        let out = self.value(x)[start * inner..(start + len) * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::SliceRows(x, start), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(Error::shape("slice_cols", &s, &[start, len]));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![rows, len], out, Op::SliceCols(x, start), rg))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::ONE]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing
                .iter_mut()
                .zip(contribution)
                .for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let bt = kernels::transpose(self.value(*b), k, n);
                    self.accumulate(grads, *a, kernels::matmul(g, &bt, m, n, k));
                }
                if self.wants(*b) {
                    let at = kernels::transpose(self.value(*a), m, k);
                    self.accumulate(grads, *b, kernels::matmul(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.accumulate(grads, *a, kernels::transpose(g, c, r));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (na, nb) = (va.len(), vb.len());
                let n = g.len();
                let pick = |v: &[T], len: usize, i: usize| v[if len == 1 { 0 } else { i }];
                let reduce_to = |full: Vec<T>, len: usize| {
                    if len == 1 && n != 1 {
                        vec![T::from_f64(full.iter().map(|x| x.to_f64()).sum::<f64>())]
                    } else {
                        full
                    }
                };
                if self.wants(*a) {
                    let da: Vec<T> = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => (0..n).map(|i| g[i] * pick(vb, nb, i)).collect(),
                    };
                    self.accumulate(grads, *a, reduce_to(da, na));
                }
                if self.wants(*b) {
                    let db: Vec<T> = match kind {
                        Binary::Add => g.to_vec(),
                        Binary::Sub => g.iter().map(|&v| -v).collect(),
                        Binary::Mul => (0..n).map(|i| g[i] * pick(va, na, i)).collect(),
                    };
                    self.accumulate(grads, *b, reduce_to(db, nb));
                }
            }
            Op::Scale(a, s) => {
                let st = T::from_f32(*s);
                self.accumulate(grads, *a, g.iter().map(|&v| v * st).collect())
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.wants(*b) {
                    let c = self.value(*b).len();
                    let mut db = vec![0.0f64; c];
                    for (i, &v) in g.iter().enumerate() {
                        db[i % c] += v.to_f64();
                    }
                    self.accumulate(grads, *b, db.into_iter().map(T::from_f64).collect());
                }
            }
            Op::AddChannelBias(x, b) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.wants(*b) {
                    let c = self.value(*b).len();
                    let plane = g.len() / c;
                    let db = g
                        .chunks(plane)
                        .map(|p| T::from_f64(p.iter().map(|v| v.to_f64()).sum::<f64>()))
                        .collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let da = g
                    .iter()
                    .zip(x.iter().zip(&node.value))
                    .map(|(&gi, (&xi, &yi))| gi * kind.derivative(xi, yi))
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::Softmax(a) => {
                let c = cols_of(&node.shape);
                let mut da = vec![T::ZERO; g.len()];
                for ((grow, yrow), drow) in g.chunks(c).zip(node.value.chunks(c)).zip(da.chunks_mut(c)) {
                    let dot = dot64(grow, yrow);
                    for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = T::from_f64(yi.to_f64() * (gi.to_f64() - dot));
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let c = cols_of(&node.shape);
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let mut dx = vec![T::ZERO; g.len()];
                let mut dgain = vec![0.0f64; c];
                let mut dbias = vec![0.0f64; c];
                for r in 0..g.len() / c {
                    let row = r * c..(r + 1) * c;
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_dxhat = 0.0f64;
                    let mut sum_dxhat_xhat = 0.0f64;
                    for j in 0..c {
                        let xhat = (xv[row.start + j].to_f64() - mu) * rs;
                        let gi = g[row.start + j].to_f64();
                        let dxhat = gi * gv[j].to_f64();
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgain[j] += gi * xhat;
                        dbias[j] += gi;
                    }
                    let (m1, m2) = (sum_dxhat / c as f64, sum_dxhat_xhat / c as f64);
                    for j in 0..c {
                        let xhat = (xv[row.start + j].to_f64() - mu) * rs;
                        let dxhat = g[row.start + j].to_f64() * gv[j].to_f64();
                        dx[row.start + j] = T::from_f64(rs * (dxhat - m1 - xhat * m2));
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain.into_iter().map(T::from_f64).collect());
                self.accumulate(grads, *bias, dbias.into_iter().map(T::from_f64).collect());
            }
            Op::Conv2d { x, kernels: k, stride } => {
                let sx = self.shape(*x);
                let (c_in, h, w) = (sx[0], sx[1], sx[2]);
                let c_out = self.shape(*k)[0];
                let n = node.shape[1] * node.shape[2];
                if self.wants(*k) {
                    let cols = kernels::im2col(self.value(*x), c_in, h, w, *stride);
                    let cols_t = kernels::transpose(&cols, c_in * 9, n);
                    self.accumulate(grads, *k, kernels::matmul(g, &cols_t, c_out, n, c_in * 9));
                }
                if self.wants(*x) {
                    let kt = kernels::transpose(self.value(*k), c_out, c_in * 9);
                    let dcols = kernels::matmul(&kt, g, c_in * 9, c_out, n);
                    self.accumulate(grads, *x, kernels::col2im(&dcols, c_in, h, w, *stride));
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                self.accumulate(grads, *x, kernels::upsample2x_adjoint(g, s[0], s[1], s[2]));
            }
            Op::DepthToSpace(x, idx) => {
                let mut dx = vec![T::ZERO; g.len()];
                for (o, &src) in idx.iter().enumerate() {
                    dx[src] += g[o];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reduce(kind, axes, x) => {
                let n = self.value(*x).len();
                let dx = match axes {
                    Axes::All => {
                        let v = match kind {
                            ReduceKind::Sum => g[0],
                            ReduceKind::Mean => T::from_f64(g[0].to_f64() / n as f64),
                        };
                        vec![v; n]
                    }
                    Axes::Last => {
                        let d = cols_of(self.shape(*x));
                        (0..n)
                            .map(|i| match kind {
                                ReduceKind::Sum => g[i / d],
                                ReduceKind::Mean => T::from_f64(g[i / d].to_f64() / d as f64),
                            })
                            .collect()
                    }
                };
                self.accumulate(grads, *x, dx);
            }
            Op::CosineRows { a, b, eps } => {
                let d = cols_of(self.shape(*a));
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut da = vec![T::ZERO; va.len()];
                let mut db = vec![T::ZERO; vb.len()];
                for (r, &gr) in g.iter().enumerate() {
                    let ra = &va[r * d..(r + 1) * d];
                    let rb = &vb[r * d..(r + 1) * d];
                    let na = norm(ra);
                    let nb = norm(rb);
                    let (ea, eb) = (na.max(*eps as f64), nb.max(*eps as f64));
                    let dot = dot64(ra, rb);
                    let cos = dot / (ea * eb);
                    let gr = gr.to_f64();
                    for j in 0..d {
                        let (aj, bj) = (ra[j].to_f64(), rb[j].to_f64());
                        let mut ga = bj / (ea * eb);
                        if na > *eps as f64 {
                            ga -= cos * aj / (na * na);
                        }
                        let mut gb = aj / (ea * eb);
                        if nb > *eps as f64 {
                            gb -= cos * bj / (nb * nb);
                        }
                        da[r * d + j] = T::from_f64(gr * ga);
                        db[r * d + j] = T::from_f64(gr * gb);
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::L2Normalize { x, eps } => {
                let d = cols_of(&node.shape);
                let xv = self.value(*x);
                let mut dx = vec![T::ZERO; g.len()];
                for r in 0..g.len() / d {
                    let row = r * d..(r + 1) * d;
                    let n = norm(&xv[row.clone()]);
                    let y = &node.value[row.clone()];
                    let gr = &g[row.clone()];
                    if n > *eps as f64 {
                        let dot = dot64(y, gr);
                        for j in 0..d {
                            dx[row.start + j] = T::from_f64((gr[j].to_f64() - y[j].to_f64() * dot) / n);
                        }
                    } else {
                        let e = T::from_f32(*eps);
                        for j in 0..d {
                            dx[row.start + j] = gr[j] / e;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += c;
                }
            }
            Op::SliceRows(x, start) => {
                let n = self.value(*x).len();
                let inner: usize = node.shape[1..].iter().product();
                let mut dx = vec![T::ZERO; n];
                dx[start * inner..start * inner + g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols(x, start) => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                let len = node.shape[1];
                let mut dx = vec![T::ZERO; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

fn dot64<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.to_f64() * y.to_f64()).sum()
}

fn norm<T: Real>(v: &[T]) -> f64 {
    dot64(v, v).sqrt()
}

/// Eps-guarded per-row cosine similarity, shared by the tape op and the
/// inference-only relevancy path.
pub(crate) fn cosine_values<T: Real>(a: &[T], b: &[T], d: usize, eps: f32) -> Vec<T> {
    a.chunks(d)
        .zip(b.chunks(d))
        .map(|(ra, rb)| {
            let c = dot64(ra, rb) / (norm(ra).max(eps as f64) * norm(rb).max(eps as f64));
            T::from_f64(c.clamp(-1.0, 1.0))
        })
        .collect()
}
