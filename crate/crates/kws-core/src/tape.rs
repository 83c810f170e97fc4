//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Operations executed through a [`Tape`] record their inputs and enough
//! saved state to be replayed backward in exact reverse execution order.
//! Tensors on the tape are immutable once written; independent tapes share
//! no state and may run on independent threads.

use crate::error::{Error, Result};
use crate::kernels::{self, Pad2d, PadKind};
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Real, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

enum Op<T> {
    Leaf,
    /// C[m,n] = A[m,k]·B[k,n]
    Matmul { a: ValueId, b: ValueId, m: usize, k: usize, n: usize },
    /// C[m,n] = A[m,k]·B[n,k]ᵀ
    MatmulBt { a: ValueId, b: ValueId, m: usize, k: usize, n: usize },
    /// out[r,c] = x[r,c] + bias[c]
    AddRowBias { x: ValueId, bias: ValueId },
    Add { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    AddScalar { x: ValueId },
    MulScalar { x: ValueId, c: T },
    /// out = max(x, lo); gradient passes only where x > lo
    MaxScalar { x: ValueId, lo: T },
    Ln { x: ValueId },
    /// out = x^e on x ≥ 0
    PowScalar { x: ValueId, e: T },
    Relu { x: ValueId },
    Sigmoid { x: ValueId },
    SoftmaxLastDim { x: ValueId },
    /// out[i] = fill where mask[i], else x[i]
    MaskedFill { x: ValueId, mask: Vec<bool> },
    LayerNorm { x: ValueId, gain: ValueId, bias: ValueId, stats: Vec<(T, T)> },
    Conv2d { x: ValueId, w: ValueId, bias: ValueId, groups: usize, pad: Pad2d },
    Conv1d { x: ValueId, w: ValueId, bias: ValueId, groups: usize, pad: PadKind },
    MaxPool2d { x: ValueId, argmax: Vec<usize> },
    SliceCols { x: ValueId, start: usize, len: usize },
    ConcatCols { parts: Vec<(ValueId, usize)> },
    /// [c,t,f] → [t, c·f]
    FlattenChannels { x: ValueId },
    MeanAll { x: ValueId },
    SumAll { x: ValueId },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    trainable: bool,
}

/// Record of executed differentiable operations.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Vec<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    /// Insert a constant input.
    pub fn leaf(&mut self, value: Tensor<T>) -> ValueId {
        self.push(value, Op::Leaf, false)
    }

    /// Insert a trainable input; `backward` will populate its gradient.
    pub fn param(&mut self, value: Tensor<T>) -> ValueId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` output w.r.t. the value `id`.
    /// Present for leaves; interior gradients are consumed during the sweep.
    pub fn grad(&self, id: ValueId) -> Option<&[T]> {
        self.grads.get(id.0).map(|g| g.as_slice()).filter(|g| !g.is_empty())
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, trainable: bool) -> ValueId {
        self.nodes.push(Node { value, op, trainable });
        ValueId(self.nodes.len() - 1)
    }

    fn shape(&self, id: ValueId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: ValueId) -> &[T] {
        self.nodes[id.0].value.data()
    }

    fn map_unary(&mut self, x: ValueId, op: Op<T>, f: impl Fn(T) -> T) -> ValueId {
        let out: Vec<T> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let value = Tensor::new(shape, out).expect("unary map preserves shape");
        self.push(value, op, false)
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, k) = self.nodes[a.0].value.dims2()?;
        let (kb, n) = self.nodes[b.0].value.dims2()?;
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul { a, b, m, k, n }, false))
    }

    /// `A[m,k] · B[n,k]ᵀ`, the query–key product.
    pub fn matmul_bt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, k) = self.nodes[a.0].value.dims2()?;
        let (n, kb) = self.nodes[b.0].value.dims2()?;
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_bt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_bt_acc(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatmulBt { a, b, m, k, n }, false))
    }

    pub fn add_row_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (r, c) = self.nodes[x.0].value.dims2()?;
        if self.shape(bias) != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut out = vec![T::zero(); r * c];
        for (dst, src) in out.chunks_exact_mut(c).zip(self.data(x).chunks_exact(c)) {
            for ((d, &s), &b) in dst.iter_mut().zip(src).zip(self.data(bias)) {
                *d = s + b;
            }
        }
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::AddRowBias { x, bias }, false))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, false))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, false))
    }

    pub fn add_scalar(&mut self, x: ValueId, c: T) -> ValueId {
        self.map_unary(x, Op::AddScalar { x }, |v| v + c)
    }

    pub fn mul_scalar(&mut self, x: ValueId, c: T) -> ValueId {
        self.map_unary(x, Op::MulScalar { x, c }, |v| v * c)
    }

    pub fn max_scalar(&mut self, x: ValueId, lo: T) -> ValueId {
        self.map_unary(x, Op::MaxScalar { x, lo }, |v| v.max(lo))
    }

    pub fn ln(&mut self, x: ValueId) -> ValueId {
        self.map_unary(x, Op::Ln { x }, |v| v.ln())
    }

    pub fn pow_scalar(&mut self, x: ValueId, e: T) -> ValueId {
        self.map_unary(x, Op::PowScalar { x, e }, |v| v.powf(e))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        self.map_unary(x, Op::Relu { x }, |v| v.max(T::zero()))
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        self.map_unary(x, Op::Sigmoid { x }, kernels::sigmoid)
    }

    /// Softmax over the last dimension, stabilized by max subtraction.
    pub fn softmax_lastdim(&mut self, x: ValueId) -> Result<ValueId> {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().ok_or(Error::InvalidArgument {
            op: "softmax_lastdim",
            msg: "rank 0 tensor".into(),
        })?;
        if last == 0 {
            return Err(Error::InvalidArgument {
                op: "softmax_lastdim",
                msg: "empty last dimension".into(),
            });
        }
        let data = self.data(x);
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax_lastdim input".into()));
        }
        let mut out = vec![T::zero(); data.len()];
        for (src, dst) in data.chunks_exact(last).zip(out.chunks_exact_mut(last)) {
            kernels::softmax_row(src, dst);
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::SoftmaxLastDim { x }, false))
    }

    /// Replace masked entries with `fill`. Gradient is zero at masked entries.
    pub fn masked_fill(&mut self, x: ValueId, mask: Vec<bool>, fill: T) -> Result<ValueId> {
        if mask.len() != self.nodes[x.0].value.numel() {
            return Err(Error::InvalidArgument {
                op: "masked_fill",
                msg: format!(
                    "mask length {} vs {} values",
                    mask.len(),
                    self.nodes[x.0].value.numel()
                ),
            });
        }
        let out: Vec<T> =
            self.data(x).iter().zip(&mask).map(|(&v, &m)| if m { fill } else { v }).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::MaskedFill { x, mask }, false))
    }

    /// Layer normalization of each row of `x[r,c]` with per-column gain/bias.
    pub fn layernorm(
        &mut self,
        x: ValueId,
        gain: ValueId,
        bias: ValueId,
        eps: T,
    ) -> Result<ValueId> {
        let (r, c) = self.nodes[x.0].value.dims2()?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let mut out = vec![T::zero(); r * c];
        let mut stats = Vec::with_capacity(r);
        for (src, dst) in self.data(x).chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            stats.push(kernels::layernorm_row(src, self.data(gain), self.data(bias), eps, dst));
        }
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::LayerNorm { x, gain, bias, stats }, false))
    }

    /// 2D convolution: `x[cin,t,f]`, `w[cout,cin/groups,kt,kf]`, `bias[cout]`.
    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        bias: ValueId,
        groups: usize,
        pad: Pad2d,
    ) -> Result<ValueId> {
        let (cin, t, f) = self.nodes[x.0].value.dims3()?;
        let wshape = self.shape(w).to_vec();
        let [cout, cpg, kt, kf] = wshape[..] else {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel must be rank 4, got {:?}", wshape),
            });
        };
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cpg != cin / groups {
            return Err(Error::Config(format!(
                "conv2d grouping {} does not divide channels {}→{} (kernel {:?})",
                groups, cin, cout, wshape
            )));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: vec![cout],
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut out = vec![T::zero(); cout * t * f];
        kernels::conv2d_forward(
            self.data(x),
            (cin, t, f),
            self.data(w),
            (cout, kt, kf),
            self.data(bias),
            groups,
            pad,
            &mut out,
        );
        Ok(self.push(
            Tensor::new(vec![cout, t, f], out)?,
            Op::Conv2d { x, w, bias, groups, pad },
            false,
        ))
    }

    /// 1D convolution over time: `x[t,cin]`, `w[cout,cin/groups,k]`, `bias[cout]`.
    pub fn conv1d(
        &mut self,
        x: ValueId,
        w: ValueId,
        bias: ValueId,
        groups: usize,
        pad: PadKind,
    ) -> Result<ValueId> {
        let (t, cin) = self.nodes[x.0].value.dims2()?;
        let wshape = self.shape(w).to_vec();
        let [cout, cpg, k] = wshape[..] else {
            return Err(Error::InvalidArgument {
                op: "conv1d",
                msg: format!("kernel must be rank 3, got {:?}", wshape),
            });
        };
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cpg != cin / groups {
            return Err(Error::Config(format!(
                "conv1d grouping {} does not divide channels {}→{} (kernel {:?})",
                groups, cin, cout, wshape
            )));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: vec![cout],
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut out = vec![T::zero(); t * cout];
        kernels::conv1d_forward(
            self.data(x),
            (t, cin),
            self.data(w),
            (cout, k),
            self.data(bias),
            groups,
            pad,
            &mut out,
        );
        Ok(self.push(
            Tensor::new(vec![t, cout], out)?,
            Op::Conv1d { x, w, bias, groups, pad },
            false,
        ))
    }

    /// Max pooling of `x[c,t,f]` with stride = window, floor semantics.
    pub fn maxpool2d(&mut self, x: ValueId, window: (usize, usize)) -> Result<ValueId> {
        let (c, t, f) = self.nodes[x.0].value.dims3()?;
        let (to, fo) = (t / window.0, f / window.1);
        if to == 0 || fo == 0 {
            return Err(Error::InvalidArgument {
                op: "maxpool2d",
                msg: format!("input {:?} smaller than window {:?}", self.shape(x), window),
            });
        }
        let mut out = vec![T::zero(); c * to * fo];
        let mut argmax = vec![0usize; c * to * fo];
        kernels::maxpool2d_forward(self.data(x), (c, t, f), window, &mut out, &mut argmax);
        Ok(self.push(Tensor::new(vec![c, to, fo], out)?, Op::MaxPool2d { x, argmax }, false))
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (r, c) = self.nodes[x.0].value.dims2()?;
        if start + len > c {
            return Err(Error::InvalidArgument {
                op: "slice_cols",
                msg: format!("columns {}..{} out of {}", start, start + len, c),
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for row in self.data(x).chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols { x, start, len }, false))
    }

    /// Horizontal concatenation of rank-2 tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument { op: "concat_cols", msg: "no parts".into() });
        }
        let (r, _) = self.nodes[parts[0].0].value.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (rp, cp) = self.nodes[p.0].value.dims2()?;
            if rp != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(cp);
            total += cp;
        }
        let mut out = vec![T::zero(); r * total];
        for row in 0..r {
            let mut col = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                out[row * total + col..row * total + col + w]
                    .copy_from_slice(&self.data(p)[row * w..(row + 1) * w]);
                col += w;
            }
        }
        let parts = parts.iter().zip(widths).map(|(&p, w)| (p, w)).collect();
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols { parts }, false))
    }

    /// `[c,t,f]` → `[t, c·f]`: one flattened row per time step.
    pub fn flatten_channels(&mut self, x: ValueId) -> Result<ValueId> {
        let (c, t, f) = self.nodes[x.0].value.dims3()?;
        let data = self.data(x);
        let mut out = vec![T::zero(); t * c * f];
        for ch in 0..c {
            for ti in 0..t {
                let src = &data[(ch * t + ti) * f..(ch * t + ti + 1) * f];
                out[ti * c * f + ch * f..ti * c * f + (ch + 1) * f].copy_from_slice(src);
            }
        }
        Ok(self.push(Tensor::new(vec![t, c * f], out)?, Op::FlattenChannels { x }, false))
    }

    pub fn mean_all(&mut self, x: ValueId) -> ValueId {
        let data = self.data(x);
        let n = T::of(data.len() as f64);
        let mut s = T::zero();
        for &v in data {
            s += v;
        }
        self.push(Tensor::scalar(s / n), Op::MeanAll { x }, false)
    }

    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let data = self.data(x);
        let mut s = T::zero();
        for &v in data {
            s += v;
        }
        self.push(Tensor::scalar(s), Op::SumAll { x }, false)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar output. Populates gradients for every
    /// leaf that feeds `out`; read them back with [`Self::grad`].
    pub fn backward(&mut self, out: ValueId) -> Result<()> {
        if self.nodes[out.0].value.numel() != 1 {
            return Err(Error::InvalidArgument {
                op: "backward",
                msg: format!("output must be scalar, got shape {:?}", self.shape(out)),
            });
        }
        self.grads = self.nodes.iter().map(|n| vec![T::zero(); n.value.numel()]).collect();
        self.grads[out.0][0] = T::one();

        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |id: ValueId| nodes[id.0].value.data();

        for i in (0..=out.0).rev() {
            let g = std::mem::take(&mut grads[i]);
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Matmul { a, b, m, k, n } => {
                    matmul_bt_acc(&g, val(*b), &mut grads[a.0], *m, *n, *k);
                    matmul_at_acc(val(*a), &g, &mut grads[b.0], *m, *k, *n);
                }
                Op::MatmulBt { a, b, m, k, n } => {
                    matmul_acc(&g, val(*b), &mut grads[a.0], *m, *n, *k);
                    matmul_at_acc(&g, val(*a), &mut grads[b.0], *m, *n, *k);
                }
                Op::AddRowBias { x, bias } => {
                    let c = nodes[bias.0].value.numel();
                    for (gx, &gv) in grads[x.0].iter_mut().zip(&g) {
                        *gx += gv;
                    }
                    for (j, &gv) in g.iter().enumerate() {
                        grads[bias.0][j % c] += gv;
                    }
                }
                Op::Add { a, b } => {
                    for (ga, &gv) in grads[a.0].iter_mut().zip(&g) {
                        *ga += gv;
                    }
                    for (gb, &gv) in grads[b.0].iter_mut().zip(&g) {
                        *gb += gv;
                    }
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (val(*a), val(*b));
                    for (j, &gv) in g.iter().enumerate() {
                        grads[a.0][j] += gv * bv[j];
                        grads[b.0][j] += gv * av[j];
                    }
                }
                Op::AddScalar { x } => {
                    for (gx, &gv) in grads[x.0].iter_mut().zip(&g) {
                        *gx += gv;
                    }
                }
                Op::MulScalar { x, c } => {
                    for (gx, &gv) in grads[x.0].iter_mut().zip(&g) {
                        *gx += gv * *c;
                    }
                }
                Op::MaxScalar { x, lo } => {
                    let xv = val(*x);
                    for (j, &gv) in g.iter().enumerate() {
                        if xv[j] > *lo {
                            grads[x.0][j] += gv;
                        }
                    }
                }
                Op::Ln { x } => {
                    let xv = val(*x);
                    for (j, &gv) in g.iter().enumerate() {
                        grads[x.0][j] += gv / xv[j];
                    }
                }
                Op::PowScalar { x, e } => {
                    let e = *e;
                    if e != T::zero() {
                        let xv = val(*x);
                        for (j, &gv) in g.iter().enumerate() {
                            let d = if e == T::one() {
                                T::one()
                            } else if xv[j] > T::zero() {
                                e * xv[j].powf(e - T::one())
                            } else {
                                T::zero()
                            };
                            grads[x.0][j] += gv * d;
                        }
                    }
                }
                Op::Relu { x } => {
                    let xv = val(*x);
                    for (j, &gv) in g.iter().enumerate() {
                        if xv[j] > T::zero() {
                            grads[x.0][j] += gv;
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    let yv = nodes[i].value.data();
                    for (j, &gv) in g.iter().enumerate() {
                        grads[x.0][j] += gv * yv[j] * (T::one() - yv[j]);
                    }
                }
                Op::SoftmaxLastDim { x } => {
                    let last = *nodes[i].value.shape().last().unwrap();
                    let y = nodes[i].value.data();
                    let gx = &mut grads[x.0];
                    for (row, (y_row, g_row)) in
                        y.chunks_exact(last).zip(g.chunks_exact(last)).enumerate()
                    {
                        let mut dot = T::zero();
                        for (&yv, &gv) in y_row.iter().zip(g_row) {
                            dot += yv * gv;
                        }
                        for j in 0..last {
                            gx[row * last + j] += y_row[j] * (g_row[j] - dot);
                        }
                    }
                }
                Op::MaskedFill { x, mask } => {
                    for (j, &gv) in g.iter().enumerate() {
                        if !mask[j] {
                            grads[x.0][j] += gv;
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, stats } => {
                    let c = nodes[gain.0].value.numel();
                    let xd = val(*x);
                    let gd = val(*gain);
                    let inv_c = T::one() / T::of(c as f64);
                    let mut gx_all = vec![T::zero(); xd.len()];
                    let mut ggain = vec![T::zero(); c];
                    let mut gbias = vec![T::zero(); c];
                    let mut dxhat = vec![T::zero(); c];
                    for (row, &(mean, inv_std)) in stats.iter().enumerate() {
                        let x_row = &xd[row * c..(row + 1) * c];
                        let g_row = &g[row * c..(row + 1) * c];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let xhat = (x_row[j] - mean) * inv_std;
                            ggain[j] += g_row[j] * xhat;
                            gbias[j] += g_row[j];
                            dxhat[j] = g_row[j] * gd[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat;
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            let xhat = (x_row[j] - mean) * inv_std;
                            gx_all[row * c + j] = inv_std * (dxhat[j] - m1 - xhat * m2);
                        }
                    }
                    for (dst, v) in grads[x.0].iter_mut().zip(gx_all) {
                        *dst += v;
                    }
                    for (dst, v) in grads[gain.0].iter_mut().zip(ggain) {
                        *dst += v;
                    }
                    for (dst, v) in grads[bias.0].iter_mut().zip(gbias) {
                        *dst += v;
                    }
                }
                Op::Conv2d { x, w, bias, groups, pad } => {
                    let (cin, t, f) = nodes[x.0].value.dims3()?;
                    let ws = nodes[w.0].value.shape();
                    let (cout, kt, kf) = (ws[0], ws[2], ws[3]);
                    let mut dx = vec![T::zero(); cin * t * f];
                    let mut dw = vec![T::zero(); nodes[w.0].value.numel()];
                    let mut db = vec![T::zero(); cout];
                    kernels::conv2d_backward(
                        val(*x),
                        (cin, t, f),
                        val(*w),
                        (cout, kt, kf),
                        *groups,
                        *pad,
                        &g,
                        &mut dx,
                        &mut dw,
                        &mut db,
                    );
                    for (dst, v) in grads[x.0].iter_mut().zip(dx) {
                        *dst += v;
                    }
                    for (dst, v) in grads[w.0].iter_mut().zip(dw) {
                        *dst += v;
                    }
                    for (dst, v) in grads[bias.0].iter_mut().zip(db) {
                        *dst += v;
                    }
                }
                Op::Conv1d { x, w, bias, groups, pad } => {
                    let (t, cin) = nodes[x.0].value.dims2()?;
                    let ws = nodes[w.0].value.shape();
                    let (cout, k) = (ws[0], ws[2]);
                    let mut dx = vec![T::zero(); t * cin];
                    let mut dw = vec![T::zero(); nodes[w.0].value.numel()];
                    let mut db = vec![T::zero(); cout];
                    kernels::conv1d_backward(
                        val(*x),
                        (t, cin),
                        val(*w),
                        (cout, k),
                        *groups,
                        *pad,
                        &g,
                        &mut dx,
                        &mut dw,
                        &mut db,
                    );
                    for (dst, v) in grads[x.0].iter_mut().zip(dx) {
                        *dst += v;
                    }
                    for (dst, v) in grads[w.0].iter_mut().zip(dw) {
                        *dst += v;
                    }
                    for (dst, v) in grads[bias.0].iter_mut().zip(db) {
                        *dst += v;
                    }
                }
                Op::MaxPool2d { x, argmax } => {
                    for (o, &src) in argmax.iter().enumerate() {
                        grads[x.0][src] += g[o];
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let (_, c) = nodes[x.0].value.dims2()?;
                    for (row, g_row) in g.chunks_exact(*len).enumerate() {
                        let dst = &mut grads[x.0][row * c + start..row * c + start + len];
                        for (d, &gv) in dst.iter_mut().zip(g_row) {
                            *d += gv;
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let total: usize = parts.iter().map(|&(_, w)| w).sum();
                    let rows = g.len() / total;
                    for row in 0..rows {
                        let mut col = 0;
                        for &(p, w) in parts {
                            let src = &g[row * total + col..row * total + col + w];
                            let dst = &mut grads[p.0][row * w..(row + 1) * w];
                            for (d, &gv) in dst.iter_mut().zip(src) {
                                *d += gv;
                            }
                            col += w;
                        }
                    }
                }
                Op::FlattenChannels { x } => {
                    let (c, t, f) = nodes[x.0].value.dims3()?;
                    let gx = &mut grads[x.0];
                    for ch in 0..c {
                        for ti in 0..t {
                            for fi in 0..f {
                                gx[(ch * t + ti) * f + fi] += g[ti * c * f + ch * f + fi];
                            }
                        }
                    }
                }
                Op::MeanAll { x } => {
                    let n = T::of(nodes[x.0].value.numel() as f64);
                    let gv = g[0] / n;
                    for gx in grads[x.0].iter_mut() {
                        *gx += gv;
                    }
                }
                Op::SumAll { x } => {
                    for gx in grads[x.0].iter_mut() {
                        *gx += g[0];
                    }
                }
            }
            if nodes[i].trainable {
                grads[i] = g;
            }
        }
        Ok(())
    }
}
