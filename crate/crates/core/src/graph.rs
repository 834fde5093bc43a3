//! Reverse-mode tape.
//!
//! Every op stores its inputs and whatever it needs to run its reverse pass.
//! Nodes are appended in evaluation order, so the backward sweep is a plain
//! reverse walk over the node list.

use alloc::vec;
use alloc::vec::Vec;


// Float math for no_std builds. Unused when something in the graph links std.
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{dim_err, input_err, Error, Result};
use crate::kernels::{self, add_into, gemm_nn, gemm_nt, gemm_tn};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of an unfold (im2col) over an `[H, W, C]` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

/// Layout of a multi-scale deformable sampling step.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformLayout {
    pub heads: usize,
    pub points: usize,
    pub head_dim: usize,
    /// `(height, width)` of each level's value map, coarse to fine.
    pub levels: Vec<(usize, usize)>,
}

impl DeformLayout {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Samples per (token, head): `levels · points`.
    pub fn samples(&self) -> usize {
        self.levels.len() * self.points
    }

    pub fn offset_width(&self) -> usize {
        self.heads * self.samples() * 2
    }

    /// Continuous pixel location of sample `(h, l, k)` for a token at
    /// normalized reference `rf` given the token's raw offset row.
    #[inline]
    pub fn location<T: Real>(&self, rf: [f64; 2], offsets: &[T], h: usize, l: usize, k: usize) -> (f64, f64) {
        let (lh, lw) = self.levels[l];
        let o = ((h * self.levels.len() + l) * self.points + k) * 2;
        (
            rf[0] * lw as f64 - 0.5 + offsets[o].widen(),
            rf[1] * lh as f64 - 0.5 + offsets[o + 1].widen(),
        )
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow { x: Var, row: Var },
    Affine { x: Var, scale: T },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanRows(Var),
    Softmax(Var),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    Sigmoid(Var),
    Gelu(Var),
    Abs(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(f64, f64)> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    Reshape(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { table: Var, idx: Vec<usize> },
    Im2Col { x: Var, geo: ConvGeometry },
    Bilinear { map: Var, points: Var },
    Deform { values: Vec<Var>, offsets: Var, refs: Vec<[f64; 2]>, layout: DeformLayout },
    HeadScores { q: Var, k: Var, heads: usize, scale: f64 },
    HeadMix { p: Var, v: Var, heads: usize },
    SampledMix { w: Var, s: Var, heads: usize },
    BceLogits { x: Var, target: Vec<T> },
    SmoothL1 { x: Var, target: Vec<T>, beta: f64 },
    Giou { boxes: Var, target: Vec<T> },
    Cosine { a: Var, b: Var },
    GradScale { x: Var, scale: T },
}

#[derive(Debug, Clone)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recorded computation.
#[derive(Debug, Clone, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar root with respect to every leaf that requires them.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, or `None` if it does not influence the root.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives gradients.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: Tensor<T>, trainable: bool) -> Var {
        self.push(t, Op::Leaf, trainable)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// `a[..., k] · b[k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 || av.cols() != bv.shape()[0] {
            return Err(dim_err!("matmul {:?} x {:?}", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = gemm_nn(av.data(), bv.data(), m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, m, k, n, trans_b: false }, ng))
    }

    /// `a[m, k] · b[n, k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 || av.cols() != bv.shape()[1] {
            return Err(dim_err!("matmul_nt {:?} x {:?}ᵀ", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.shape()[0]);
        let out = gemm_nt(av.data(), bv.data(), m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, m, k, n, trans_b: true }, ng))
    }

    /// `x W + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, what)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::new(av.shape(), data)?, self.ng(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), ng))
    }

    /// Broadcast-add a `[n]` row to every row of `x[..., n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.len() != xv.cols() {
            return Err(dim_err!("add_row {:?} + {:?}", xv.shape(), rv.shape()));
        }
        let n = xv.cols();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + rv.data()[i % n]).collect();
        let t = Tensor::new(xv.shape(), data)?;
        let ng = self.ng(&[x, row]);
        Ok(self.push(t, Op::AddRow { x, row }, ng))
    }

    /// `scale · x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::cast(scale), T::cast(shift));
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| s * v + c).collect();
        let t = Tensor::new(xv.shape(), data).expect("same length");
        let ng = self.ng(&[x]);
        self.push(t, Op::Affine { x, scale: s }, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|v| v.widen()).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(T::cast(s)), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s: f64 = d.iter().map(|v| v.widen()).sum::<f64>() / d.len().max(1) as f64;
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(T::cast(s)), Op::Mean(x), ng)
    }

    /// Sum over the last axis: `[..., n] -> [...]`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let data = xv.data().chunks(n).map(|r| T::cast(r.iter().map(|v| v.widen()).sum())).collect();
        let shape = &xv.shape()[..xv.rank().saturating_sub(1)];
        let t = Tensor::new(shape, data).expect("row count");
        let ng = self.ng(&[x]);
        self.push(t, Op::SumLast(x), ng)
    }

    /// Mean over rows of `[m, n]` giving `[n]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let mut acc = vec![0f64; n];
        for r in xv.data().chunks(n) {
            for (a, &v) in acc.iter_mut().zip(r) {
                *a += v.widen();
            }
        }
        let data = acc.into_iter().map(|s| T::cast(s / m as f64)).collect();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&[n], data).expect("n"), Op::MeanRows(x), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = vec![T::zero(); xv.len()];
        for (r, o) in xv.data().chunks(n).zip(out.chunks_mut(n)) {
            kernels::softmax_row(r, o);
        }
        let t = Tensor::new(xv.shape(), out).expect("same length");
        let ng = self.ng(&[x]);
        self.push(t, Op::Softmax(x), ng)
    }

    /// Softmax over the last axis of `x[rows, n]` with entries excluded where
    /// `mask` is true. `mask` is `[rows / group, n]`: each mask row covers
    /// `group` consecutive rows of `x`. Fully masked rows fall back to plain
    /// softmax.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool], group: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if group == 0 || xv.rows() % group != 0 || mask.len() * group != xv.len() {
            return Err(dim_err!("mask of {} for {:?} in groups of {group}", mask.len(), xv.shape()));
        }
        let mut out = vec![T::zero(); xv.len()];
        for (i, (r, o)) in xv.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let mrow = &mask[(i / group) * n..(i / group + 1) * n];
            kernels::masked_softmax_row(r, mrow, o);
        }
        let t = Tensor::new(xv.shape(), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::MaskedSoftmax(x), ng))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = Vec::with_capacity(xv.len());
        for r in xv.data().chunks(n) {
            let row: Vec<f64> = r.iter().map(|v| v.widen()).collect();
            let lse = kernels::log_sum_exp(&row);
            out.extend(row.iter().map(|&v| T::cast(v - lse)));
        }
        let t = Tensor::new(xv.shape(), out).expect("same length");
        let ng = self.ng(&[x]);
        self.push(t, Op::LogSoftmax(x), ng)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape(), xv.data().iter().map(|&v| f(v)).collect()).expect("same length");
        let ng = self.ng(&[x]);
        self.push(t, op, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), kernels::gelu)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    /// Identity whose reverse pass multiplies the incoming gradient by
    /// `scale`. Only used to plant a known-bad gradient in verification runs.
    pub fn grad_scale(&mut self, x: Var, scale: f64) -> Var {
        self.unary(x, Op::GradScale { x, scale: T::cast(scale) }, |v| v)
    }

    /// Layer normalization over the last axis (epsilon `1e-5`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        if gv.len() != n || bv.len() != n {
            return Err(dim_err!("layer_norm width {n} with gain {:?} bias {:?}", gv.shape(), bv.shape()));
        }
        let mut out = Vec::with_capacity(xv.len());
        let mut stats = Vec::with_capacity(xv.rows());
        for r in xv.data().chunks(n) {
            let mean = r.iter().map(|v| v.widen()).sum::<f64>() / n as f64;
            let var = r.iter().map(|v| (v.widen() - mean).powi(2)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + 1e-5).sqrt();
            for (j, &v) in r.iter().enumerate() {
                let xhat = (v.widen() - mean) * rstd;
                out.push(T::cast(xhat * gv.data()[j].widen() + bv.data()[j].widen()));
            }
            stats.push((mean, rstd));
        }
        let t = Tensor::new(xv.shape(), out)?;
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, stats }, ng))
    }

    /// Scale each row of `x` to unit L2 norm (rows of norm below `1e-12` are
    /// divided by `1e-12`).
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = Vec::with_capacity(xv.len());
        let mut norms = Vec::with_capacity(xv.rows());
        for r in xv.data().chunks(n) {
            let norm = kernels::dot(r, r).sqrt().max(1e-12);
            out.extend(r.iter().map(|&v| T::cast(v.widen() / norm)));
            norms.push(norm);
        }
        let t = Tensor::new(xv.shape(), out).expect("same length");
        let ng = self.ng(&[x]);
        self.push(t, Op::NormalizeRows { x, norms }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(dim_err!("transpose needs rank 2, got {:?}", xv.shape()));
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv.data()[i * n + j];
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(x), ng))
    }

    /// Concatenate 2-D (or row-viewed) tensors along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut width = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(dim_err!("concat_cols row counts differ"));
            }
            width += self.value(p).cols();
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(&[rows, width], out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Stack 2-D tensors with equal widths along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let width = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != width {
                return Err(dim_err!("concat_rows widths {} vs {}", pv.cols(), width));
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(&[rows, width], out)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if start + len > xv.rows() {
            return Err(dim_err!("rows {start}..{} of {:?}", start + len, xv.shape()));
        }
        let t = Tensor::new(&[len, n], xv.data()[start * n..(start + len) * n].to_vec())?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::SliceRows { x, start }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        if start + len > n {
            return Err(dim_err!("cols {start}..{} of {:?}", start + len, xv.shape()));
        }
        let mut out = Vec::with_capacity(m * len);
        for r in xv.data().chunks(n) {
            out.extend_from_slice(&r[start..start + len]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&[m, len], out)?, Op::SliceCols { x, start }, ng))
    }

    /// Rows of `table[m, n]` picked by `idx`, giving `[idx.len(), n]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let n = tv.cols();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= tv.rows() {
                return Err(dim_err!("row {i} of {:?}", tv.shape()));
            }
            out.extend_from_slice(tv.row(i));
        }
        let ng = self.ng(&[table]);
        Ok(self.push(Tensor::new(&[idx.len(), n], out)?, Op::GatherRows { table, idx: idx.to_vec() }, ng))
    }

    /// Repeat a `[n]` (or `[1, n]`) row `count` times.
    pub fn repeat_row(&mut self, row: Var, count: usize) -> Result<Var> {
        let n = self.value(row).len();
        let r = self.reshape(row, &[1, n])?;
        self.gather_rows(r, &vec![0; count])
    }

    /// Unfold `x[H, W, C]` into `[Ho·Wo, k·k·C]` patches with zero padding.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(dim_err!("im2col needs [H, W, C], got {:?}", xv.shape()));
        }
        let geo = ConvGeometry {
            height: xv.shape()[0],
            width: xv.shape()[1],
            channels: xv.shape()[2],
            kernel,
            stride,
            pad,
        };
        if kernel == 0 || stride == 0 || geo.height + 2 * pad < kernel || geo.width + 2 * pad < kernel {
            return Err(input_err!("bad conv geometry {geo:?}"));
        }
        let (ho, wo, c) = (geo.out_height(), geo.out_width(), geo.channels);
        let mut out = vec![T::zero(); ho * wo * geo.patch_len()];
        let src = xv.data();
        for oy in 0..ho {
            for ox in 0..wo {
                let base = (oy * wo + ox) * geo.patch_len();
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= geo.height as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= geo.width as isize {
                            continue;
                        }
                        let s = (iy as usize * geo.width + ix as usize) * c;
                        let d = base + (ky * kernel + kx) * c;
                        out[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
        let t = Tensor::new(&[ho * wo, geo.patch_len()], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Im2Col { x, geo }, ng))
    }

    /// Bilinear interpolation of `map[H, W, D]` at `points[P, 2]` given as
    /// `(x, y)` pixel coordinates; out-of-range points are clamped.
    pub fn bilinear_sample(&mut self, map: Var, points: Var) -> Result<Var> {
        let (mv, pv) = (self.value(map), self.value(points));
        if mv.rank() != 3 || pv.cols() != 2 {
            return Err(dim_err!("bilinear_sample map {:?} points {:?}", mv.shape(), pv.shape()));
        }
        let (h, w, d) = (mv.shape()[0], mv.shape()[1], mv.shape()[2]);
        let np = pv.rows();
        let mut out = vec![T::zero(); np * d];
        for p in 0..np {
            let taps = kernels::bilinear_taps(pv.data()[2 * p].widen(), pv.data()[2 * p + 1].widen(), h, w);
            let o = &mut out[p * d..(p + 1) * d];
            for (c, oc) in o.iter_mut().enumerate() {
                let mut acc = 0.0;
                for t in 0..4 {
                    acc += taps.weight[t] * mv.data()[taps.cell[t] * d + c].widen();
                }
                *oc = T::cast(acc);
            }
        }
        let ng = self.ng(&[map, points]);
        Ok(self.push(Tensor::new(&[np, d], out)?, Op::Bilinear { map, points }, ng))
    }

    /// Multi-scale deformable sampling. `values[l]` is level `l`'s value map
    /// flattened to `[h_l·w_l, heads·head_dim]`; `offsets` is
    /// `[T, heads·L·K·2]` in grid cells; `refs` holds one normalized
    /// reference point per token. Output is `[T·heads·L·K, head_dim]`.
    pub fn deform_sample(
        &mut self,
        values: &[Var],
        offsets: Var,
        refs: &[[f64; 2]],
        layout: &DeformLayout,
    ) -> Result<Var> {
        let ov = self.value(offsets);
        let tokens = refs.len();
        if values.len() != layout.levels.len() || ov.rows() != tokens || ov.cols() != layout.offset_width() {
            return Err(dim_err!(
                "deform_sample: {} value maps for {} levels, offsets {:?} for {} tokens",
                values.len(),
                layout.levels.len(),
                ov.shape(),
                tokens
            ));
        }
        for (l, &v) in values.iter().enumerate() {
            let (lh, lw) = layout.levels[l];
            let vv = self.value(v);
            if vv.rows() != lh * lw || vv.cols() != layout.width() {
                return Err(dim_err!("level {l} values {:?} for {lh}x{lw}", vv.shape()));
            }
        }
        let (heads, dh, s) = (layout.heads, layout.head_dim, layout.samples());
        let d = layout.width();
        let mut out = vec![T::zero(); tokens * heads * s * dh];
        for (t, rf) in refs.iter().enumerate() {
            let orow = ov.row(t);
            for h in 0..heads {
                for l in 0..layout.levels.len() {
                    let (lh, lw) = layout.levels[l];
                    let vals = self.data(values[l]);
                    for k in 0..layout.points {
                        let (x, y) = layout.location(*rf, orow, h, l, k);
                        let taps = kernels::bilinear_taps(x, y, lh, lw);
                        let o = (((t * heads + h) * s) + l * layout.points + k) * dh;
                        for c in 0..dh {
                            let mut acc = 0.0;
                            for q in 0..4 {
                                acc += taps.weight[q] * vals[taps.cell[q] * d + h * dh + c].widen();
                            }
                            out[o + c] = T::cast(acc);
                        }
                    }
                }
            }
        }
        let mut deps = values.to_vec();
        deps.push(offsets);
        let ng = self.ng(&deps);
        let t = Tensor::new(&[tokens * heads * s, dh], out)?;
        Ok(self.push(
            t,
            Op::Deform { values: values.to_vec(), offsets, refs: refs.to_vec(), layout: layout.clone() },
            ng,
        ))
    }

    /// Per-head scaled dot products: `q[Nq, D]`, `k[Nk, D]` with `D` split
    /// into `heads` equal slices, giving `[Nq·heads, Nk]`.
    pub fn head_scores(&mut self, q: Var, k: Var, heads: usize, scale: f64) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        let d = qv.cols();
        if kv.cols() != d || heads == 0 || d % heads != 0 {
            return Err(dim_err!("head_scores {:?} vs {:?} with {heads} heads", qv.shape(), kv.shape()));
        }
        let (nq, nk, dh) = (qv.rows(), kv.rows(), d / heads);
        let mut out = Vec::with_capacity(nq * heads * nk);
        for t in 0..nq {
            for h in 0..heads {
                let qs = &qv.row(t)[h * dh..(h + 1) * dh];
                for j in 0..nk {
                    let ks = &kv.row(j)[h * dh..(h + 1) * dh];
                    out.push(T::cast(scale * kernels::dot(qs, ks)));
                }
            }
        }
        let ng = self.ng(&[q, k]);
        Ok(self.push(Tensor::new(&[nq * heads, nk], out)?, Op::HeadScores { q, k, heads, scale }, ng))
    }

    /// Per-head weighted sum: `p[Nq·heads, Nk]` over `v[Nk, D]`, giving `[Nq, D]`.
    pub fn head_mix(&mut self, p: Var, v: Var, heads: usize) -> Result<Var> {
        let (pv, vv) = (self.value(p), self.value(v));
        let (nk, d) = (vv.rows(), vv.cols());
        if heads == 0 || d % heads != 0 || pv.cols() != nk || pv.rows() % heads != 0 {
            return Err(dim_err!("head_mix {:?} over {:?} with {heads} heads", pv.shape(), vv.shape()));
        }
        let (nq, dh) = (pv.rows() / heads, d / heads);
        let mut out = vec![0f64; nq * d];
        for t in 0..nq {
            for h in 0..heads {
                let prow = pv.row(t * heads + h);
                let o = &mut out[t * d + h * dh..t * d + (h + 1) * dh];
                for (j, &w) in prow.iter().enumerate() {
                    let w = w.widen();
                    if w == 0.0 {
                        continue;
                    }
                    let vs = &vv.row(j)[h * dh..(h + 1) * dh];
                    for (oc, &x) in o.iter_mut().zip(vs) {
                        *oc += w * x.widen();
                    }
                }
            }
        }
        let out = out.into_iter().map(T::cast).collect();
        let ng = self.ng(&[p, v]);
        Ok(self.push(Tensor::new(&[nq, d], out)?, Op::HeadMix { p, v, heads }, ng))
    }

    /// Weighted sum of per-(token, head) sample sets: `w[T·heads, S]` over
    /// `s[T·heads·S, dh]`, giving `[T, heads·dh]`.
    pub fn sampled_mix(&mut self, w: Var, s: Var, heads: usize) -> Result<Var> {
        let (wv, sv) = (self.value(w), self.value(s));
        let (rows, ns, dh) = (wv.rows(), wv.cols(), sv.cols());
        if heads == 0 || rows % heads != 0 || sv.rows() != rows * ns {
            return Err(dim_err!("sampled_mix {:?} over {:?}", wv.shape(), sv.shape()));
        }
        let tokens = rows / heads;
        let d = heads * dh;
        let mut out = vec![T::zero(); tokens * d];
        for r in 0..rows {
            let (t, h) = (r / heads, r % heads);
            let o = &mut out[t * d + h * dh..t * d + (h + 1) * dh];
            for c in 0..dh {
                let mut acc = 0.0;
                for j in 0..ns {
                    acc += wv.data()[r * ns + j].widen() * sv.data()[(r * ns + j) * dh + c].widen();
                }
                o[c] = T::cast(acc);
            }
        }
        let ng = self.ng(&[w, s]);
        Ok(self.push(Tensor::new(&[tokens, d], out)?, Op::SampledMix { w, s, heads }, ng))
    }

    /// Elementwise binary cross-entropy of `sigmoid(x)` against `target`.
    pub fn bce_with_logits(&mut self, x: Var, target: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if target.len() != xv.len() {
            return Err(dim_err!("bce target {} for {:?}", target.len(), xv.shape()));
        }
        let out = xv
            .data()
            .iter()
            .zip(target)
            .map(|(&v, &t)| T::cast(kernels::bce_logits(v.widen(), t.widen()).0))
            .collect();
        let t = Tensor::new(xv.shape(), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::BceLogits { x, target: target.to_vec() }, ng))
    }

    /// Elementwise smooth-L1 distance to `target` with transition at `beta`.
    pub fn smooth_l1(&mut self, x: Var, target: &[T], beta: f64) -> Result<Var> {
        let xv = self.value(x);
        if target.len() != xv.len() {
            return Err(dim_err!("smooth_l1 target {} for {:?}", target.len(), xv.shape()));
        }
        let out = xv
            .data()
            .iter()
            .zip(target)
            .map(|(&v, &t)| T::cast(kernels::smooth_l1((v - t).widen(), beta).0))
            .collect();
        let t = Tensor::new(xv.shape(), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::SmoothL1 { x, target: target.to_vec(), beta }, ng))
    }

    /// Row-wise GIoU between `boxes[P, 4]` and `target[P, 4]`, both
    /// `(cx, cy, w, h)`, giving `[P]`.
    pub fn giou(&mut self, boxes: Var, target: &[T]) -> Result<Var> {
        let bv = self.value(boxes);
        if bv.cols() != 4 || target.len() != bv.len() {
            return Err(dim_err!("giou boxes {:?} target {}", bv.shape(), target.len()));
        }
        let out = bv
            .data()
            .chunks(4)
            .zip(target.chunks(4))
            .map(|(p, g)| {
                let (pc, _) = kernels::cxcywh_to_corners(widen4(p));
                let (gc, _) = kernels::cxcywh_to_corners(widen4(g));
                T::cast(kernels::giou_corners(pc, gc))
            })
            .collect();
        let t = Tensor::new(&[bv.rows()], out)?;
        let ng = self.ng(&[boxes]);
        Ok(self.push(t, Op::Giou { boxes, target: target.to_vec() }, ng))
    }

    /// Cosine similarity of two equal-length vectors; 0 when either is zero.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(dim_err!("cosine {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let c = cosine_parts(av.data(), bv.data()).0;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::scalar(T::cast(c)), Op::Cosine { a, b }, ng))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(dim_err!("backward root must be scalar, got {:?}", self.shape(root)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(alloc::string::String::from("gradient")));
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n, trans_b } => {
                let (av, bv) = (self.data(a), self.data(b));
                if self.requires_grad(a) {
                    let da = if trans_b { gemm_nn(g, bv, m, n, k) } else { gemm_nt(g, bv, m, n, k) };
                    add_into(self.slot(grads, a).unwrap(), &da);
                }
                if self.requires_grad(b) {
                    let db = if trans_b { gemm_tn(g, av, m, n, k) } else { gemm_tn(av, g, m, k, n) };
                    add_into(self.slot(grads, b).unwrap(), &db);
                }
            }
            &Op::Add(a, b) => {
                if let Some(s) = self.slot(grads, a) {
                    add_into(s, g);
                }
                if let Some(s) = self.slot(grads, b) {
                    add_into(s, g);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, a) {
                    add_into(s, g);
                }
                if let Some(s) = self.slot(grads, b) {
                    s.iter_mut().zip(g).for_each(|(d, &v)| *d -= v);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.data(a).to_vec(), self.data(b).to_vec());
                if let Some(s) = self.slot(grads, a) {
                    for ((d, &gv), &y) in s.iter_mut().zip(g).zip(&bv) {
                        *d += gv * y;
                    }
                }
                if let Some(s) = self.slot(grads, b) {
                    for ((d, &gv), &x) in s.iter_mut().zip(g).zip(&av) {
                        *d += gv * x;
                    }
                }
            }
            &Op::Div(a, b) => {
                let (av, bv) = (self.data(a).to_vec(), self.data(b).to_vec());
                if let Some(s) = self.slot(grads, a) {
                    for ((d, &gv), &y) in s.iter_mut().zip(g).zip(&bv) {
                        *d += gv / y;
                    }
                }
                if let Some(s) = self.slot(grads, b) {
                    for (((d, &gv), &x), &y) in s.iter_mut().zip(g).zip(&av).zip(&bv) {
                        *d -= gv * x / (y * y);
                    }
                }
            }
            &Op::AddRow { x, row } => {
                if let Some(s) = self.slot(grads, x) {
                    add_into(s, g);
                }
                if let Some(s) = self.slot(grads, row) {
                    let n = s.len();
                    let mut acc = vec![0f64; n];
                    for (j, &gv) in g.iter().enumerate() {
                        acc[j % n] += gv.widen();
                    }
                    for (d, a) in s.iter_mut().zip(acc) {
                        *d += T::cast(a);
                    }
                }
            }
            &Op::Affine { x, scale } => {
                if let Some(s) = self.slot(grads, x) {
                    s.iter_mut().zip(g).for_each(|(d, &v)| *d += scale * v);
                }
            }
            &Op::GradScale { x, scale } => {
                if let Some(s) = self.slot(grads, x) {
                    s.iter_mut().zip(g).for_each(|(d, &v)| *d += scale * v);
                }
            }
            &Op::Sum(x) => {
                if let Some(s) = self.slot(grads, x) {
                    s.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(x) => {
                if let Some(s) = self.slot(grads, x) {
                    let v = T::cast(g[0].widen() / s.len() as f64);
                    s.iter_mut().for_each(|d| *d += v);
                }
            }
            &Op::SumLast(x) => {
                let n = self.value(x).cols();
                if let Some(s) = self.slot(grads, x) {
                    for (r, &gv) in s.chunks_mut(n).zip(g) {
                        r.iter_mut().for_each(|d| *d += gv);
                    }
                }
            }
            &Op::MeanRows(x) => {
                let m = self.value(x).rows();
                let n = self.value(x).cols();
                if let Some(s) = self.slot(grads, x) {
                    let scaled: Vec<T> = g.iter().map(|&v| T::cast(v.widen() / m as f64)).collect();
                    for r in s.chunks_mut(n) {
                        add_into(r, &scaled);
                    }
                }
            }
            &Op::Softmax(x) | &Op::MaskedSoftmax(x) => {
                let n = out.cols();
                if let Some(s) = self.slot(grads, x) {
                    for ((sr, yr), gr) in s.chunks_mut(n).zip(out.data().chunks(n)).zip(g.chunks(n)) {
                        let d = kernels::dot(yr, gr);
                        for ((sd, &y), &gv) in sr.iter_mut().zip(yr).zip(gr) {
                            *sd += T::cast(y.widen() * (gv.widen() - d));
                        }
                    }
                }
            }
            &Op::LogSoftmax(x) => {
                let n = out.cols();
                if let Some(s) = self.slot(grads, x) {
                    for ((sr, yr), gr) in s.chunks_mut(n).zip(out.data().chunks(n)).zip(g.chunks(n)) {
                        let total: f64 = gr.iter().map(|v| v.widen()).sum();
                        for ((sd, &y), &gv) in sr.iter_mut().zip(yr).zip(gr) {
                            *sd += T::cast(gv.widen() - y.widen().exp() * total);
                        }
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if let Some(s) = self.slot(grads, x) {
                    for ((d, &y), &gv) in s.iter_mut().zip(out.data()).zip(g) {
                        *d += gv * y * (T::one() - y);
                    }
                }
            }
            &Op::Gelu(x) => {
                let xv = self.data(x).to_vec();
                if let Some(s) = self.slot(grads, x) {
                    for ((d, &v), &gv) in s.iter_mut().zip(&xv).zip(g) {
                        *d += gv * kernels::gelu_grad(v);
                    }
                }
            }
            &Op::Abs(x) => {
                let xv = self.data(x).to_vec();
                if let Some(s) = self.slot(grads, x) {
                    for ((d, &v), &gv) in s.iter_mut().zip(&xv).zip(g) {
                        if v > T::zero() {
                            *d += gv;
                        } else if v < T::zero() {
                            *d -= gv;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let xv = self.data(x);
                let gv = self.data(gain);
                let n = gv.len();
                let xhat = |r: usize, j: usize| (xv[r * n + j].widen() - stats[r].0) * stats[r].1;
                if self.requires_grad(gain) || self.requires_grad(bias) {
                    let mut dg = vec![0f64; n];
                    let mut db = vec![0f64; n];
                    for r in 0..stats.len() {
                        for j in 0..n {
                            let gvv = g[r * n + j].widen();
                            dg[j] += gvv * xhat(r, j);
                            db[j] += gvv;
                        }
                    }
                    if let Some(s) = self.slot(grads, gain) {
                        s.iter_mut().zip(dg).for_each(|(d, v)| *d += T::cast(v));
                    }
                    if let Some(s) = self.slot(grads, bias) {
                        s.iter_mut().zip(db).for_each(|(d, v)| *d += T::cast(v));
                    }
                }
                if self.requires_grad(x) {
                    let mut dx = vec![T::zero(); xv.len()];
                    for r in 0..stats.len() {
                        let dxhat: Vec<f64> = (0..n).map(|j| g[r * n + j].widen() * gv[j].widen()).collect();
                        let m1 = dxhat.iter().sum::<f64>() / n as f64;
                        let m2 = (0..n).map(|j| dxhat[j] * xhat(r, j)).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dx[r * n + j] = T::cast(stats[r].1 * (dxhat[j] - m1 - xhat(r, j) * m2));
                        }
                    }
                    add_into(self.slot(grads, x).unwrap(), &dx);
                }
            }
            Op::NormalizeRows { x, norms } => {
                let n = out.cols();
                if let Some(s) = self.slot(grads, *x) {
                    for (r, &norm) in norms.iter().enumerate() {
                        let y = &out.data()[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let d = kernels::dot(y, gr);
                        let raw_small = norm <= 1e-12;
                        for j in 0..n {
                            let v = if raw_small {
                                gr[j].widen() / norm
                            } else {
                                (gr[j].widen() - y[j].widen() * d) / norm
                            };
                            s[r * n + j] += T::cast(v);
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(s) = self.slot(grads, x) {
                    add_into(s, g);
                }
            }
            &Op::Transpose(x) => {
                let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                if let Some(s) = self.slot(grads, x) {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let width = out.cols();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(s) = self.slot(grads, p) {
                        for (r, sr) in s.chunks_mut(c).enumerate() {
                            add_into(sr, &g[r * width + off..r * width + off + c]);
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(s) = self.slot(grads, p) {
                        add_into(s, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            &Op::SliceRows { x, start } => {
                let n = out.cols();
                if let Some(s) = self.slot(grads, x) {
                    add_into(&mut s[start * n..start * n + g.len()], g);
                }
            }
            &Op::SliceCols { x, start } => {
                let n = self.value(x).cols();
                let len = out.cols();
                if let Some(s) = self.slot(grads, x) {
                    for (sr, gr) in s.chunks_mut(n).zip(g.chunks(len)) {
                        add_into(&mut sr[start..start + len], gr);
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                let n = out.cols();
                if let Some(s) = self.slot(grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            &Op::Im2Col { x, geo } => {
                if let Some(s) = self.slot(grads, x) {
                    let (ho, wo, c, k) = (geo.out_height(), geo.out_width(), geo.channels, geo.kernel);
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let base = (oy * wo + ox) * geo.patch_len();
                            for ky in 0..k {
                                let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                                if iy < 0 || iy >= geo.height as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                                    if ix < 0 || ix >= geo.width as isize {
                                        continue;
                                    }
                                    let d = (iy as usize * geo.width + ix as usize) * c;
                                    let src = base + (ky * k + kx) * c;
                                    add_into(&mut s[d..d + c], &g[src..src + c]);
                                }
                            }
                        }
                    }
                }
            }
            &Op::Bilinear { map, points } => {
                let mv = self.value(map);
                let (h, w, d) = (mv.shape()[0], mv.shape()[1], mv.shape()[2]);
                let pts = self.data(points).to_vec();
                let md = mv.data().to_vec();
                let np = pts.len() / 2;
                let taps: Vec<_> = (0..np)
                    .map(|p| kernels::bilinear_taps(pts[2 * p].widen(), pts[2 * p + 1].widen(), h, w))
                    .collect();
                if let Some(s) = self.slot(grads, map) {
                    for (p, t) in taps.iter().enumerate() {
                        for q in 0..4 {
                            let wq = t.weight[q];
                            if wq == 0.0 {
                                continue;
                            }
                            for c in 0..d {
                                s[t.cell[q] * d + c] += T::cast(wq * g[p * d + c].widen());
                            }
                        }
                    }
                }
                if let Some(s) = self.slot(grads, points) {
                    for (p, t) in taps.iter().enumerate() {
                        let (mut gx, mut gy) = (0.0, 0.0);
                        for c in 0..d {
                            let gv = g[p * d + c].widen();
                            for q in 0..4 {
                                let v = md[t.cell[q] * d + c].widen();
                                gx += gv * t.dx[q] * v;
                                gy += gv * t.dy[q] * v;
                            }
                        }
                        s[2 * p] += T::cast(gx);
                        s[2 * p + 1] += T::cast(gy);
                    }
                }
            }
            Op::Deform { values, offsets, refs, layout } => {
                self.deform_backward(values, *offsets, refs, layout, g, grads);
            }
            &Op::HeadScores { q, k, heads, scale } => {
                let (qv, kv) = (self.value(q), self.value(k));
                let (nq, nk, d) = (qv.rows(), kv.rows(), qv.cols());
                let dh = d / heads;
                if self.requires_grad(q) {
                    let mut dq = vec![0f64; nq * d];
                    for t in 0..nq {
                        for h in 0..heads {
                            for j in 0..nk {
                                let gv = scale * g[(t * heads + h) * nk + j].widen();
                                if gv == 0.0 {
                                    continue;
                                }
                                let ks = &kv.row(j)[h * dh..(h + 1) * dh];
                                for (c, &kvv) in ks.iter().enumerate() {
                                    dq[t * d + h * dh + c] += gv * kvv.widen();
                                }
                            }
                        }
                    }
                    let s = self.slot(grads, q).unwrap();
                    s.iter_mut().zip(dq).for_each(|(a, v)| *a += T::cast(v));
                }
                if self.requires_grad(k) {
                    let mut dk = vec![0f64; nk * d];
                    for t in 0..nq {
                        for h in 0..heads {
                            let qs = &qv.row(t)[h * dh..(h + 1) * dh];
                            for j in 0..nk {
                                let gv = scale * g[(t * heads + h) * nk + j].widen();
                                if gv == 0.0 {
                                    continue;
                                }
                                for (c, &qvv) in qs.iter().enumerate() {
                                    dk[j * d + h * dh + c] += gv * qvv.widen();
                                }
                            }
                        }
                    }
                    let s = self.slot(grads, k).unwrap();
                    s.iter_mut().zip(dk).for_each(|(a, v)| *a += T::cast(v));
                }
            }
            &Op::HeadMix { p, v, heads } => {
                let (pv, vv) = (self.value(p), self.value(v));
                let (nk, d) = (vv.rows(), vv.cols());
                let (nq, dh) = (pv.rows() / heads, d / heads);
                if self.requires_grad(p) {
                    let mut dp = Vec::with_capacity(pv.len());
                    for t in 0..nq {
                        for h in 0..heads {
                            let gs = &g[t * d + h * dh..t * d + (h + 1) * dh];
                            for j in 0..nk {
                                dp.push(T::cast(kernels::dot(gs, &vv.row(j)[h * dh..(h + 1) * dh])));
                            }
                        }
                    }
                    add_into(self.slot(grads, p).unwrap(), &dp);
                }
                if self.requires_grad(v) {
                    let mut dv = vec![0f64; nk * d];
                    for t in 0..nq {
                        for h in 0..heads {
                            let prow = pv.row(t * heads + h);
                            let gs = &g[t * d + h * dh..t * d + (h + 1) * dh];
                            for (j, &w) in prow.iter().enumerate() {
                                let w = w.widen();
                                if w == 0.0 {
                                    continue;
                                }
                                for (c, &gv) in gs.iter().enumerate() {
                                    dv[j * d + h * dh + c] += w * gv.widen();
                                }
                            }
                        }
                    }
                    let s = self.slot(grads, v).unwrap();
                    s.iter_mut().zip(dv).for_each(|(a, x)| *a += T::cast(x));
                }
            }
            &Op::SampledMix { w, s: samples, heads } => {
                let (wv, sv) = (self.value(w), self.value(samples));
                let (rows, ns, dh) = (wv.rows(), wv.cols(), sv.cols());
                let d = heads * dh;
                if self.requires_grad(w) {
                    let mut dw = Vec::with_capacity(rows * ns);
                    for r in 0..rows {
                        let (t, h) = (r / heads, r % heads);
                        let gs = &g[t * d + h * dh..t * d + (h + 1) * dh];
                        for j in 0..ns {
                            dw.push(T::cast(kernels::dot(gs, sv.row(r * ns + j))));
                        }
                    }
                    add_into(self.slot(grads, w).unwrap(), &dw);
                }
                if self.requires_grad(samples) {
                    let wd = wv.data().to_vec();
                    let s = self.slot(grads, samples).unwrap();
                    for r in 0..rows {
                        let (t, h) = (r / heads, r % heads);
                        let gs = &g[t * d + h * dh..t * d + (h + 1) * dh];
                        for j in 0..ns {
                            let wj = wd[r * ns + j];
                            for (c, &gv) in gs.iter().enumerate() {
                                s[(r * ns + j) * dh + c] += wj * gv;
                            }
                        }
                    }
                }
            }
            Op::BceLogits { x, target } => {
                let xv = self.data(*x).to_vec();
                if let Some(s) = self.slot(grads, *x) {
                    for (((d, &v), &t), &gv) in s.iter_mut().zip(&xv).zip(target).zip(g) {
                        *d += T::cast(gv.widen() * kernels::bce_logits(v.widen(), t.widen()).1);
                    }
                }
            }
            Op::SmoothL1 { x, target, beta } => {
                let xv = self.data(*x).to_vec();
                if let Some(s) = self.slot(grads, *x) {
                    for (((d, &v), &t), &gv) in s.iter_mut().zip(&xv).zip(target).zip(g) {
                        *d += T::cast(gv.widen() * kernels::smooth_l1((v - t).widen(), *beta).1);
                    }
                }
            }
            Op::Giou { boxes, target } => {
                let bv = self.data(*boxes).to_vec();
                if let Some(s) = self.slot(grads, *boxes) {
                    for (p, (pb, gb)) in bv.chunks(4).zip(target.chunks(4)).enumerate() {
                        let (pc, clamped) = kernels::cxcywh_to_corners(widen4(pb));
                        let (gc, _) = kernels::cxcywh_to_corners(widen4(gb));
                        let (_, dc) = kernels::giou_with_grad(pc, gc);
                        let gv = g[p].widen();
                        s[4 * p] += T::cast(gv * (dc[0] + dc[2]));
                        s[4 * p + 1] += T::cast(gv * (dc[1] + dc[3]));
                        if !clamped[0] {
                            s[4 * p + 2] += T::cast(gv * 0.5 * (dc[2] - dc[0]));
                        }
                        if !clamped[1] {
                            s[4 * p + 3] += T::cast(gv * 0.5 * (dc[3] - dc[1]));
                        }
                    }
                }
            }
            &Op::Cosine { a, b } => {
                let (av, bv) = (self.data(a).to_vec(), self.data(b).to_vec());
                let (c, na, nb) = cosine_parts(&av, &bv);
                if na == 0.0 || nb == 0.0 {
                    return;
                }
                let gv = g[0].widen();
                if let Some(s) = self.slot(grads, a) {
                    for ((d, &x), &y) in s.iter_mut().zip(&av).zip(&bv) {
                        *d += T::cast(gv * (y.widen() / (na * nb) - c * x.widen() / (na * na)));
                    }
                }
                if let Some(s) = self.slot(grads, b) {
                    for ((d, &x), &y) in s.iter_mut().zip(&av).zip(&bv) {
                        *d += T::cast(gv * (x.widen() / (na * nb) - c * y.widen() / (nb * nb)));
                    }
                }
            }
        }
    }

    fn deform_backward(
        &self,
        values: &[Var],
        offsets: Var,
        refs: &[[f64; 2]],
        layout: &DeformLayout,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (heads, dh, s) = (layout.heads, layout.head_dim, layout.samples());
        let d = layout.width();
        let ov = self.value(offsets);
        let want_offsets = self.requires_grad(offsets);
        let mut doff = if want_offsets { vec![0f64; ov.len()] } else { Vec::new() };
        let mut dvals: Vec<Option<Vec<f64>>> = values
            .iter()
            .map(|&v| self.requires_grad(v).then(|| vec![0f64; self.value(v).len()]))
            .collect();
        for (t, rf) in refs.iter().enumerate() {
            let orow = ov.row(t);
            for h in 0..heads {
                for l in 0..layout.levels.len() {
                    let (lh, lw) = layout.levels[l];
                    let vals = self.data(values[l]);
                    for k in 0..layout.points {
                        let (x, y) = layout.location(*rf, orow, h, l, k);
                        let taps = kernels::bilinear_taps(x, y, lh, lw);
                        let o = (((t * heads + h) * s) + l * layout.points + k) * dh;
                        let gs = &g[o..o + dh];
                        if let Some(dv) = dvals[l].as_mut() {
                            for q in 0..4 {
                                let wq = taps.weight[q];
                                if wq == 0.0 {
                                    continue;
                                }
                                let base = taps.cell[q] * d + h * dh;
                                for (c, &gv) in gs.iter().enumerate() {
                                    dv[base + c] += wq * gv.widen();
                                }
                            }
                        }
                        if want_offsets {
                            let (mut gx, mut gy) = (0.0, 0.0);
                            for q in 0..4 {
                                let base = taps.cell[q] * d + h * dh;
                                let proj: f64 =
                                    gs.iter().zip(&vals[base..base + dh]).map(|(&a, &b)| a.widen() * b.widen()).sum();
                                gx += taps.dx[q] * proj;
                                gy += taps.dy[q] * proj;
                            }
                            let oi = t * layout.offset_width() + ((h * layout.levels.len() + l) * layout.points + k) * 2;
                            doff[oi] += gx;
                            doff[oi + 1] += gy;
                        }
                    }
                }
            }
        }
        for (l, dv) in dvals.into_iter().enumerate() {
            if let Some(dv) = dv {
                let s = self.slot(grads, values[l]).unwrap();
                s.iter_mut().zip(dv).for_each(|(a, v)| *a += T::cast(v));
            }
        }
        if want_offsets {
            let s = self.slot(grads, offsets).unwrap();
            s.iter_mut().zip(doff).for_each(|(a, v)| *a += T::cast(v));
        }
    }
}

fn widen4<T: Real>(v: &[T]) -> [f64; 4] {
    [v[0].widen(), v[1].widen(), v[2].widen(), v[3].widen()]
}

fn cosine_parts<T: Real>(a: &[T], b: &[T]) -> (f64, f64, f64) {
    let na = kernels::dot(a, a).sqrt();
    let nb = kernels::dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return (0.0, na, nb);
    }
    (kernels::dot(a, b) / (na * nb), na, nb)
}
