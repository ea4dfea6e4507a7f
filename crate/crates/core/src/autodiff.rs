//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records operations as they execute; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients for every node that (directly
//! or transitively) depends on a gradient-carrying leaf. The op set is exactly
//! what the segmenter and the future-aware objectives need: elementwise
//! arithmetic, GEMM-backed matmul and convolution, bilinear upsampling,
//! gather/pool ops over pixel coordinates, row softmax, fused stable
//! cross-entropy / binary-cross-entropy, and row-pair cosine similarity.
//!
//! Everything is single-threaded and evaluation order is fixed by insertion
//! order, so forward values and gradients are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape"
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![1], data: vec![x] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    DivElem(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    AddRowVec(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Matmul { a: Var, b: Var, trans_b: bool },
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize, pad: usize },
    BilinearUp { input: Var, factor: usize },
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    StackRows(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherPixels { input: Var, coords: Vec<(usize, usize)> },
    GatherRows { input: Var, rows: Vec<usize> },
    SelectPerRow { input: Var, cols: Vec<usize> },
    SoftmaxRows(Var),
    CrossEntropyMean { logits: Var, targets: Vec<usize>, weights: Vec<f64> },
    BceWithLogitsMean { logits: Var, targets: Vec<f64> },
    CosineRows { a: Var, b: Var },
    CosineRowsConst { a: Var, b: Tensor },
    WeightedSum(Vec<(Var, f64)>),
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// ---------------------------------------------------------------------------
// dense kernels
// ---------------------------------------------------------------------------

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four partial sums let the compiler vectorize the reduction
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// out[m x n] += a[m x k] * b[k x n]
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            axpy(av, &b[kk * n..(kk + 1) * n], orow);
        }
    }
}

/// out[m x n] += a[m x k] * b[n x k]^T
fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out[k x n] += a[m x k]^T * b[m x n]
fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            axpy(av, brow, &mut out[kk * n..(kk + 1) * n]);
        }
    }
}

fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

/// Unfold `[c, h, w]` into a `[c*kh*kw, oh*ow]` patch matrix.
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let cols = oh * ow;
    let mut out = vec![0.0; c * kh * kw * cols];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_base = ci * h * w + iy as usize * w;
                    let dst_base = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[dst_base + ox] = x[src_base + ix as usize];
                    }
                }
            }
        }
    }
    out
}

/// Scatter-add of a `[c*kh*kw, oh*ow]` patch-gradient matrix back to `[c, h, w]`.
fn col2im_add(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let cols = oh * ow;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_base = ci * h * w + iy as usize * w;
                    let src_base = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[dst_base + ix as usize] += src[src_base + ox];
                    }
                }
            }
        }
    }
}

/// Per-axis source indices and blend weights for align-corners=false bilinear
/// interpolation at an integer upscale factor.
fn bilinear_axis(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            let floor = src.floor();
            let frac = src - floor;
            let i0 = floor.max(0.0) as usize;
            let i1 = (floor as isize + 1).clamp(0, in_len as isize - 1) as usize;
            let i0 = i0.min(in_len - 1);
            (i0, i1, frac.clamp(0.0, 1.0))
        })
        .collect()
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn row_norms(x: &[f64], rows: usize, d: usize) -> Vec<f64> {
    (0..rows)
        .map(|i| x[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn cosine_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d) = (a.shape[0], a.shape[1]);
    let m = b.shape[0];
    assert_eq!(b.shape[1], d, "cosine: dimension mismatch");
    let na = row_norms(&a.data, n, d);
    let nb = row_norms(&b.data, m, d);
    if let Some(i) = na.iter().position(|&v| v == 0.0) {
        return Err(Error::validation(format!("cosine: zero-norm row {i} on left side")));
    }
    if let Some(j) = nb.iter().position(|&v| v == 0.0) {
        return Err(Error::validation(format!("cosine: zero-norm row {j} on right side")));
    }
    let mut out = Tensor::zeros(&[n, m]);
    gemm_nt(&a.data, &b.data, n, d, m, &mut out.data);
    for i in 0..n {
        for j in 0..m {
            out.data[i * m + j] /= na[i] * nb[j];
        }
    }
    Ok(out)
}

/// dL/da for y = cosine_rows(a, b); optionally also dL/db.
fn cosine_backward(
    g: &Tensor,
    y: &Tensor,
    a: &Tensor,
    b: &Tensor,
    da: &mut [f64],
    mut db: Option<&mut [f64]>,
) {
    let (n, d) = (a.shape[0], a.shape[1]);
    let m = b.shape[0];
    let na = row_norms(&a.data, n, d);
    let nb = row_norms(&b.data, m, d);
    // normalized rows
    let mut bn = b.data.clone();
    for j in 0..m {
        for t in 0..d {
            bn[j * d + t] /= nb[j];
        }
    }
    let mut an = a.data.clone();
    for i in 0..n {
        for t in 0..d {
            an[i * d + t] /= na[i];
        }
    }
    // da_i = (g_i . bn) / na_i - (sum_j g_ij y_ij) * a_i / na_i^2
    let mut u = vec![0.0; n * d];
    gemm(&g.data, &bn, n, m, d, &mut u);
    for i in 0..n {
        let s: f64 = (0..m).map(|j| g.data[i * m + j] * y.data[i * m + j]).sum();
        for t in 0..d {
            da[i * d + t] += u[i * d + t] / na[i] - s * a.data[i * d + t] / (na[i] * na[i]);
        }
    }
    if let Some(db) = db.as_deref_mut() {
        // db_j = (g^T_j . an) / nb_j - (sum_i g_ij y_ij) * b_j / nb_j^2
        let mut v = vec![0.0; m * d];
        gemm_tn(&g.data, &an, n, m, d, &mut v);
        for j in 0..m {
            let s: f64 = (0..n).map(|i| g.data[i * m + j] * y.data[i * m + j]).sum();
            for t in 0..d {
                db[j * d + t] += v[j * d + t] / nb[j] - s * b.data[j * d + t] / (nb[j] * nb[j]);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// tape
// ---------------------------------------------------------------------------

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient-carrying leaf (a parameter).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Constant leaf (inputs, targets, detached values).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape, self.value(b).shape, "add: shape mismatch");
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor { shape: self.value(a).shape.clone(), data };
        let needs = self.needs(a) || self.needs(b);
        self.push(t, needs, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape, self.value(b).shape, "sub: shape mismatch");
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor { shape: self.value(a).shape.clone(), data };
        let needs = self.needs(a) || self.needs(b);
        self.push(t, needs, Op::Sub(a, b))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape, self.value(b).shape, "mul: shape mismatch");
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor { shape: self.value(a).shape.clone(), data };
        let needs = self.needs(a) || self.needs(b);
        self.push(t, needs, Op::MulElem(a, b))
    }

    pub fn div_elem(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape, self.value(b).shape, "div: shape mismatch");
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x / y)
            .collect();
        let t = Tensor { shape: self.value(a).shape.clone(), data };
        let needs = self.needs(a) || self.needs(b);
        self.push(t, needs, Op::DivElem(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data.iter().map(|x| x * c).collect();
        let t = Tensor { shape: self.value(a).shape.clone(), data };
        let needs = self.needs(a);
        self.push(t, needs, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data.iter().map(|x| x + c).collect();
        let t = Tensor { shape: self.value(a).shape.clone(), data };
        let needs = self.needs(a);
        self.push(t, needs, Op::AddConst(a))
    }

    /// `a: [n, d] + b: [d]`, broadcast over rows.
    pub fn add_row_vec(&mut self, a: Var, b: Var) -> Var {
        let (n, d) = (self.value(a).shape[0], self.value(a).shape[1]);
        assert_eq!(self.value(b).shape, vec![d], "add_row_vec: shape mismatch");
        let mut data = self.value(a).data.clone();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += self.value(b).data[j];
            }
        }
        let t = Tensor { shape: vec![n, d], data };
        let needs = self.needs(a) || self.needs(b);
        self.push(t, needs, Op::AddRowVec(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data.iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor { shape: self.value(a).shape.clone(), data };
        let needs = self.needs(a);
        self.push(t, needs, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self
            .value(a)
            .data
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let t = Tensor { shape: self.value(a).shape.clone(), data };
        let needs = self.needs(a);
        self.push(t, needs, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let data = self.value(a).data.iter().map(|x| x.ln()).collect();
        let t = Tensor { shape: self.value(a).shape.clone(), data };
        let needs = self.needs(a);
        self.push(t, needs, Op::Log(a))
    }

    /// `a: [m, k] * b: [k, n]`, or `a * b^T` with `b: [n, k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (m, k) = (self.value(a).shape[0], self.value(a).shape[1]);
        let (bk, n) = if trans_b {
            (self.value(b).shape[1], self.value(b).shape[0])
        } else {
            (self.value(b).shape[0], self.value(b).shape[1])
        };
        assert_eq!(k, bk, "matmul: inner dimension mismatch");
        let mut out = Tensor::zeros(&[m, n]);
        if trans_b {
            gemm_nt(&self.value(a).data, &self.value(b).data, m, k, n, &mut out.data);
        } else {
            gemm(&self.value(a).data, &self.value(b).data, m, k, n, &mut out.data);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out, needs, Op::Matmul { a, b, trans_b })
    }

    /// 2-D convolution: input `[ci, h, w]`, weight `[co, ci, kh, kw]`, bias `[co]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Var {
        let ish = self.value(input).shape.clone();
        let wsh = self.value(weight).shape.clone();
        assert_eq!(ish.len(), 3, "conv2d: input must be [c, h, w]");
        assert_eq!(wsh.len(), 4, "conv2d: weight must be [co, ci, kh, kw]");
        assert_eq!(ish[0], wsh[1], "conv2d: channel mismatch");
        let (ci, h, w) = (ish[0], ish[1], ish[2]);
        let (co, kh, kw) = (wsh[0], wsh[2], wsh[3]);
        assert_eq!(self.value(bias).shape, vec![co], "conv2d: bias shape");
        let oh = conv_out_len(h, kh, stride, pad);
        let ow = conv_out_len(w, kw, stride, pad);
        let col = im2col(&self.value(input).data, ci, h, w, kh, kw, stride, pad);
        let mut out = vec![0.0; co * oh * ow];
        gemm(&self.value(weight).data, &col, co, ci * kh * kw, oh * ow, &mut out);
        for c in 0..co {
            let b = self.value(bias).data[c];
            for v in &mut out[c * oh * ow..(c + 1) * oh * ow] {
                *v += b;
            }
        }
        let t = Tensor { shape: vec![co, oh, ow], data: out };
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(t, needs, Op::Conv2d { input, weight, bias, stride, pad })
    }

    /// Bilinear upsample `[c, h, w] -> [c, h*factor, w*factor]` (align corners off).
    pub fn bilinear_up(&mut self, input: Var, factor: usize) -> Var {
        let sh = self.value(input).shape.clone();
        assert_eq!(sh.len(), 3, "bilinear_up: input must be [c, h, w]");
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let (oh, ow) = (h * factor, w * factor);
        let ay = bilinear_axis(oh, h, factor);
        let ax = bilinear_axis(ow, w, factor);
        let x = &self.value(input).data;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let src = &x[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for (oy, &(y0, y1, wy)) in ay.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in ax.iter().enumerate() {
                    let v = (1.0 - wy) * ((1.0 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1])
                        + wy * ((1.0 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1]);
                    dst[oy * ow + ox] = v;
                }
            }
        }
        let t = Tensor { shape: vec![c, oh, ow], data: out };
        let needs = self.needs(input);
        self.push(t, needs, Op::BilinearUp { input, factor })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(
            self.value(a).numel(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let t = Tensor { shape: shape.to_vec(), data: self.value(a).data.clone() };
        let needs = self.needs(a);
        self.push(t, needs, Op::Reshape(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), needs, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        let n = self.value(a).numel() as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(s / n), needs, Op::MeanAll(a))
    }

    /// `[n, d] -> [d]`, mean over rows.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (n, d) = (self.value(a).shape[0], self.value(a).shape[1]);
        let mut out = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                out[j] += self.value(a).data[i * d + j];
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        let needs = self.needs(a);
        self.push(Tensor::from_vec(&[d], out), needs, Op::MeanRows(a))
    }

    /// Stack `k` vectors of length `d` into `[k, d]`.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows: empty input");
        let d = self.value(rows[0]).numel();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            assert_eq!(self.value(r).numel(), d, "stack_rows: length mismatch");
            data.extend_from_slice(&self.value(r).data);
        }
        let t = Tensor::from_vec(&[rows.len(), d], data);
        let needs = rows.iter().any(|&r| self.needs(r));
        self.push(t, needs, Op::StackRows(rows.to_vec()))
    }

    /// Concatenate `[n_i, d]` matrices along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let d = self.value(parts[0]).shape[1];
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            assert_eq!(self.value(p).shape[1], d, "concat_rows: width mismatch");
            n += self.value(p).shape[0];
            data.extend_from_slice(&self.value(p).data);
        }
        let t = Tensor::from_vec(&[n, d], data);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(t, needs, Op::ConcatRows(parts.to_vec()))
    }

    /// Gather feature vectors at pixel coordinates: `[c, h, w] -> [len(coords), c]`.
    pub fn gather_pixels(&mut self, input: Var, coords: &[(usize, usize)]) -> Var {
        let sh = self.value(input).shape.clone();
        assert_eq!(sh.len(), 3, "gather_pixels: input must be [c, h, w]");
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let mut data = Vec::with_capacity(coords.len() * c);
        for &(i, j) in coords {
            assert!(i < h && j < w, "gather_pixels: coordinate out of range");
            for ch in 0..c {
                data.push(self.value(input).data[ch * h * w + i * w + j]);
            }
        }
        let t = Tensor::from_vec(&[coords.len(), c], data);
        let needs = self.needs(input);
        self.push(t, needs, Op::GatherPixels { input, coords: coords.to_vec() })
    }

    /// Select rows (duplicates allowed): `[n, d] -> [len(rows), d]`.
    pub fn gather_rows(&mut self, input: Var, rows: &[usize]) -> Var {
        let (n, d) = (self.value(input).shape[0], self.value(input).shape[1]);
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            assert!(r < n, "gather_rows: row out of range");
            data.extend_from_slice(&self.value(input).data[r * d..(r + 1) * d]);
        }
        let t = Tensor::from_vec(&[rows.len(), d], data);
        let needs = self.needs(input);
        self.push(t, needs, Op::GatherRows { input, rows: rows.to_vec() })
    }

    /// Pick one column per row: `[n, k] -> [n]`.
    pub fn select_per_row(&mut self, input: Var, cols: &[usize]) -> Var {
        let (n, k) = (self.value(input).shape[0], self.value(input).shape[1]);
        assert_eq!(cols.len(), n, "select_per_row: one column per row");
        let data = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                assert!(c < k, "select_per_row: column out of range");
                self.value(input).data[i * k + c]
            })
            .collect();
        let t = Tensor::from_vec(&[n], data);
        let needs = self.needs(input);
        self.push(t, needs, Op::SelectPerRow { input, cols: cols.to_vec() })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (n, k) = (self.value(a).shape[0], self.value(a).shape[1]);
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            softmax_row(&self.value(a).data[i * k..(i + 1) * k], &mut out[i * k..(i + 1) * k]);
        }
        let t = Tensor::from_vec(&[n, k], out);
        let needs = self.needs(a);
        self.push(t, needs, Op::SoftmaxRows(a))
    }

    /// Weighted-mean softmax cross-entropy over rows:
    /// `sum_i w_i * (logsumexp(x_i) - x_i[t_i]) / sum_i w_i`.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let (n, k) = (self.value(logits).shape[0], self.value(logits).shape[1]);
        assert_eq!(targets.len(), n, "cross_entropy: one target per row");
        assert_eq!(weights.len(), n, "cross_entropy: one weight per row");
        let wsum: f64 = weights.iter().sum();
        assert!(wsum > 0.0, "cross_entropy: weights must sum positive");
        let mut total = 0.0;
        for i in 0..n {
            let row = &self.value(logits).data[i * k..(i + 1) * k];
            assert!(targets[i] < k, "cross_entropy: target out of range");
            total += weights[i] * (log_sum_exp(row) - row[targets[i]]);
        }
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(total / wsum),
            needs,
            Op::CrossEntropyMean { logits, targets: targets.to_vec(), weights: weights.to_vec() },
        )
    }

    /// Mean binary cross-entropy with logits against constant targets.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: &[f64]) -> Var {
        let n = self.value(logits).numel();
        assert_eq!(targets.len(), n, "bce: target length mismatch");
        let mut total = 0.0;
        for (&x, &t) in self.value(logits).data.iter().zip(targets) {
            total += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        }
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(total / n as f64),
            needs,
            Op::BceWithLogitsMean { logits, targets: targets.to_vec() },
        )
    }

    /// Pairwise cosine similarity `[n, d] x [m, d] -> [n, m]`.
    /// Errors on zero-norm rows (degenerate cosine).
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = cosine_forward(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, needs, Op::CosineRows { a, b }))
    }

    /// Cosine similarity against a constant right-hand side (no gradient to `b`).
    pub fn cosine_rows_const(&mut self, a: Var, b: Tensor) -> Result<Var> {
        let out = cosine_forward(self.value(a), &b)?;
        let needs = self.needs(a);
        Ok(self.push(out, needs, Op::CosineRowsConst { a, b }))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum: empty input");
        let mut total = 0.0;
        for &(v, c) in terms {
            assert_eq!(self.value(v).numel(), 1, "weighted_sum: inputs must be scalars");
            total += c * self.value(v).item();
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(Tensor::scalar(total), needs, Op::WeightedSum(terms.to_vec()))
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients;
    /// only nodes reachable from gradient-carrying leaves receive one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward: loss must be scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, &g.data, &g.shape);
                    self.accumulate(&mut grads, *b, &g.data, &g.shape);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, &g.data, &g.shape);
                    let neg: Vec<f64> = g.data.iter().map(|x| -x).collect();
                    self.accumulate(&mut grads, *b, &neg, &g.shape);
                }
                Op::MulElem(a, b) => {
                    let da: Vec<f64> =
                        g.data.iter().zip(&self.value(*b).data).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> =
                        g.data.iter().zip(&self.value(*a).data).map(|(x, y)| x * y).collect();
                    self.accumulate(&mut grads, *a, &da, &g.shape);
                    self.accumulate(&mut grads, *b, &db, &g.shape);
                }
                Op::DivElem(a, b) => {
                    let bv = &self.value(*b).data;
                    let av = &self.value(*a).data;
                    let da: Vec<f64> = g.data.iter().zip(bv).map(|(x, y)| x / y).collect();
                    let db: Vec<f64> = g
                        .data
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(x, (a, b))| -x * a / (b * b))
                        .collect();
                    self.accumulate(&mut grads, *a, &da, &g.shape);
                    self.accumulate(&mut grads, *b, &db, &g.shape);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.data.iter().map(|x| x * c).collect();
                    self.accumulate(&mut grads, *a, &da, &g.shape);
                }
                Op::AddConst(a) => {
                    self.accumulate(&mut grads, *a, &g.data, &g.shape);
                }
                Op::AddRowVec(a, b) => {
                    let (n, d) = (g.shape[0], g.shape[1]);
                    self.accumulate(&mut grads, *a, &g.data, &g.shape);
                    let mut db = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            db[j] += g.data[i * d + j];
                        }
                    }
                    self.accumulate(&mut grads, *b, &db, &[d]);
                }
                Op::Relu(a) => {
                    let da: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&self.value(*a).data)
                        .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, *a, &da, &g.shape);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[id].value.data;
                    let da: Vec<f64> =
                        g.data.iter().zip(y).map(|(x, &s)| x * s * (1.0 - s)).collect();
                    self.accumulate(&mut grads, *a, &da, &g.shape);
                }
                Op::Log(a) => {
                    let da: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&self.value(*a).data)
                        .map(|(x, v)| x / v)
                        .collect();
                    self.accumulate(&mut grads, *a, &da, &g.shape);
                }
                Op::Matmul { a, b, trans_b } => {
                    let (m, k) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                    let n = g.shape[1];
                    if self.needs(*a) {
                        let mut da = vec![0.0; m * k];
                        if *trans_b {
                            // y = a b^T, b: [n, k] => da = g b
                            gemm(&g.data, &self.value(*b).data, m, n, k, &mut da);
                        } else {
                            // da = g b^T
                            gemm_nt(&g.data, &self.value(*b).data, m, n, k, &mut da);
                        }
                        self.accumulate(&mut grads, *a, &da, &[m, k]);
                    }
                    if self.needs(*b) {
                        if *trans_b {
                            // db = g^T a -> [n, k]
                            let mut db = vec![0.0; n * k];
                            gemm_tn(&g.data, &self.value(*a).data, m, n, k, &mut db);
                            self.accumulate(&mut grads, *b, &db, &[n, k]);
                        } else {
                            // db = a^T g -> [k, n]
                            let mut db = vec![0.0; k * n];
                            gemm_tn(&self.value(*a).data, &g.data, m, k, n, &mut db);
                            self.accumulate(&mut grads, *b, &db, &[k, n]);
                        }
                    }
                }
                Op::Conv2d { input, weight, bias, stride, pad } => {
                    let ish = &self.value(*input).shape;
                    let wsh = &self.value(*weight).shape;
                    let (ci, h, w) = (ish[0], ish[1], ish[2]);
                    let (co, kh, kw) = (wsh[0], wsh[2], wsh[3]);
                    let (oh, ow) = (g.shape[1], g.shape[2]);
                    let ckk = ci * kh * kw;
                    let cols = oh * ow;
                    if self.needs(*bias) {
                        let mut db = vec![0.0; co];
                        for c in 0..co {
                            db[c] = g.data[c * cols..(c + 1) * cols].iter().sum();
                        }
                        self.accumulate(&mut grads, *bias, &db, &[co]);
                    }
                    if self.needs(*weight) {
                        let col =
                            im2col(&self.value(*input).data, ci, h, w, kh, kw, *stride, *pad);
                        let mut dw = vec![0.0; co * ckk];
                        gemm_nt(&g.data, &col, co, cols, ckk, &mut dw);
                        self.accumulate(&mut grads, *weight, &dw, &[co, ci, kh, kw]);
                    }
                    if self.needs(*input) {
                        // dcol = W^T g, then scatter back to the input grid
                        let mut dcol = vec![0.0; ckk * cols];
                        gemm_tn(&self.value(*weight).data, &g.data, co, ckk, cols, &mut dcol);
                        let mut dx = vec![0.0; ci * h * w];
                        col2im_add(&dcol, ci, h, w, kh, kw, *stride, *pad, &mut dx);
                        self.accumulate(&mut grads, *input, &dx, &[ci, h, w]);
                    }
                }
                Op::BilinearUp { input, factor } => {
                    let sh = &self.value(*input).shape;
                    let (c, h, w) = (sh[0], sh[1], sh[2]);
                    let (oh, ow) = (g.shape[1], g.shape[2]);
                    let ay = bilinear_axis(oh, h, *factor);
                    let ax = bilinear_axis(ow, w, *factor);
                    let mut dx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
                        let src = &g.data[ch * oh * ow..(ch + 1) * oh * ow];
                        for (oy, &(y0, y1, wy)) in ay.iter().enumerate() {
                            for (ox, &(x0, x1, wx)) in ax.iter().enumerate() {
                                let gv = src[oy * ow + ox];
                                dst[y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * gv;
                                dst[y0 * w + x1] += (1.0 - wy) * wx * gv;
                                dst[y1 * w + x0] += wy * (1.0 - wx) * gv;
                                dst[y1 * w + x1] += wy * wx * gv;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *input, &dx, &[c, h, w]);
                }
                Op::Reshape(a) => {
                    let sh = self.value(*a).shape.clone();
                    self.accumulate(&mut grads, *a, &g.data, &sh);
                }
                Op::SumAll(a) => {
                    let gv = g.item();
                    let da = vec![gv; self.value(*a).numel()];
                    let sh = self.value(*a).shape.clone();
                    self.accumulate(&mut grads, *a, &da, &sh);
                }
                Op::MeanAll(a) => {
                    let n = self.value(*a).numel();
                    let gv = g.item() / n as f64;
                    let da = vec![gv; n];
                    let sh = self.value(*a).shape.clone();
                    self.accumulate(&mut grads, *a, &da, &sh);
                }
                Op::MeanRows(a) => {
                    let (n, d) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                    let mut da = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..d {
                            da[i * d + j] = g.data[j] / n as f64;
                        }
                    }
                    self.accumulate(&mut grads, *a, &da, &[n, d]);
                }
                Op::StackRows(rows) => {
                    let d = g.shape[1];
                    for (i, &r) in rows.iter().enumerate() {
                        let sh = self.value(r).shape.clone();
                        self.accumulate(&mut grads, r, &g.data[i * d..(i + 1) * d], &sh);
                    }
                }
                Op::ConcatRows(parts) => {
                    let d = g.shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).shape[0];
                        self.accumulate(
                            &mut grads,
                            p,
                            &g.data[offset * d..(offset + rows) * d],
                            &[rows, d],
                        );
                        offset += rows;
                    }
                }
                Op::GatherPixels { input, coords } => {
                    let sh = &self.value(*input).shape;
                    let (c, h, w) = (sh[0], sh[1], sh[2]);
                    let mut dx = vec![0.0; c * h * w];
                    for (r, &(i, j)) in coords.iter().enumerate() {
                        for ch in 0..c {
                            dx[ch * h * w + i * w + j] += g.data[r * c + ch];
                        }
                    }
                    self.accumulate(&mut grads, *input, &dx, &[c, h, w]);
                }
                Op::GatherRows { input, rows } => {
                    let (n, d) = (self.value(*input).shape[0], self.value(*input).shape[1]);
                    let mut dx = vec![0.0; n * d];
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            dx[r * d + j] += g.data[i * d + j];
                        }
                    }
                    self.accumulate(&mut grads, *input, &dx, &[n, d]);
                }
                Op::SelectPerRow { input, cols } => {
                    let (n, k) = (self.value(*input).shape[0], self.value(*input).shape[1]);
                    let mut dx = vec![0.0; n * k];
                    for (i, &c) in cols.iter().enumerate() {
                        dx[i * k + c] += g.data[i];
                    }
                    self.accumulate(&mut grads, *input, &dx, &[n, k]);
                }
                Op::SoftmaxRows(a) => {
                    let (n, k) = (g.shape[0], g.shape[1]);
                    let y = &self.nodes[id].value.data;
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        let dot: f64 =
                            (0..k).map(|j| g.data[i * k + j] * y[i * k + j]).sum();
                        for j in 0..k {
                            da[i * k + j] = y[i * k + j] * (g.data[i * k + j] - dot);
                        }
                    }
                    self.accumulate(&mut grads, *a, &da, &[n, k]);
                }
                Op::CrossEntropyMean { logits, targets, weights } => {
                    let (n, k) = (self.value(*logits).shape[0], self.value(*logits).shape[1]);
                    let wsum: f64 = weights.iter().sum();
                    let gv = g.item();
                    let mut da = vec![0.0; n * k];
                    let mut p = vec![0.0; k];
                    for i in 0..n {
                        softmax_row(&self.value(*logits).data[i * k..(i + 1) * k], &mut p);
                        let wi = weights[i] / wsum * gv;
                        for j in 0..k {
                            da[i * k + j] = wi * (p[j] - if j == targets[i] { 1.0 } else { 0.0 });
                        }
                    }
                    self.accumulate(&mut grads, *logits, &da, &[n, k]);
                }
                Op::BceWithLogitsMean { logits, targets } => {
                    let n = self.value(*logits).numel();
                    let gv = g.item() / n as f64;
                    let da: Vec<f64> = self
                        .value(*logits)
                        .data
                        .iter()
                        .zip(targets)
                        .map(|(&x, &t)| {
                            let s = if x >= 0.0 {
                                1.0 / (1.0 + (-x).exp())
                            } else {
                                let e = x.exp();
                                e / (1.0 + e)
                            };
                            gv * (s - t)
                        })
                        .collect();
                    let sh = self.value(*logits).shape.clone();
                    self.accumulate(&mut grads, *logits, &da, &sh);
                }
                Op::CosineRows { a, b } => {
                    let y = &self.nodes[id].value;
                    let (n, d) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                    let m = self.value(*b).shape[0];
                    let mut da = vec![0.0; n * d];
                    let mut db = vec![0.0; m * d];
                    cosine_backward(
                        &g,
                        y,
                        self.value(*a),
                        self.value(*b),
                        &mut da,
                        Some(&mut db),
                    );
                    self.accumulate(&mut grads, *a, &da, &[n, d]);
                    self.accumulate(&mut grads, *b, &db, &[m, d]);
                }
                Op::CosineRowsConst { a, b } => {
                    let y = &self.nodes[id].value;
                    let (n, d) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                    let mut da = vec![0.0; n * d];
                    cosine_backward(&g, y, self.value(*a), b, &mut da, None);
                    self.accumulate(&mut grads, *a, &da, &[n, d]);
                }
                Op::WeightedSum(terms) => {
                    let gv = g.item();
                    for &(v, c) in terms {
                        self.accumulate(&mut grads, v, &[gv * c], &[1]);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: &[f64], shape: &[usize]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                debug_assert_eq!(t.data.len(), delta.len());
                for (a, b) in t.data.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => {
                grads[v.0] = Some(Tensor::from_vec(shape, delta.to_vec()));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of a scalar function of a flat vector.
    fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            out.push((fp - fm) / (2.0 * h));
        }
        out
    }

    // floor keeps FD roundoff noise on near-zero gradients from dominating
    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
    }

    #[test]
    fn composite_elementwise_gradients_match_fd() {
        let x0 = vec![0.3, -0.7, 1.2, 0.05];
        let mut f = |x: &[f64]| {
            let mut tape = Tape::new();
            let v = tape.leaf(Tensor::from_vec(&[4], x.to_vec()));
            let s = tape.sigmoid(v);
            let r = tape.relu(v);
            let m = tape.mul_elem(s, r);
            let sc = tape.scale(m, 1.7);
            let l = tape.mean_all(sc);
            tape.value(l).item()
        };
        let fd = finite_diff(&mut f, &x0, 1e-5);

        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::from_vec(&[4], x0.clone()));
        let s = tape.sigmoid(v);
        let r = tape.relu(v);
        let m = tape.mul_elem(s, r);
        let sc = tape.scale(m, 1.7);
        let l = tape.mean_all(sc);
        let grads = tape.backward(l).unwrap();
        let a = grads.get(v).unwrap();
        for i in 0..4 {
            assert!(rel_err(a.data[i], fd[i]) < 1e-5, "coord {i}: {} vs {}", a.data[i], fd[i]);
        }
    }

    #[test]
    fn matmul_conv_upsample_gradients_match_fd() {
        // tiny conv + upsample + bce pipeline exercised end to end
        let ci = 2;
        let (h, w) = (4, 4);
        let co = 3;
        let wlen = co * ci * 9;
        let xlen = ci * h * w;
        let mut params = Vec::new();
        let mut rng = 1234u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        for _ in 0..(wlen + co + xlen) {
            params.push(0.3 * next());
        }
        let targets: Vec<f64> = (0..co * h * w * 4).map(|i| ((i % 3) == 0) as u64 as f64).collect();

        let mut f = |p: &[f64]| {
            let mut tape = Tape::new();
            let wv = tape.leaf(Tensor::from_vec(&[co, ci, 3, 3], p[..wlen].to_vec()));
            let bv = tape.leaf(Tensor::from_vec(&[co], p[wlen..wlen + co].to_vec()));
            let xv = tape.leaf(Tensor::from_vec(&[ci, h, w], p[wlen + co..].to_vec()));
            let y = tape.conv2d(xv, wv, bv, 2, 1);
            let up = tape.bilinear_up(y, 4);
            let flat = tape.reshape(up, &[co * h * w * 4]);
            let l = tape.bce_with_logits_mean(flat, &targets);
            tape.value(l).item()
        };
        let fd = finite_diff(&mut f, &params, 1e-5);

        let mut tape = Tape::new();
        let wv = tape.leaf(Tensor::from_vec(&[co, ci, 3, 3], params[..wlen].to_vec()));
        let bv = tape.leaf(Tensor::from_vec(&[co], params[wlen..wlen + co].to_vec()));
        let xv = tape.leaf(Tensor::from_vec(&[ci, h, w], params[wlen + co..].to_vec()));
        let y = tape.conv2d(xv, wv, bv, 2, 1);
        let up = tape.bilinear_up(y, 4);
        let flat = tape.reshape(up, &[co * h * w * 4]);
        let l = tape.bce_with_logits_mean(flat, &targets);
        let grads = tape.backward(l).unwrap();

        let mut analytic = Vec::new();
        analytic.extend_from_slice(&grads.get(wv).unwrap().data);
        analytic.extend_from_slice(&grads.get(bv).unwrap().data);
        analytic.extend_from_slice(&grads.get(xv).unwrap().data);
        let bad = analytic
            .iter()
            .zip(&fd)
            .filter(|(a, f)| rel_err(**a, **f) > 1e-4)
            .count();
        assert_eq!(bad, 0, "{bad} coordinates disagree with finite differences");
    }

    #[test]
    fn cosine_and_cross_entropy_gradients_match_fd() {
        let n = 3;
        let m = 2;
        let d = 4;
        let a0: Vec<f64> = (0..n * d).map(|i| 0.2 + 0.13 * i as f64).collect();
        let b0: Vec<f64> = (0..m * d).map(|i| -0.4 + 0.21 * i as f64).collect();
        let targets = vec![0usize, 1, 0];
        let weights = vec![1.0; 3];

        let mut f = |p: &[f64]| {
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::from_vec(&[n, d], p[..n * d].to_vec()));
            let b = tape.leaf(Tensor::from_vec(&[m, d], p[n * d..].to_vec()));
            let cos = tape.cosine_rows(a, b).unwrap();
            let scaled = tape.scale(cos, 1.0 / 0.07);
            let l = tape.cross_entropy_mean(scaled, &targets, &weights);
            tape.value(l).item()
        };
        let mut p0 = a0.clone();
        p0.extend_from_slice(&b0);
        let fd = finite_diff(&mut f, &p0, 1e-5);

        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[n, d], a0));
        let b = tape.leaf(Tensor::from_vec(&[m, d], b0));
        let cos = tape.cosine_rows(a, b).unwrap();
        let scaled = tape.scale(cos, 1.0 / 0.07);
        let l = tape.cross_entropy_mean(scaled, &targets, &weights);
        let grads = tape.backward(l).unwrap();
        let mut analytic = grads.get(a).unwrap().data.clone();
        analytic.extend_from_slice(&grads.get(b).unwrap().data);
        for (i, (av, fv)) in analytic.iter().zip(&fd).enumerate() {
            assert!(rel_err(*av, *fv) < 1e-4, "coord {i}: {av} vs {fv}");
        }
    }

    #[test]
    fn gather_and_pool_route_gradients() {
        // two pixels pooled into a prototype: each support pixel gets grad / |support|
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::from_vec(
            &[2, 2, 2],
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        ));
        let gathered = tape.gather_pixels(f, &[(0, 0), (0, 1)]);
        let proto = tape.mean_rows(gathered);
        let l = tape.sum_all(proto);
        let grads = tape.backward(l).unwrap();
        let df = grads.get(f).unwrap();
        assert_eq!(df.data[0], 0.5); // channel 0 at (0,0)
        assert_eq!(df.data[1], 0.5); // channel 0 at (0,1)
        assert_eq!(df.data[2], 0.0);
        assert_eq!(df.data[4], 0.5); // channel 1 at (0,0)
    }

    #[test]
    fn zero_norm_cosine_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]));
        let b = tape.leaf(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]));
        assert!(tape.cosine_rows(a, b).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let c = tape.constant(Tensor::from_vec(&[2], vec![3.0, 4.0]));
        let m = tape.mul_elem(a, c);
        let l = tape.sum_all(m);
        let grads = tape.backward(l).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(a).unwrap().data, vec![3.0, 4.0]);
    }
}
