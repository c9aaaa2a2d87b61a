//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! accumulates vector-Jacobian products into a [`Gradients`] table.
//!
//! Shape errors inside a graph are programming errors and panic; the public
//! operations of the crate validate user-facing inputs before building graphs.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;


use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    SmoothAbs(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    ChannelAffine(Var, Var, Var),
    ChannelBias(Var, Var),
    SoftmaxRows(Var),
    Sum(Var),
    WeightedL1 { a: Var, b: Var, slope: Vec<f64> },
    Reshape(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    StackRows(Vec<Var>),
    Row(Var, usize),
    MeanRows(Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, stride: usize, pad: usize },
    AvgPool(Var, usize),
    ResizeBilinear(Var),
    Gaussians { coords: Var, sigma: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Accumulated gradients, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn data(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [m, n] => (*m, *n),
        s => panic!("expected a matrix, got shape {s:?}"),
    }
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    match t.shape() {
        [c, h, w] => (*c, *h, *w),
        s => panic!("expected a [C,H,W] tensor, got shape {s:?}"),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Bilinear sampling taps (half-pixel centers) for resizing `src` samples to `dst`.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let t = (s - i0 as f64).clamp(0.0, 1.0);
            (i0, i1, t)
        })
        .collect()
}

pub(crate) fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    fn unary(&self, x: Var, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var {
        let value = f(&self.nodes.borrow()[x.0].value);
        let ng = self.needs(&[x]);
        self.push(value, op, ng)
    }

    fn binary(&self, a: Var, b: Var, op: Op, f: impl Fn(&Tensor, &Tensor) -> Tensor) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)
        };
        let ng = self.needs(&[a, b]);
        self.push(value, op, ng)
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn zip(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape(), data).unwrap()
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| Self::zip(x, y, "add", |p, q| p + q))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| Self::zip(x, y, "sub", |p, q| p - q))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| Self::zip(x, y, "mul", |p, q| p * q))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |t| t.map(|v| v * c))
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |t| t.map(|v| v + c))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |t| t.map(|v| v.tanh()))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |t| t.map(sigmoid))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |t| t.map(|v| v.exp()))
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |t| t.map(|v| v * v))
    }

    /// `sqrt(x^2 + eps^2) - eps`: a smooth stand-in for `|x|` that is exactly
    /// zero at `x = 0`.
    pub fn smooth_abs(&self, x: Var, eps: f64) -> Var {
        let e2 = eps * eps;
        self.unary(x, Op::SmoothAbs(x, eps), |t| t.map(|v| (v * v + e2).sqrt() - eps))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::MatMul(a, b), |x, y| {
            let (m, k) = dims2(x);
            let (k2, n) = dims2(y);
            assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
            Tensor::new(&[m, n], matmul(x.data(), y.data(), m, k, n)).unwrap()
        })
    }

    pub fn transpose(&self, x: Var) -> Var {
        self.unary(x, Op::Transpose(x), |t| {
            let (m, n) = dims2(t);
            Tensor::new(&[n, m], transpose(t.data(), m, n)).unwrap()
        })
    }

    /// Adds a length-`n` row vector to every row of an `[m,n]` matrix.
    pub fn add_row(&self, x: Var, row: Var) -> Var {
        self.binary(x, row, Op::AddRow(x, row), |a, r| {
            let (m, n) = dims2(a);
            assert_eq!(r.len(), n, "add_row width");
            let mut out = a.data().to_vec();
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] += r.data()[j];
                }
            }
            Tensor::new(&[m, n], out).unwrap()
        })
    }

    /// `y[c,..] = x[c,..] * scale[c] + shift[c]` for `x` with leading channel axis.
    pub fn channel_affine(&self, x: Var, scale: Var, shift: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (xt, s, b) = (&nodes[x.0].value, &nodes[scale.0].value, &nodes[shift.0].value);
            let c = xt.shape()[0];
            assert!(s.len() == c && b.len() == c, "channel_affine needs {c} channels");
            let plane = xt.len() / c;
            let mut out = xt.data().to_vec();
            for ch in 0..c {
                for v in &mut out[ch * plane..(ch + 1) * plane] {
                    *v = *v * s.data()[ch] + b.data()[ch];
                }
            }
            Tensor::new(xt.shape(), out).unwrap()
        };
        let ng = self.needs(&[x, scale, shift]);
        self.push(value, Op::ChannelAffine(x, scale, shift), ng)
    }

    pub fn channel_bias(&self, x: Var, bias: Var) -> Var {
        self.binary(x, bias, Op::ChannelBias(x, bias), |xt, b| {
            let c = xt.shape()[0];
            assert_eq!(b.len(), c, "channel_bias needs {c} channels");
            let plane = xt.len() / c;
            let mut out = xt.data().to_vec();
            for ch in 0..c {
                for v in &mut out[ch * plane..(ch + 1) * plane] {
                    *v += b.data()[ch];
                }
            }
            Tensor::new(xt.shape(), out).unwrap()
        })
    }

    pub fn softmax_rows(&self, x: Var) -> Var {
        self.unary(x, Op::SoftmaxRows(x), |t| {
            let (m, n) = dims2(t);
            let mut out = t.data().to_vec();
            for row in out.chunks_mut(n).take(m) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            Tensor::new(&[m, n], out).unwrap()
        })
    }

    pub fn sum(&self, x: Var) -> Var {
        self.unary(x, Op::Sum(x), |t| Tensor::scalar(t.sum()))
    }

    /// `sum_k w_k sum_{i in block k} smooth_abs(a_i - b_i)`, where the inputs
    /// are split into `weights.len()` equal contiguous blocks.
    pub fn weighted_l1(&self, a: Var, b: Var, weights: &[f64], eps: f64) -> Var {
        let (total, slope) = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(x.shape(), y.shape(), "weighted_l1: shape mismatch");
            assert!(!weights.is_empty() && x.len() % weights.len() == 0, "weighted_l1: block count");
            let m = x.len() / weights.len();
            let e2 = eps * eps;
            let mut total = 0.0;
            let mut slope = vec![0.0; x.len()];
            for (k, wk) in weights.iter().enumerate() {
                if *wk == 0.0 {
                    continue;
                }
                let mut s = 0.0;
                for i in k * m..(k + 1) * m {
                    let d = x.data()[i] - y.data()[i];
                    let r = (d * d + e2).sqrt();
                    s += r - eps;
                    slope[i] = wk * d / r;
                }
                total += wk * s;
            }
            (total, slope)
        };
        let ng = self.needs(&[a, b]);
        self.push(Tensor::scalar(total), Op::WeightedL1 { a, b, slope }, ng)
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.with_value(x, |t| t.len()) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_squares(&self, x: Var) -> Var {
        let sq = self.square(x);
        self.sum(sq)
    }

    /// Mean squared difference.
    pub fn mse(&self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean(sq)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        self.unary(x, Op::Reshape(x), |t| t.clone().reshape(shape).expect("reshape"))
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::ConcatCols(a, b), |x, y| {
            let (m, p) = dims2(x);
            let (m2, q) = dims2(y);
            assert_eq!(m, m2, "concat_cols rows");
            let mut out = Vec::with_capacity(m * (p + q));
            for i in 0..m {
                out.extend_from_slice(&x.data()[i * p..(i + 1) * p]);
                out.extend_from_slice(&y.data()[i * q..(i + 1) * q]);
            }
            Tensor::new(&[m, p + q], out).unwrap()
        })
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        self.unary(x, Op::SliceCols(x, start), |t| {
            let (m, n) = dims2(t);
            assert!(start + len <= n, "slice_cols out of range");
            let mut out = Vec::with_capacity(m * len);
            for i in 0..m {
                out.extend_from_slice(&t.data()[i * n + start..i * n + start + len]);
            }
            Tensor::new(&[m, len], out).unwrap()
        })
    }

    /// Stacks `[1,n]` (or length-`n`) rows into an `[m,n]` matrix.
    pub fn stack_rows(&self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let n = nodes[rows[0].0].value.len();
            let mut out = Vec::with_capacity(rows.len() * n);
            for r in rows {
                let t = &nodes[r.0].value;
                assert_eq!(t.len(), n, "stack_rows width");
                out.extend_from_slice(t.data());
            }
            Tensor::new(&[rows.len(), n], out).unwrap()
        };
        let ng = self.needs(rows);
        self.push(value, Op::StackRows(rows.to_vec()), ng)
    }

    pub fn row(&self, x: Var, i: usize) -> Var {
        self.unary(x, Op::Row(x, i), |t| {
            let (_, n) = dims2(t);
            Tensor::new(&[1, n], t.data()[i * n..(i + 1) * n].to_vec()).unwrap()
        })
    }

    /// Column means of an `[m,n]` matrix as a `[1,n]` row.
    pub fn mean_rows(&self, x: Var) -> Var {
        self.unary(x, Op::MeanRows(x), |t| {
            let (m, n) = dims2(t);
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += t.data()[i * n + j];
                }
            }
            for v in &mut out {
                *v /= m as f64;
            }
            Tensor::new(&[1, n], out).unwrap()
        })
    }

    /// Cross-correlation of `x: [Cin,H,W]` with `w: [Cout,Cin,k,k]`, zero padding.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        self.binary(x, w, Op::Conv2d { x, w, stride, pad }, |xt, wt| {
            let (cin, h, wd) = dims3(xt);
            let (cout, k) = match wt.shape() {
                [co, ci, k1, k2] if *ci == cin && k1 == k2 => (*co, *k1),
                s => panic!("conv2d weight {s:?} for {cin} input channels"),
            };
            let (oh, ow) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
            let (xd, wdat) = (xt.data(), wt.data());
            let mut out = vec![0.0; cout * oh * ow];
            for co in 0..cout {
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = wdat[((co * cin + ci) * k + ky) * k + kx];
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = &xd[(ci * h + iy as usize) * wd..][..wd];
                                let orow = &mut out[(co * oh + oy) * ow..][..ow];
                                for (ox, o) in orow.iter_mut().enumerate() {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix >= 0 && ix < wd as isize {
                                        *o += wv * xrow[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Tensor::new(&[cout, oh, ow], out).unwrap()
        })
    }

    /// Transposed convolution of `x: [Cin,H,W]` with `w: [Cin,Cout,k,k]`.
    /// Output side is `(H-1)*stride - 2*pad + k`.
    pub fn conv_transpose2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        self.binary(x, w, Op::ConvTranspose2d { x, w, stride, pad }, |xt, wt| {
            let (cin, h, wd) = dims3(xt);
            let (cout, k) = match wt.shape() {
                [ci, co, k1, k2] if *ci == cin && k1 == k2 => (*co, *k1),
                s => panic!("conv_transpose2d weight {s:?} for {cin} input channels"),
            };
            let oh = (h - 1) * stride + k - 2 * pad;
            let ow = (wd - 1) * stride + k - 2 * pad;
            let mut out = vec![0.0; cout * oh * ow];
            let (xd, wdat) = (xt.data(), wt.data());
            for ci in 0..cin {
                for co in 0..cout {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = wdat[((ci * cout + co) * k + ky) * k + kx];
                            for iy in 0..h {
                                let oy = (iy * stride + ky) as isize - pad as isize;
                                if oy < 0 || oy >= oh as isize {
                                    continue;
                                }
                                let xrow = &xd[(ci * h + iy) * wd..][..wd];
                                let orow = &mut out[(co * oh + oy as usize) * ow..][..ow];
                                for (ix, &xv) in xrow.iter().enumerate() {
                                    let ox = (ix * stride + kx) as isize - pad as isize;
                                    if ox >= 0 && ox < ow as isize {
                                        orow[ox as usize] += wv * xv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Tensor::new(&[cout, oh, ow], out).unwrap()
        })
    }

    /// Non-overlapping `k x k` average pooling over `[C,H,W]`.
    pub fn avg_pool(&self, x: Var, k: usize) -> Var {
        self.unary(x, Op::AvgPool(x, k), |t| {
            let (c, h, w) = dims3(t);
            assert!(h % k == 0 && w % k == 0, "avg_pool {k} on {h}x{w}");
            let (oh, ow) = (h / k, w / k);
            let mut out = vec![0.0; c * oh * ow];
            let norm = 1.0 / (k * k) as f64;
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        out[(ch * oh + y / k) * ow + xx / k] += t.data()[(ch * h + y) * w + xx] * norm;
                    }
                }
            }
            Tensor::new(&[c, oh, ow], out).unwrap()
        })
    }

    /// Bilinear resize of `[C,H,W]` using half-pixel centers.
    pub fn resize_bilinear(&self, x: Var, out_h: usize, out_w: usize) -> Var {
        self.unary(x, Op::ResizeBilinear(x), |t| {
            let (c, h, w) = dims3(t);
            let ty = bilinear_taps(h, out_h);
            let tx = bilinear_taps(w, out_w);
            let d = t.data();
            let mut out = vec![0.0; c * out_h * out_w];
            for ch in 0..c {
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let p = |yy: usize, xx: usize| d[(ch * h + yy) * w + xx];
                        out[(ch * out_h + oy) * out_w + ox] = (1.0 - fy)
                            * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
                            + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
                    }
                }
            }
            Tensor::new(&[c, out_h, out_w], out).unwrap()
        })
    }

    /// Renders one unit-peak isotropic Gaussian per `[x,y]` row of `coords`
    /// (normalized coordinates) onto a `size x size` grid: output `[n,size,size]`.
    /// Pixel `(row i, col j)` sits at normalized `(j/size, i/size)`.
    pub fn gaussians(&self, coords: Var, size: usize, sigma: f64) -> Var {
        self.unary(coords, Op::Gaussians { coords, sigma }, |c| {
            let (n, two) = dims2(c);
            assert_eq!(two, 2, "gaussians expects [n,2] coordinates");
            let mut out = vec![0.0; n * size * size];
            let inv = 1.0 / (2.0 * sigma * sigma);
            let mut gx = vec![0.0; size];
            let mut gy = vec![0.0; size];
            for k in 0..n {
                let px = c.data()[2 * k] * size as f64;
                let py = c.data()[2 * k + 1] * size as f64;
                for j in 0..size {
                    let dx = j as f64 - px;
                    gx[j] = (-dx * dx * inv).exp();
                    let dy = j as f64 - py;
                    gy[j] = (-dy * dy * inv).exp();
                }
                let map = &mut out[k * size * size..(k + 1) * size * size];
                for i in 0..size {
                    for j in 0..size {
                        map[i * size + j] = gy[i] * gx[j];
                    }
                }
            }
            Tensor::new(&[n, size, size], out).unwrap()
        })
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, g: impl FnOnce(&mut [f64])) {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            g(slot);
        }

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *a, |g| g.iter_mut().zip(&gy).for_each(|(o, v)| *o += v));
                    acc(&mut grads, &nodes, *b, |g| g.iter_mut().zip(&gy).for_each(|(o, v)| *o += v));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *a, |g| g.iter_mut().zip(&gy).for_each(|(o, v)| *o += v));
                    acc(&mut grads, &nodes, *b, |g| g.iter_mut().zip(&gy).for_each(|(o, v)| *o -= v));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    acc(&mut grads, &nodes, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += gy[i] * bv[i];
                        }
                    });
                    acc(&mut grads, &nodes, *b, |g| {
                        for i in 0..g.len() {
                            g[i] += gy[i] * av[i];
                        }
                    });
                }
                Op::Scale(a, c) => {
                    acc(&mut grads, &nodes, *a, |g| g.iter_mut().zip(&gy).for_each(|(o, v)| *o += c * v));
                }
                Op::AddScalar(a) => {
                    acc(&mut grads, &nodes, *a, |g| g.iter_mut().zip(&gy).for_each(|(o, v)| *o += v));
                }
                Op::Tanh(a) => acc(&mut grads, &nodes, *a, |g| {
                    for i in 0..g.len() {
                        let t = y.data()[i];
                        g[i] += gy[i] * (1.0 - t * t);
                    }
                }),
                Op::Sigmoid(a) => acc(&mut grads, &nodes, *a, |g| {
                    for i in 0..g.len() {
                        let s = y.data()[i];
                        g[i] += gy[i] * s * (1.0 - s);
                    }
                }),
                Op::Exp(a) => acc(&mut grads, &nodes, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * y.data()[i];
                    }
                }),
                Op::Square(a) => {
                    let x = nodes[a.0].value.data();
                    acc(&mut grads, &nodes, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += gy[i] * 2.0 * x[i];
                        }
                    })
                }
                Op::SmoothAbs(a, eps) => {
                    let x = nodes[a.0].value.data();
                    acc(&mut grads, &nodes, *a, |g| {
                        for i in 0..g.len() {
                            g[i] += gy[i] * x[i] / (y.data()[i] + eps);
                        }
                    })
                }
                Op::MatMul(a, b) => {
                    let (at, bt) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = dims2(at);
                    let (_, n) = dims2(bt);
                    if nodes[a.0].needs_grad {
                        let btt = transpose(bt.data(), k, n);
                        let ga = matmul(&gy, &btt, m, n, k);
                        acc(&mut grads, &nodes, *a, |g| g.iter_mut().zip(&ga).for_each(|(o, v)| *o += v));
                    }
                    if nodes[b.0].needs_grad {
                        let att = transpose(at.data(), m, k);
                        let gb = matmul(&att, &gy, k, m, n);
                        acc(&mut grads, &nodes, *b, |g| g.iter_mut().zip(&gb).for_each(|(o, v)| *o += v));
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = dims2(y);
                    let gt = transpose(&gy, m, n);
                    acc(&mut grads, &nodes, *a, |g| g.iter_mut().zip(&gt).for_each(|(o, v)| *o += v));
                }
                Op::AddRow(a, r) => {
                    let (m, n) = dims2(y);
                    acc(&mut grads, &nodes, *a, |g| g.iter_mut().zip(&gy).for_each(|(o, v)| *o += v));
                    acc(&mut grads, &nodes, *r, |g| {
                        for i in 0..m {
                            for j in 0..n {
                                g[j] += gy[i * n + j];
                            }
                        }
                    });
                }
                Op::ChannelAffine(x, s, b) => {
                    let xt = &nodes[x.0].value;
                    let sv = nodes[s.0].value.data();
                    let c = xt.shape()[0];
                    let plane = xt.len() / c;
                    acc(&mut grads, &nodes, *x, |g| {
                        for ch in 0..c {
                            for i in ch * plane..(ch + 1) * plane {
                                g[i] += gy[i] * sv[ch];
                            }
                        }
                    });
                    acc(&mut grads, &nodes, *s, |g| {
                        for ch in 0..c {
                            for i in ch * plane..(ch + 1) * plane {
                                g[ch] += gy[i] * xt.data()[i];
                            }
                        }
                    });
                    acc(&mut grads, &nodes, *b, |g| {
                        for ch in 0..c {
                            g[ch] += gy[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
                        }
                    });
                }
                Op::ChannelBias(x, b) => {
                    let c = y.shape()[0];
                    let plane = y.len() / c;
                    acc(&mut grads, &nodes, *x, |g| g.iter_mut().zip(&gy).for_each(|(o, v)| *o += v));
                    acc(&mut grads, &nodes, *b, |g| {
                        for ch in 0..c {
                            g[ch] += gy[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
                        }
                    });
                }
                Op::SoftmaxRows(a) => {
                    let (m, n) = dims2(y);
                    acc(&mut grads, &nodes, *a, |g| {
                        for i in 0..m {
                            let yr = &y.data()[i * n..(i + 1) * n];
                            let gr = &gy[i * n..(i + 1) * n];
                            let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for j in 0..n {
                                g[i * n + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    let s = gy[0];
                    acc(&mut grads, &nodes, *a, |g| g.iter_mut().for_each(|o| *o += s));
                }
                Op::WeightedL1 { a, b, slope } => {
                    let s = gy[0];
                    acc(&mut grads, &nodes, *a, |g| g.iter_mut().zip(slope).for_each(|(o, v)| *o += s * v));
                    acc(&mut grads, &nodes, *b, |g| g.iter_mut().zip(slope).for_each(|(o, v)| *o -= s * v));
                }
                Op::Reshape(a) => {
                    acc(&mut grads, &nodes, *a, |g| g.iter_mut().zip(&gy).for_each(|(o, v)| *o += v));
                }
                Op::ConcatCols(a, b) => {
                    let (m, _) = dims2(y);
                    let p = nodes[a.0].value.shape()[1];
                    let q = nodes[b.0].value.shape()[1];
                    acc(&mut grads, &nodes, *a, |g| {
                        for i in 0..m {
                            for j in 0..p {
                                g[i * p + j] += gy[i * (p + q) + j];
                            }
                        }
                    });
                    acc(&mut grads, &nodes, *b, |g| {
                        for i in 0..m {
                            for j in 0..q {
                                g[i * q + j] += gy[i * (p + q) + p + j];
                            }
                        }
                    });
                }
                Op::SliceCols(a, start) => {
                    let (m, len) = dims2(y);
                    let n = nodes[a.0].value.shape()[1];
                    acc(&mut grads, &nodes, *a, |g| {
                        for i in 0..m {
                            for j in 0..len {
                                g[i * n + start + j] += gy[i * len + j];
                            }
                        }
                    });
                }
                Op::StackRows(rows) => {
                    let n = y.shape()[1];
                    for (i, r) in rows.iter().enumerate() {
                        acc(&mut grads, &nodes, *r, |g| {
                            g.iter_mut().zip(&gy[i * n..(i + 1) * n]).for_each(|(o, v)| *o += v)
                        });
                    }
                }
                Op::Row(a, i) => {
                    let n = y.len();
                    acc(&mut grads, &nodes, *a, |g| {
                        g[i * n..(i + 1) * n].iter_mut().zip(&gy).for_each(|(o, v)| *o += v)
                    });
                }
                Op::MeanRows(a) => {
                    let (m, n) = dims2(&nodes[a.0].value);
                    acc(&mut grads, &nodes, *a, |g| {
                        for i in 0..m {
                            for j in 0..n {
                                g[i * n + j] += gy[j] / m as f64;
                            }
                        }
                    });
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let (xt, wt) = (&nodes[x.0].value, &nodes[w.0].value);
                    let (cin, h, wd) = dims3(xt);
                    let (cout, oh, ow) = dims3(y);
                    let k = wt.shape()[2];
                    let (s, p) = (*stride as isize, *pad as isize);
                    let need_x = nodes[x.0].needs_grad;
                    let need_w = nodes[w.0].needs_grad;
                    let mut gx = if need_x { vec![0.0; xt.len()] } else { Vec::new() };
                    let mut gw = if need_w { vec![0.0; wt.len()] } else { Vec::new() };
                    for co in 0..cout {
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let widx = ((co * cin + ci) * k + ky) * k + kx;
                                    let wv = wt.data()[widx];
                                    let mut gsum = 0.0;
                                    for oy in 0..oh {
                                        let iy = oy as isize * s + ky as isize - p;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let base = (ci * h + iy as usize) * wd;
                                        let grow = &gy[(co * oh + oy) * ow..][..ow];
                                        for (ox, &gv) in grow.iter().enumerate() {
                                            let ix = ox as isize * s + kx as isize - p;
                                            if ix >= 0 && ix < wd as isize {
                                                let xi = base + ix as usize;
                                                if need_x {
                                                    gx[xi] += gv * wv;
                                                }
                                                gsum += gv * xt.data()[xi];
                                            }
                                        }
                                    }
                                    if need_w {
                                        gw[widx] += gsum;
                                    }
                                }
                            }
                        }
                    }
                    if need_x {
                        acc(&mut grads, &nodes, *x, |g| g.iter_mut().zip(&gx).for_each(|(o, v)| *o += v));
                    }
                    if need_w {
                        acc(&mut grads, &nodes, *w, |g| g.iter_mut().zip(&gw).for_each(|(o, v)| *o += v));
                    }
                }
                Op::ConvTranspose2d { x, w, stride, pad } => {
                    let (xt, wt) = (&nodes[x.0].value, &nodes[w.0].value);
                    let (cin, h, wd) = dims3(xt);
                    let (cout, oh, ow) = dims3(y);
                    let k = wt.shape()[2];
                    let (s, p) = (*stride as isize, *pad as isize);
                    let need_x = nodes[x.0].needs_grad;
                    let need_w = nodes[w.0].needs_grad;
                    let mut gx = if need_x { vec![0.0; xt.len()] } else { Vec::new() };
                    let mut gw = if need_w { vec![0.0; wt.len()] } else { Vec::new() };
                    for ci in 0..cin {
                        for co in 0..cout {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let widx = ((ci * cout + co) * k + ky) * k + kx;
                                    let wv = wt.data()[widx];
                                    let mut gsum = 0.0;
                                    for iy in 0..h {
                                        let oy = iy as isize * s + ky as isize - p;
                                        if oy < 0 || oy >= oh as isize {
                                            continue;
                                        }
                                        let grow = &gy[(co * oh + oy as usize) * ow..][..ow];
                                        let xbase = (ci * h + iy) * wd;
                                        for ix in 0..wd {
                                            let ox = ix as isize * s + kx as isize - p;
                                            if ox >= 0 && ox < ow as isize {
                                                let gv = grow[ox as usize];
                                                if need_x {
                                                    gx[xbase + ix] += gv * wv;
                                                }
                                                gsum += gv * xt.data()[xbase + ix];
                                            }
                                        }
                                    }
                                    if need_w {
                                        gw[widx] += gsum;
                                    }
                                }
                            }
                        }
                    }
                    if need_x {
                        acc(&mut grads, &nodes, *x, |g| g.iter_mut().zip(&gx).for_each(|(o, v)| *o += v));
                    }
                    if need_w {
                        acc(&mut grads, &nodes, *w, |g| g.iter_mut().zip(&gw).for_each(|(o, v)| *o += v));
                    }
                }
                Op::AvgPool(a, k) => {
                    let (c, h, w) = dims3(&nodes[a.0].value);
                    let (oh, ow) = (h / k, w / k);
                    let norm = 1.0 / (k * k) as f64;
                    acc(&mut grads, &nodes, *a, |g| {
                        for ch in 0..c {
                            for yy in 0..h {
                                for xx in 0..w {
                                    g[(ch * h + yy) * w + xx] += gy[(ch * oh + yy / k) * ow + xx / k] * norm;
                                }
                            }
                        }
                    });
                }
                Op::ResizeBilinear(a) => {
                    let (c, h, w) = dims3(&nodes[a.0].value);
                    let (_, out_h, out_w) = dims3(y);
                    let ty = bilinear_taps(h, out_h);
                    let tx = bilinear_taps(w, out_w);
                    acc(&mut grads, &nodes, *a, |g| {
                        for ch in 0..c {
                            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                    let gv = gy[(ch * out_h + oy) * out_w + ox];
                                    g[(ch * h + y0) * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                    g[(ch * h + y0) * w + x1] += gv * (1.0 - fy) * fx;
                                    g[(ch * h + y1) * w + x0] += gv * fy * (1.0 - fx);
                                    g[(ch * h + y1) * w + x1] += gv * fy * fx;
                                }
                            }
                        }
                    });
                }
                Op::Gaussians { coords, sigma } => {
                    let ct = &nodes[coords.0].value;
                    let (n, _, size) = dims3(y);
                    let s2 = sigma * sigma;
                    let scale = size as f64;
                    acc(&mut grads, &nodes, *coords, |g| {
                        for k in 0..n {
                            let px = ct.data()[2 * k] * scale;
                            let py = ct.data()[2 * k + 1] * scale;
                            let map = &y.data()[k * size * size..(k + 1) * size * size];
                            let gm = &gy[k * size * size..(k + 1) * size * size];
                            let (mut dx, mut dy) = (0.0, 0.0);
                            for i in 0..size {
                                for j in 0..size {
                                    let v = gm[i * size + j] * map[i * size + j];
                                    dx += v * (j as f64 - px);
                                    dy += v * (i as f64 - py);
                                }
                            }
                            g[2 * k] += dx / s2 * scale;
                            g[2 * k + 1] += dy / s2 * scale;
                        }
                    });
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Gradients { grads, shapes }
    }
}
