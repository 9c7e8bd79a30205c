//! Differentiable operations on [`Var`].
//!
//! Layout conventions: feature maps are `[C, H, W]`, token matrices are
//! `[rows, dim]`. Every op here has a matching finite-difference check in the
//! crate's gradient test suite.

use std::rc::Rc;
use std::sync::Arc;

use crate::graph::Var;
use crate::resample::ResamplePlan;
use crate::tensor::{gemm, Tensor};

fn same_graph(a: &Var<'_>, b: &Var<'_>) {
    debug_assert!(std::ptr::eq(a.graph, b.graph), "vars from different graphs");
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Output geometry of a 2-D convolution.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= kernel, "kernel larger than padded input");
    (size + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.oh * self.ow;
        let mut cols = vec![0.0; self.c * self.k * self.k * p];
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let p = self.oh * self.ow;
        let mut x = vec![0.0; self.c * self.h * self.w];
        for c in 0..self.c {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

fn softmax_row(x: &[f64], allowed: Option<&[bool]>, out: &mut [f64]) {
    let ok = |j: usize| allowed.is_none_or(|a| a[j]);
    let any = (0..x.len()).any(ok);
    let ok = |j: usize| !any || ok(j);
    let max = (0..x.len())
        .filter(|&j| ok(j))
        .map(|j| x[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for j in 0..x.len() {
        out[j] = if ok(j) { (x[j] - max).exp() } else { 0.0 };
        sum += out[j];
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}

/// `dx = y * (g - sum(g * y))` for one softmax row.
fn softmax_row_backward(y: &[f64], g: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for j in 0..y.len() {
        dx[j] = y[j] * (g[j] - dot);
    }
}

impl<'g> Var<'g> {
    // ---- elementwise -------------------------------------------------

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        same_graph(&self, &other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let out = a.zip_map(&b, |x, y| x + y);
        self.graph.op(out, &[self, other], |cx| {
            vec![Some(cx.grad.clone()), Some(cx.grad.clone())]
        })
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        same_graph(&self, &other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let out = a.zip_map(&b, |x, y| x - y);
        self.graph.op(out, &[self, other], |cx| {
            vec![Some(cx.grad.clone()), Some(cx.grad.scale(-1.0))]
        })
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        same_graph(&self, &other);
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = a.zip_map(&b, |x, y| x * y);
        self.graph.op(out, &[self, other], |cx| {
            let (a, b) = (&cx.inputs[0], &cx.inputs[1]);
            vec![
                cx.needs[0].then(|| cx.grad.zip_map(b, |g, y| g * y)),
                cx.needs[1].then(|| cx.grad.zip_map(a, |g, x| g * x)),
            ]
        })
    }

    pub fn scale(self, s: f64) -> Var<'g> {
        let out = self.value().scale(s);
        self.graph
            .op(out, &[self], move |cx| vec![Some(cx.grad.scale(s))])
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        let out = self.value().map(|v| v + s);
        self.graph
            .op(out, &[self], |cx| vec![Some(cx.grad.clone())])
    }

    pub fn relu(self) -> Var<'g> {
        let out = self.value().map(|v| v.max(0.0));
        self.graph.op(out, &[self], |cx| {
            vec![Some(cx.grad.zip_map(cx.output, |g, y| {
                if y > 0.0 {
                    g
                } else {
                    0.0
                }
            }))]
        })
    }

    pub fn sigmoid(self) -> Var<'g> {
        let out = self.value().map(sigmoid);
        self.graph.op(out, &[self], |cx| {
            vec![Some(cx.grad.zip_map(cx.output, |g, y| g * y * (1.0 - y)))]
        })
    }

    // ---- shape ---------------------------------------------------------

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let input_shape = self.shape();
        let out = (*self.value()).clone().reshape(shape);
        self.graph.op(out, &[self], move |cx| {
            vec![Some(cx.grad.clone().reshape(&input_shape))]
        })
    }

    pub fn transpose2(self) -> Var<'g> {
        let out = self.value().transpose2();
        self.graph
            .op(out, &[self], |cx| vec![Some(cx.grad.transpose2())])
    }

    /// `[C, H, W]` to `[H * W, C]`: one row per pixel, row-major pixel order.
    pub fn flatten_pixels(self) -> Var<'g> {
        let s = self.shape();
        assert_eq!(s.len(), 3, "flatten_pixels expects [C, H, W]");
        self.reshape(&[s[0], s[1] * s[2]]).transpose2()
    }

    /// Concatenation along the leading axis.
    pub fn concat0(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty(), "concat0 of nothing");
        let values: Vec<Rc<Tensor>> = parts.iter().map(|v| v.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat0(&refs);
        let leads: Vec<usize> = values.iter().map(|v| v.dim(0)).collect();
        parts[0].graph.op(out, parts, move |cx| {
            let mut start = 0;
            leads
                .iter()
                .zip(cx.needs)
                .map(|(&n, &need)| {
                    let g = need.then(|| cx.grad.slice0(start, start + n));
                    start += n;
                    g
                })
                .collect()
        })
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice0(self, start: usize, end: usize) -> Var<'g> {
        let value = self.value();
        let full = value.shape().to_vec();
        let inner: usize = full[1..].iter().product();
        let out = value.slice0(start, end);
        self.graph.op(out, &[self], move |cx| {
            let mut g = Tensor::zeros(&full);
            g.data_mut()[start * inner..end * inner].copy_from_slice(cx.grad.data());
            vec![Some(g)]
        })
    }

    /// Gathers rows of a 2-D tensor; repeated indices accumulate gradient.
    pub fn select_rows(self, rows: &[usize]) -> Var<'g> {
        let value = self.value();
        assert_eq!(value.ndim(), 2, "select_rows expects a matrix");
        let (m, n) = (value.dim(0), value.dim(1));
        let rows = rows.to_vec();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in &rows {
            out.extend_from_slice(&value.data()[r * n..(r + 1) * n]);
        }
        let out = Tensor::new(&[rows.len(), n], out);
        self.graph.op(out, &[self], move |cx| {
            let mut g = Tensor::zeros(&[m, n]);
            for (i, &r) in rows.iter().enumerate() {
                let src = &cx.grad.data()[i * n..(i + 1) * n];
                for (d, s) in g.data_mut()[r * n..(r + 1) * n].iter_mut().zip(src) {
                    *d += s;
                }
            }
            vec![Some(g)]
        })
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum(self) -> Var<'g> {
        let shape = self.shape();
        let out = Tensor::scalar(self.value().sum());
        self.graph.op(out, &[self], move |cx| {
            vec![Some(Tensor::full(&shape, cx.grad.item()))]
        })
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Per-channel spatial mean: `[C, H, W]` to `[C]`.
    pub fn mean_spatial(self) -> Var<'g> {
        let value = self.value();
        assert_eq!(value.ndim(), 3, "mean_spatial expects [C, H, W]");
        let (c, hw) = (value.dim(0), value.dim(1) * value.dim(2));
        let shape = value.shape().to_vec();
        let out: Vec<f64> = value
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        self.graph.op(Tensor::new(&[c], out), &[self], move |cx| {
            let g = cx.grad.data();
            vec![Some(Tensor::from_fn(&shape, |i| g[i / hw] / hw as f64))]
        })
    }

    // ---- broadcasting ---------------------------------------------------

    /// `[rows, n] + [n]`.
    pub fn add_row_bias(self, bias: Var<'g>) -> Var<'g> {
        same_graph(&self, &bias);
        let (x, b) = (self.value(), bias.value());
        assert_eq!(x.ndim(), 2);
        let n = x.dim(1);
        assert_eq!(b.shape(), [n], "row bias shape");
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        self.graph.op(out, &[self, bias], move |cx| {
            let db = cx.needs[1].then(|| {
                let mut db = vec![0.0; n];
                for row in cx.grad.data().chunks(n) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                Tensor::new(&[n], db)
            });
            vec![Some(cx.grad.clone()), db]
        })
    }

    /// `[C, ...] + [C]`, broadcasting over everything after the first axis.
    pub fn add_channel_bias(self, bias: Var<'g>) -> Var<'g> {
        same_graph(&self, &bias);
        let (x, b) = (self.value(), bias.value());
        let c = x.dim(0);
        assert_eq!(b.shape(), [c], "channel bias shape");
        let inner = x.numel() / c;
        let mut out = (*x).clone();
        for (plane, bb) in out.data_mut().chunks_mut(inner).zip(b.data()) {
            for v in plane {
                *v += bb;
            }
        }
        self.graph.op(out, &[self, bias], move |cx| {
            let db = cx.needs[1].then(|| {
                Tensor::new(
                    &[c],
                    cx.grad
                        .data()
                        .chunks(inner)
                        .map(|p| p.iter().sum())
                        .collect(),
                )
            });
            vec![Some(cx.grad.clone()), db]
        })
    }

    /// `[C, ...] * [1, ...]`: one plane gating every channel.
    pub fn mul_plane(self, plane: Var<'g>) -> Var<'g> {
        same_graph(&self, &plane);
        let (x, p) = (self.value(), plane.value());
        assert_eq!(p.dim(0), 1, "mul_plane expects a single plane");
        assert_eq!(&x.shape()[1..], &p.shape()[1..], "mul_plane trailing shape");
        let inner = p.numel();
        let mut out = (*x).clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (v, w) in chunk.iter_mut().zip(p.data()) {
                *v *= w;
            }
        }
        self.graph.op(out, &[self, plane], move |cx| {
            let (x, p) = (&cx.inputs[0], &cx.inputs[1]);
            let dx = cx.needs[0].then(|| {
                let mut d = cx.grad.clone();
                for chunk in d.data_mut().chunks_mut(inner) {
                    for (v, w) in chunk.iter_mut().zip(p.data()) {
                        *v *= w;
                    }
                }
                d
            });
            let dp = cx.needs[1].then(|| {
                let mut d = vec![0.0; inner];
                for (gc, xc) in cx.grad.data().chunks(inner).zip(x.data().chunks(inner)) {
                    for i in 0..inner {
                        d[i] += gc[i] * xc[i];
                    }
                }
                Tensor::new(p.shape(), d)
            });
            vec![dx, dp]
        })
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[m, k] @ [k, n]`.
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        same_graph(&self, &other);
        let (a, b) = (self.value(), other.value());
        let out = a.matmul(&b);
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        self.graph.op(out, &[self, other], move |cx| {
            let (a, b) = (&cx.inputs[0], &cx.inputs[1]);
            let g = cx.grad.data();
            let da = cx.needs[0].then(|| {
                let mut d = vec![0.0; m * k];
                gemm(false, true, m, k, n, 1.0, g, b.data(), 0.0, &mut d);
                Tensor::new(&[m, k], d)
            });
            let db = cx.needs[1].then(|| {
                let mut d = vec![0.0; k * n];
                gemm(true, false, k, n, m, 1.0, a.data(), g, 0.0, &mut d);
                Tensor::new(&[k, n], d)
            });
            vec![da, db]
        })
    }

    /// `[m, k] @ [n, k]^T`.
    pub fn matmul_nt(self, other: Var<'g>) -> Var<'g> {
        same_graph(&self, &other);
        let (a, b) = (self.value(), other.value());
        let (m, k) = (a.dim(0), a.dim(1));
        let n = b.dim(0);
        assert_eq!(
            b.dim(1),
            k,
            "matmul_nt inner dims {:?} {:?}",
            a.shape(),
            b.shape()
        );
        let mut out = vec![0.0; m * n];
        gemm(false, true, m, n, k, 1.0, a.data(), b.data(), 0.0, &mut out);
        self.graph
            .op(Tensor::new(&[m, n], out), &[self, other], move |cx| {
                let (a, b) = (&cx.inputs[0], &cx.inputs[1]);
                let g = cx.grad.data();
                let da = cx.needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(false, false, m, k, n, 1.0, g, b.data(), 0.0, &mut d);
                    Tensor::new(&[m, k], d)
                });
                let db = cx.needs[1].then(|| {
                    let mut d = vec![0.0; n * k];
                    gemm(true, false, n, k, m, 1.0, g, a.data(), 0.0, &mut d);
                    Tensor::new(&[n, k], d)
                });
                vec![da, db]
            })
    }

    /// 2-D convolution of a `[C, H, W]` map with `[O, C, k, k]` weights.
    pub fn conv2d(
        self,
        weight: Var<'g>,
        bias: Option<Var<'g>>,
        stride: usize,
        pad: usize,
    ) -> Var<'g> {
        same_graph(&self, &weight);
        let (x, w) = (self.value(), weight.value());
        assert_eq!(
            x.ndim(),
            3,
            "conv2d input must be [C, H, W], got {:?}",
            x.shape()
        );
        assert_eq!(w.ndim(), 4, "conv2d weight must be [O, C, k, k]");
        let (c, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
        let (o, k) = (w.dim(0), w.dim(2));
        assert_eq!(
            w.dim(1),
            c,
            "conv2d channel mismatch: input {c}, weight {:?}",
            w.shape()
        );
        assert_eq!(w.dim(3), k, "conv2d kernel must be square");
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            oh: conv_out_size(h, k, stride, pad),
            ow: conv_out_size(wd, k, stride, pad),
        };
        let p = geom.oh * geom.ow;
        let ckk = c * k * k;
        let cols: Rc<Vec<f64>> = Rc::new(if geom.is_pointwise() {
            x.data().to_vec()
        } else {
            geom.im2col(x.data())
        });
        let mut out = vec![0.0; o * p];
        gemm(false, false, o, p, ckk, 1.0, w.data(), &cols, 0.0, &mut out);
        if let Some(b) = bias {
            let b = b.value();
            for (plane, bb) in out.chunks_mut(p).zip(b.data()) {
                for v in plane {
                    *v += bb;
                }
            }
        }
        let out = Tensor::new(&[o, geom.oh, geom.ow], out);
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        self.graph.op(out, &inputs, move |cx| {
            let g = cx.grad.data();
            let w = &cx.inputs[1];
            let dx = cx.needs[0].then(|| {
                let mut dcols = vec![0.0; ckk * p];
                gemm(true, false, ckk, p, o, 1.0, w.data(), g, 0.0, &mut dcols);
                let d = if geom.is_pointwise() {
                    dcols
                } else {
                    geom.col2im(&dcols)
                };
                Tensor::new(&[c, h, geom.w], d)
            });
            let dw = cx.needs[1].then(|| {
                let mut d = vec![0.0; o * ckk];
                gemm(false, true, o, ckk, p, 1.0, g, &cols, 0.0, &mut d);
                Tensor::new(&[o, c, k, k], d)
            });
            let mut grads = vec![dx, dw];
            if cx.inputs.len() == 3 {
                grads.push(
                    cx.needs[2].then(|| {
                        Tensor::new(&[o], g.chunks(p).map(|pl| pl.iter().sum()).collect())
                    }),
                );
            }
            grads
        })
    }

    /// Applies a fixed resampling plan to every channel of a `[C, H, W]` map.
    pub fn resample(self, plan: Arc<ResamplePlan>) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.ndim(), 3, "resample expects [C, H, W]");
        assert_eq!(
            (x.dim(1), x.dim(2)),
            (plan.in_h, plan.in_w),
            "resample plan built for another size"
        );
        let c = x.dim(0);
        let out = Tensor::new(&[c, plan.out_h, plan.out_w], plan.apply(x.data(), c));
        let in_shape = x.shape().to_vec();
        self.graph.op(out, &[self], move |cx| {
            vec![Some(Tensor::new(
                &in_shape,
                plan.apply_transpose(cx.grad.data(), c),
            ))]
        })
    }

    // ---- normalization & attention ------------------------------------------

    /// Row softmax of a matrix. `allowed` (same shape, row-major) masks
    /// entries out; a row with nothing allowed falls back to the full row.
    pub fn softmax_rows(self, allowed: Option<Rc<Vec<bool>>>) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.ndim(), 2);
        let n = x.dim(1);
        if let Some(a) = &allowed {
            assert_eq!(a.len(), x.numel(), "softmax mask size");
        }
        let mut out = vec![0.0; x.numel()];
        for (i, (row, dst)) in x.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            softmax_row(row, allowed.as_ref().map(|a| &a[i * n..(i + 1) * n]), dst);
        }
        self.graph
            .op(Tensor::new(x.shape(), out), &[self], move |cx| {
                let mut dx = vec![0.0; cx.output.numel()];
                for ((y, g), d) in cx
                    .output
                    .data()
                    .chunks(n)
                    .zip(cx.grad.data().chunks(n))
                    .zip(dx.chunks_mut(n))
                {
                    softmax_row_backward(y, g, d);
                }
                vec![Some(Tensor::new(cx.output.shape(), dx))]
            })
    }

    /// Softmax across the two planes of a `[2, ...]` logit tensor.
    pub fn softmax_pair(self) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.dim(0), 2, "softmax_pair expects two planes");
        let n = x.numel() / 2;
        let (l0, l1) = x.data().split_at(n);
        let mut out = Vec::with_capacity(2 * n);
        out.extend(l0.iter().zip(l1).map(|(a, b)| sigmoid(a - b)));
        out.extend(l0.iter().zip(l1).map(|(a, b)| sigmoid(b - a)));
        self.graph
            .op(Tensor::new(x.shape(), out), &[self], move |cx| {
                let (y0, y1) = cx.output.data().split_at(n);
                let (g0, g1) = cx.grad.data().split_at(n);
                let d0: Vec<f64> = (0..n).map(|i| (g0[i] - g1[i]) * y0[i] * y1[i]).collect();
                let mut d = d0.clone();
                d.extend(d0.iter().map(|v| -v));
                vec![Some(Tensor::new(cx.output.shape(), d))]
            })
    }

    /// Layer normalization over the last axis of a matrix.
    pub fn layer_norm_rows(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.ndim(), 2);
        let (m, n) = (x.dim(0), x.dim(1));
        let (gm, bt) = (gamma.value(), beta.value());
        assert_eq!(gm.shape(), [n]);
        assert_eq!(bt.shape(), [n]);
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x.data()[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let xh = (row[j] - mu) * is;
                xhat[i * n + j] = xh;
                out[i * n + j] = xh * gm.data()[j] + bt.data()[j];
            }
        }
        self.graph
            .op(Tensor::new(&[m, n], out), &[self, gamma, beta], move |cx| {
                let g = cx.grad.data();
                let gm = &cx.inputs[1];
                let dx = cx.needs[0].then(|| {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let xh = &xhat[i * n..(i + 1) * n];
                        let dxh: Vec<f64> = gr.iter().zip(gm.data()).map(|(a, b)| a * b).collect();
                        let mean_d = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dx =
                            dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dx[i * n + j] = inv_std[i] * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    Tensor::new(&[m, n], dx)
                });
                let dg = cx.needs[1].then(|| {
                    let mut d = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                    Tensor::new(&[n], d)
                });
                let db = cx.needs[2].then(|| {
                    let mut d = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (a, b) in d.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    Tensor::new(&[n], d)
                });
                vec![dx, dg, db]
            })
    }

    /// Multi-head scaled dot-product attention on already-projected inputs.
    ///
    /// `q` is `[nq, d]`, `k` and `v` are `[l, d]`; heads split `d` evenly.
    /// `allowed` is a row-major `[nq, l]` mask (true = may attend); rows
    /// with nothing allowed attend everywhere.
    pub fn attention(
        self,
        k: Var<'g>,
        v: Var<'g>,
        heads: usize,
        allowed: Option<Rc<Vec<bool>>>,
    ) -> Var<'g> {
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        let (nq, d) = (qv.dim(0), qv.dim(1));
        let l = kv.dim(0);
        assert_eq!(kv.dim(1), d, "attention key width");
        assert_eq!(vv.shape(), kv.shape(), "attention key/value shapes");
        assert!(heads > 0 && d % heads == 0, "heads must divide width");
        if let Some(a) = &allowed {
            assert_eq!(a.len(), nq * l, "attention mask size");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let split = move |t: &Tensor, rows: usize, h: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(rows * dh);
            for r in 0..rows {
                out.extend_from_slice(&t.data()[r * d + h * dh..r * d + (h + 1) * dh]);
            }
            out
        };

        let mut probs: Vec<Vec<f64>> = Vec::with_capacity(heads);
        let mut out = vec![0.0; nq * d];
        for h in 0..heads {
            let (qh, kh, vh) = (split(&qv, nq, h), split(&kv, l, h), split(&vv, l, h));
            let mut scores = vec![0.0; nq * l];
            gemm(false, true, nq, l, dh, scale, &qh, &kh, 0.0, &mut scores);
            let mut p = vec![0.0; nq * l];
            for i in 0..nq {
                softmax_row(
                    &scores[i * l..(i + 1) * l],
                    allowed.as_ref().map(|a| &a[i * l..(i + 1) * l]),
                    &mut p[i * l..(i + 1) * l],
                );
            }
            let mut oh = vec![0.0; nq * dh];
            gemm(false, false, nq, dh, l, 1.0, &p, &vh, 0.0, &mut oh);
            for i in 0..nq {
                out[i * d + h * dh..i * d + (h + 1) * dh]
                    .copy_from_slice(&oh[i * dh..(i + 1) * dh]);
            }
            probs.push(p);
        }

        self.graph
            .op(Tensor::new(&[nq, d], out), &[self, k, v], move |cx| {
                let (qv, kv, vv) = (&cx.inputs[0], &cx.inputs[1], &cx.inputs[2]);
                let mut dq = vec![0.0; nq * d];
                let mut dk = vec![0.0; l * d];
                let mut dv = vec![0.0; l * d];
                for (h, p) in probs.iter().enumerate() {
                    let (qh, kh, vh) = (split(qv, nq, h), split(kv, l, h), split(vv, l, h));
                    let goh = split(cx.grad, nq, h);
                    // dP = dO V^T ; dV = P^T dO
                    let mut dp = vec![0.0; nq * l];
                    gemm(false, true, nq, l, dh, 1.0, &goh, &vh, 0.0, &mut dp);
                    let mut dvh = vec![0.0; l * dh];
                    gemm(true, false, l, dh, nq, 1.0, p, &goh, 0.0, &mut dvh);
                    let mut ds = vec![0.0; nq * l];
                    for i in 0..nq {
                        softmax_row_backward(
                            &p[i * l..(i + 1) * l],
                            &dp[i * l..(i + 1) * l],
                            &mut ds[i * l..(i + 1) * l],
                        );
                    }
                    let mut dqh = vec![0.0; nq * dh];
                    gemm(false, false, nq, dh, l, scale, &ds, &kh, 0.0, &mut dqh);
                    let mut dkh = vec![0.0; l * dh];
                    gemm(true, false, l, dh, nq, scale, &ds, &qh, 0.0, &mut dkh);
                    for i in 0..nq {
                        dq[i * d + h * dh..i * d + (h + 1) * dh]
                            .copy_from_slice(&dqh[i * dh..(i + 1) * dh]);
                    }
                    for r in 0..l {
                        dk[r * d + h * dh..r * d + (h + 1) * dh]
                            .copy_from_slice(&dkh[r * dh..(r + 1) * dh]);
                        dv[r * d + h * dh..r * d + (h + 1) * dh]
                            .copy_from_slice(&dvh[r * dh..(r + 1) * dh]);
                    }
                }
                vec![
                    cx.needs[0].then(|| Tensor::new(&[nq, d], dq)),
                    cx.needs[1].then(|| Tensor::new(&[l, d], dk)),
                    cx.needs[2].then(|| Tensor::new(&[l, d], dv)),
                ]
            })
    }

    /// Cosine similarity of a vector `[d]` against each row of `[n, d]`.
    ///
    /// The denominator is `max(|x| |p_k|, eps)`, so a zero vector on either
    /// side yields similarity 0 rather than a division by zero.
    pub fn cosine_rows(self, rows: Var<'g>, eps: f64) -> Var<'g> {
        same_graph(&self, &rows);
        let (x, p) = (self.value(), rows.value());
        let d = x.numel();
        assert_eq!(p.ndim(), 2);
        assert_eq!(p.dim(1), d, "cosine_rows width");
        let n = p.dim(0);
        let nx = x.sq_norm().sqrt();
        let np: Vec<f64> = p
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let dots: Vec<f64> = p
            .data()
            .chunks(d)
            .map(|r| r.iter().zip(x.data()).map(|(a, b)| a * b).sum())
            .collect();
        let dens: Vec<f64> = np.iter().map(|&q| (nx * q).max(eps)).collect();
        let sims: Vec<f64> = dots.iter().zip(&dens).map(|(a, b)| a / b).collect();
        let x_shape = x.shape().to_vec();
        self.graph
            .op(Tensor::new(&[n], sims.clone()), &[self, rows], move |cx| {
                let (x, p) = (&cx.inputs[0], &cx.inputs[1]);
                let g = cx.grad.data();
                let mut dx = vec![0.0; d];
                let mut dp = vec![0.0; n * d];
                for kq in 0..n {
                    let row = &p.data()[kq * d..(kq + 1) * d];
                    let saturated = nx * np[kq] > eps;
                    for j in 0..d {
                        let (gx, gp) = if saturated {
                            (
                                row[j] / dens[kq] - sims[kq] * x.data()[j] / (nx * nx),
                                x.data()[j] / dens[kq] - sims[kq] * row[j] / (np[kq] * np[kq]),
                            )
                        } else {
                            (row[j] / eps, x.data()[j] / eps)
                        };
                        dx[j] += g[kq] * gx;
                        dp[kq * d + j] = g[kq] * gp;
                    }
                }
                vec![
                    cx.needs[0].then(|| Tensor::new(&x_shape, dx)),
                    cx.needs[1].then(|| Tensor::new(&[n, d], dp)),
                ]
            })
    }

    // ---- losses -----------------------------------------------------------

    /// Mean binary cross-entropy between `sigmoid(self)` and constant targets.
    pub fn bce_with_logits_mean(self, targets: &Tensor) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.numel(), targets.numel(), "bce target size");
        let n = x.numel() as f64;
        let loss: f64 = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&l, &t)| softplus(l) - l * t)
            .sum::<f64>()
            / n;
        let t = targets.clone();
        self.graph.op(Tensor::scalar(loss), &[self], move |cx| {
            let g = cx.grad.item() / n;
            let x = &cx.inputs[0];
            let d: Vec<f64> = x
                .data()
                .iter()
                .zip(t.data())
                .map(|(&l, &tt)| g * (sigmoid(l) - tt))
                .collect();
            vec![Some(Tensor::new(x.shape(), d))]
        })
    }

    /// Soft dice loss `1 - 2 sum(p t) / (sum p + sum t + 1)` with
    /// `p = sigmoid(self)`. Defined as exactly 0 (no gradient) when the
    /// target is empty and no probability exceeds one half.
    pub fn dice_loss_with_logits(self, targets: &Tensor) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.numel(), targets.numel(), "dice target size");
        let p: Vec<f64> = x.data().iter().map(|&v| sigmoid(v)).collect();
        let st: f64 = targets.sum();
        let both_empty = st == 0.0 && p.iter().all(|&v| v <= 0.5);
        let inter: f64 = p.iter().zip(targets.data()).map(|(a, b)| a * b).sum();
        let sp: f64 = p.iter().sum();
        let den = sp + st + 1.0;
        let loss = if both_empty {
            0.0
        } else {
            1.0 - 2.0 * inter / den
        };
        let t = targets.clone();
        self.graph.op(Tensor::scalar(loss), &[self], move |cx| {
            let shape = cx.inputs[0].shape();
            if both_empty {
                return vec![Some(Tensor::zeros(shape))];
            }
            let g = cx.grad.item();
            // d/dp_i = -2 (t_i den - inter) / den^2
            let d: Vec<f64> = p
                .iter()
                .zip(t.data())
                .map(|(&pi, &ti)| {
                    let dl_dp = -2.0 * (ti * den - inter) / (den * den);
                    g * dl_dp * pi * (1.0 - pi)
                })
                .collect();
            vec![Some(Tensor::new(shape, d))]
        })
    }

    /// Class-weighted mean cross-entropy over the rows of a `[m, c]` logit
    /// matrix: `sum_i w[t_i] * nll_i / sum_i w[t_i]`.
    pub fn cross_entropy_rows(self, targets: &[usize], class_weights: &[f64]) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.ndim(), 2);
        let (m, c) = (x.dim(0), x.dim(1));
        assert_eq!(targets.len(), m, "one target per row");
        assert_eq!(class_weights.len(), c, "one weight per class");
        let mut probs = vec![0.0; m * c];
        let mut total = 0.0;
        let mut wsum = 0.0;
        for i in 0..m {
            let row = &x.data()[i * c..(i + 1) * c];
            softmax_row(row, None, &mut probs[i * c..(i + 1) * c]);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let w = class_weights[targets[i]];
            total += w * (lse - row[targets[i]]);
            wsum += w;
        }
        let norm = if wsum > 0.0 { wsum } else { 1.0 };
        let targets = targets.to_vec();
        let weights = class_weights.to_vec();
        self.graph
            .op(Tensor::scalar(total / norm), &[self], move |cx| {
                let g = cx.grad.item() / norm;
                let mut d = probs.clone();
                for i in 0..m {
                    let w = weights[targets[i]];
                    d[i * c + targets[i]] -= 1.0;
                    for v in &mut d[i * c..(i + 1) * c] {
                        *v *= g * w;
                    }
                }
                vec![Some(Tensor::new(&[m, c], d))]
            })
    }
}

/// Elementwise logistic function on a plain tensor.
pub fn sigmoid_tensor(t: &Tensor) -> Tensor {
    t.map(sigmoid)
}

/// Logistic function of one value.
pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}
