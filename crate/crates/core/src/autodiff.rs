//! Tape-based reverse-mode automatic differentiation over `f64` arrays.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of
//! a scalar node with respect to every node that needs one. Leaves created
//! with [`Graph::constant`] never receive gradients.
//!
//! Shape errors inside graph ops are programming errors and panic; the model
//! modules validate user-facing shapes before building the graph.

use ndarray::{s, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Zip};

pub type Tensor = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Abs,
    Sigmoid,
    Relu,
    Gelu,
    Sqrt,
    Square,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Unary(Var, Unary),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    AvgPool2d {
        x: Var,
        window: (usize, usize),
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Sum {
        x: Var,
        axis: usize,
        keep: bool,
    },
    Mean {
        x: Var,
        axis: usize,
        keep: bool,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

/// Reduces a broadcast gradient back to `shape` by summing the expanded axes.
fn sum_to_shape(mut g: Tensor, shape: &[usize]) -> Tensor {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &n) in shape.iter().enumerate() {
        if n == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn as_2d(t: &Tensor, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    t.view()
        .into_shape_with_order((rows, cols))
        .expect("contiguous tensor")
}

fn standard(t: Tensor) -> Tensor {
    if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds one image (C, H, W) into columns (C*kh*kw, Ho*Wo).
fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let ho = conv_out(h, kh, stride, pad);
    let wo = conv_out(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    let out = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let dst = &mut out[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * stride + i) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = &x[ci * h * w + ih as usize * w..];
                    for ow in 0..wo {
                        let iw = (ow * stride + j) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[oh * wo + ow] = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f64>,
    dx: &mut [f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
) {
    let ho = conv_out(h, kh, stride, pad);
    let wo = conv_out(w, kw, stride, pad);
    let src = cols.as_slice().unwrap();
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ci * kh + i) * kw + j;
                let col = &src[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = (oh * stride + i) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + ih as usize * w;
                    for ow in 0..wo {
                        let iw = (ow * stride + j) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            dx[base + iw as usize] += col[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

fn softmax_last(x: &Tensor) -> Tensor {
    let mut y = standard(x.clone());
    let n = *x.shape().last().unwrap();
    for row in y.as_slice_mut().unwrap().chunks_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    y
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, needs)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(standard(value), Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(standard(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push_op(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push_op(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push_op(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push_op(v, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push_op(v, Op::Scale(a, c), &[a])
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let x = self.value(a);
        let v = match f {
            Unary::Neg => x.mapv(|t| -t),
            Unary::Abs => x.mapv(f64::abs),
            Unary::Sigmoid => x.mapv(sigmoid),
            Unary::Relu => x.mapv(|t| t.max(0.0)),
            Unary::Gelu => x.mapv(gelu),
            Unary::Sqrt => x.mapv(f64::sqrt),
            Unary::Square => x.mapv(|t| t * t),
        };
        self.push_op(v, Op::Unary(a, f), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// `x @ w^T + b` over the last axis of `x`; `w` is `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        let (out_f, in_f) = (ws[0], ws[1]);
        assert_eq!(*xs.last().unwrap(), in_f, "linear: input width mismatch");
        let rows = xs.iter().product::<usize>() / in_f;
        let x2 = as_2d(self.value(x), rows, in_f);
        let w2 = as_2d(self.value(w), out_f, in_f);
        let mut y = x2.dot(&w2.t());
        if let Some(b) = b {
            let bv = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
            y += &bv;
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_f;
        let y = y.into_shape_with_order(IxDyn(&shape)).unwrap();
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_op(y, Op::Linear { x, w, b }, &parents)
    }

    /// Batched matrix product over the last two axes; leading axes must match.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let nd = av.ndim();
        assert!(nd >= 2 && bv.ndim() == nd, "matmul: rank mismatch");
        assert_eq!(av.shape()[..nd - 2], bv.shape()[..nd - 2], "matmul: batch mismatch");
        let (m, k) = (av.shape()[nd - 2], av.shape()[nd - 1]);
        let (k2, n) = (bv.shape()[nd - 2], bv.shape()[nd - 1]);
        assert_eq!(k, k2, "matmul: inner dimension mismatch");
        let batch: usize = av.shape()[..nd - 2].iter().product();
        let a3 = av.view().into_shape_with_order((batch, m, k)).unwrap();
        let b3 = bv.view().into_shape_with_order((batch, k, n)).unwrap();
        let mut out = ndarray::Array3::<f64>::zeros((batch, m, n));
        for i in 0..batch {
            out.index_axis_mut(Axis(0), i)
                .assign(&a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i)));
        }
        let mut shape = av.shape()[..nd - 2].to_vec();
        shape.extend([m, n]);
        let out = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        self.push_op(out, Op::MatMul(a, b), &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Var {
        let nd = self.value(a).ndim();
        let mut v = self.value(a).clone();
        v.swap_axes(nd - 2, nd - 1);
        self.push_op(standard(v), Op::Transpose(a), &[a])
    }

    /// 2-D convolution, `x` is (B, C, H, W), `w` is (O, C, kh, kw).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (bsz, c, h, wd) = {
            let s = xv.shape();
            (s[0], s[1], s[2], s[3])
        };
        let (o, wc, kh, kw) = {
            let s = wv.shape();
            (s[0], s[1], s[2], s[3])
        };
        assert_eq!(c, wc, "conv2d: channel mismatch");
        let ho = conv_out(h, kh, stride, pad);
        let wo = conv_out(wd, kw, stride, pad);
        let w2 = as_2d(wv, o, c * kh * kw);
        let xs = xv.as_slice().unwrap();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[bsz, o, ho, wo]));
        for bi in 0..bsz {
            let cols = im2col(
                &xs[bi * c * h * wd..(bi + 1) * c * h * wd],
                (c, h, wd),
                (kh, kw),
                stride,
                pad,
            );
            let y = w2.dot(&cols);
            out.index_axis_mut(Axis(0), bi)
                .assign(&y.into_shape_with_order((o, ho, wo)).unwrap());
        }
        if let Some(b) = b {
            let bv = self.value(b).clone().into_shape_with_order((1, o, 1, 1)).unwrap();
            out += &bv;
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_op(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &parents,
        )
    }

    /// Non-overlapping average pooling with `window = stride`.
    pub fn avg_pool2d(&mut self, x: Var, window: (usize, usize)) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (wh, ww) = window;
        assert!(h % wh == 0 && w % ww == 0, "avg_pool2d: non-divisible window");
        let (ho, wo) = (h / wh, w / ww);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[bsz, c, ho, wo]));
        let inv = 1.0 / (wh * ww) as f64;
        for bi in 0..bsz {
            for ci in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let sum = xv
                            .slice(s![bi, ci, oh * wh..(oh + 1) * wh, ow * ww..(ow + 1) * ww])
                            .sum();
                        out[[bi, ci, oh, ow]] = sum * inv;
                    }
                }
            }
        }
        self.push_op(out, Op::AvgPool2d { x, window }, &[x])
    }

    /// 3x3 max pooling, stride 2, padding 1.
    pub fn max_pool2d(&mut self, x: Var) -> Var {
        let (k, stride, pad) = (3usize, 2usize, 1usize);
        let xv = self.value(x);
        let s = xv.shape();
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(w, k, stride, pad);
        let xs = xv.as_slice().unwrap();
        let mut out = vec![0.0; bsz * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..bsz * c {
            let base = plane * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for i in 0..k {
                        let ih = (oh * stride + i) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for j in 0..k {
                            let iw = (ow * stride + j) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let idx = base + ih as usize * w + iw as usize;
                            if xs[idx] > best {
                                best = xs[idx];
                                best_i = idx;
                            }
                        }
                    }
                    let o = (plane * ho + oh) * wo + ow;
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[bsz, c, ho, wo]), out).unwrap();
        self.push_op(out, Op::MaxPool2d { x, argmax }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat: shape mismatch");
        self.push_op(
            standard(v),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push_op(v, Op::Reshape(x), &[x])
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self
            .value(x)
            .slice_axis(Axis(axis), (start..start + len).into())
            .to_owned();
        self.push_op(standard(v), Op::Narrow { x, axis, start }, &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let v = standard(self.value(x).clone().permuted_axes(IxDyn(axes)));
        self.push_op(
            v,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        )
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keep: bool) -> Var {
        let mut v = self.value(x).sum_axis(Axis(axis));
        if keep {
            v = v.insert_axis(Axis(axis));
        }
        self.push_op(v, Op::Sum { x, axis, keep }, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keep: bool) -> Var {
        let mut v = self.value(x).mean_axis(Axis(axis)).expect("mean over empty axis");
        if keep {
            v = v.insert_axis(Axis(axis));
        }
        self.push_op(v, Op::Mean { x, axis, keep }, &[x])
    }

    /// Mean of all elements, as a scalar (0-d) node.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n]);
        self.mean_axis(flat, 0, false)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n]);
        self.sum_axis(flat, 0, false)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = softmax_last(self.value(x));
        self.push_op(v, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let mut y = standard(xv.clone());
        let g = self.value(gamma).as_slice().unwrap().to_vec();
        let b = self.value(beta).as_slice().unwrap().to_vec();
        for row in y.as_slice_mut().unwrap().chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[k] + b[k];
            }
        }
        self.push_op(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            &[x, gamma, beta],
        )
    }

    /// Gradients of the scalar node `loss` (a one-element tensor).
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be scalar");
        self.backward_with(loss, Tensor::ones(self.value(loss).raw_dim()))
    }

    /// Vector-Jacobian product seeded with `seed` at node `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let contributions = self.node_backward(i, &g);
            grads[i] = Some(g);
            for (p, pg) in contributions {
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let shp = |v: Var| self.nodes[v.0].value.shape().to_vec();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, sum_to_shape(g.clone(), &shp(*a))),
                (*b, sum_to_shape(g.clone(), &shp(*b))),
            ],
            Op::Sub(a, b) => vec![
                (*a, sum_to_shape(g.clone(), &shp(*a))),
                (*b, sum_to_shape(g.mapv(|t| -t), &shp(*b))),
            ],
            Op::Mul(a, b) => vec![
                (*a, sum_to_shape(g * val(*b), &shp(*a))),
                (*b, sum_to_shape(g * val(*a), &shp(*b))),
            ],
            Op::Div(a, b) => {
                let bv = val(*b);
                let ga = g / bv;
                let gb = -(&ga * &node.value);
                vec![
                    (*a, sum_to_shape(ga, &shp(*a))),
                    (*b, sum_to_shape(gb, &shp(*b))),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g * *c)],
            Op::Unary(a, f) => {
                let x = val(*a);
                let y = &node.value;
                let mut d = g.clone();
                match f {
                    Unary::Neg => d.mapv_inplace(|t| -t),
                    Unary::Abs => Zip::from(&mut d).and(x).for_each(|d, &x| {
                        *d *= if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }),
                    Unary::Sigmoid => Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y)),
                    Unary::Relu => Zip::from(&mut d)
                        .and(x)
                        .for_each(|d, &x| *d *= if x > 0.0 { 1.0 } else { 0.0 }),
                    Unary::Gelu => Zip::from(&mut d).and(x).for_each(|d, &x| *d *= gelu_grad(x)),
                    Unary::Sqrt => Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 0.5 / y),
                    Unary::Square => Zip::from(&mut d).and(x).for_each(|d, &x| *d *= 2.0 * x),
                }
                vec![(*a, d)]
            }
            Op::Linear { x, w, b } => {
                let xs = shp(*x);
                let ws = shp(*w);
                let (out_f, in_f) = (ws[0], ws[1]);
                let rows = xs.iter().product::<usize>() / in_f;
                let g2 = as_2d(g, rows, out_f);
                let x2 = as_2d(val(*x), rows, in_f);
                let w2 = as_2d(val(*w), out_f, in_f);
                let dx = g2.dot(&w2).into_shape_with_order(IxDyn(&xs)).unwrap();
                let dw = g2.t().dot(&x2).into_dyn();
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    out.push((*b, g2.sum_axis(Axis(0)).into_dyn()));
                }
                out
            }
            Op::MatMul(a, b) => {
                let av = val(*a);
                let bv = val(*b);
                let nd = av.ndim();
                let (m, k) = (av.shape()[nd - 2], av.shape()[nd - 1]);
                let n = bv.shape()[nd - 1];
                let batch: usize = av.shape()[..nd - 2].iter().product();
                let a3 = av.view().into_shape_with_order((batch, m, k)).unwrap();
                let b3 = bv.view().into_shape_with_order((batch, k, n)).unwrap();
                let g3 = g.view().into_shape_with_order((batch, m, n)).unwrap();
                let mut da = ndarray::Array3::<f64>::zeros((batch, m, k));
                let mut db = ndarray::Array3::<f64>::zeros((batch, k, n));
                for i in 0..batch {
                    let gi = g3.index_axis(Axis(0), i);
                    da.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&b3.index_axis(Axis(0), i).t()));
                    db.index_axis_mut(Axis(0), i)
                        .assign(&a3.index_axis(Axis(0), i).t().dot(&gi));
                }
                vec![
                    (*a, da.into_shape_with_order(IxDyn(av.shape())).unwrap()),
                    (*b, db.into_shape_with_order(IxDyn(bv.shape())).unwrap()),
                ]
            }
            Op::Transpose(a) => {
                let nd = g.ndim();
                let mut d = g.clone();
                d.swap_axes(nd - 2, nd - 1);
                vec![(*a, standard(d))]
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = val(*x);
                let wv = val(*w);
                let s = xv.shape();
                let (bsz, c, h, wd) = (s[0], s[1], s[2], s[3]);
                let ws = wv.shape();
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                let ho = g.shape()[2];
                let wo = g.shape()[3];
                let w2 = as_2d(wv, o, c * kh * kw);
                let xs = xv.as_slice().unwrap();
                let gs = standard(g.clone());
                let gsl = gs.as_slice().unwrap();
                let mut dw = Array2::<f64>::zeros((o, c * kh * kw));
                let mut dx = vec![0.0; xv.len()];
                let need_x = self.nodes[x.0].needs_grad;
                let need_w = self.nodes[w.0].needs_grad;
                for bi in 0..bsz {
                    let gb = ArrayView2::from_shape((o, ho * wo), &gsl[bi * o * ho * wo..(bi + 1) * o * ho * wo])
                        .unwrap();
                    if need_w {
                        let cols = im2col(
                            &xs[bi * c * h * wd..(bi + 1) * c * h * wd],
                            (c, h, wd),
                            (kh, kw),
                            *stride,
                            *pad,
                        );
                        dw += &gb.dot(&cols.t());
                    }
                    if need_x {
                        let dcols = w2.t().dot(&gb);
                        col2im(
                            &dcols,
                            &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd],
                            (c, h, wd),
                            (kh, kw),
                            *stride,
                            *pad,
                        );
                    }
                }
                let mut out = vec![
                    (*x, ArrayD::from_shape_vec(IxDyn(s), dx).unwrap()),
                    (*w, dw.into_shape_with_order(IxDyn(ws)).unwrap()),
                ];
                if let Some(b) = b {
                    let db = gs.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                    out.push((*b, db));
                }
                out
            }
            Op::AvgPool2d { x, window } => {
                let s = shp(*x);
                let (wh, ww) = *window;
                let inv = 1.0 / (wh * ww) as f64;
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&s));
                let gshape = g.shape();
                for bi in 0..s[0] {
                    for ci in 0..s[1] {
                        for oh in 0..gshape[2] {
                            for ow in 0..gshape[3] {
                                let v = g[[bi, ci, oh, ow]] * inv;
                                dx.slice_mut(s![bi, ci, oh * wh..(oh + 1) * wh, ow * ww..(ow + 1) * ww])
                                    .fill(v);
                            }
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::MaxPool2d { x, argmax } => {
                let s = shp(*x);
                let mut dx = vec![0.0; s.iter().product()];
                for (gv, &idx) in g.iter().zip(argmax) {
                    dx[idx] += gv;
                }
                vec![(*x, ArrayD::from_shape_vec(IxDyn(&s), dx).unwrap())]
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                parts
                    .iter()
                    .map(|p| {
                        let n = shp(*p)[*axis];
                        let piece = g.slice_axis(Axis(*axis), (start..start + n).into()).to_owned();
                        start += n;
                        (*p, standard(piece))
                    })
                    .collect()
            }
            Op::Reshape(x) => vec![(
                *x,
                standard(g.clone()).into_shape_with_order(IxDyn(&shp(*x))).unwrap(),
            )],
            Op::Narrow { x, axis, start } => {
                let mut d = ArrayD::<f64>::zeros(IxDyn(&shp(*x)));
                let n = g.shape()[*axis];
                d.slice_axis_mut(Axis(*axis), (*start..*start + n).into()).assign(g);
                vec![(*x, d)]
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                vec![(*x, standard(g.clone().permuted_axes(IxDyn(&inv))))]
            }
            Op::Sum { x, axis, keep } | Op::Mean { x, axis, keep } => {
                let s = shp(*x);
                let mut gg = g.clone();
                if !*keep {
                    gg = gg.insert_axis(Axis(*axis));
                }
                let mut d = gg.broadcast(IxDyn(&s)).unwrap().to_owned();
                if matches!(node.op, Op::Mean { .. }) {
                    d /= s[*axis] as f64;
                }
                vec![(*x, d)]
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let gs = standard(g.clone());
                let mut d = gs.clone();
                for ((drow, grow), yrow) in d
                    .as_slice_mut()
                    .unwrap()
                    .chunks_mut(n)
                    .zip(gs.as_slice().unwrap().chunks(n))
                    .zip(y.as_slice().unwrap().chunks(n))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for k in 0..n {
                        drow[k] = yrow[k] * (grow[k] - dot);
                    }
                }
                vec![(*x, d)]
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = val(*x);
                let d = *xv.shape().last().unwrap();
                let gam = val(*gamma).as_slice().unwrap();
                let gs = standard(g.clone());
                let mut dx = ArrayD::<f64>::zeros(xv.raw_dim());
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for ((xrow, grow), dxrow) in xv
                    .as_slice()
                    .unwrap()
                    .chunks(d)
                    .zip(gs.as_slice().unwrap().chunks(d))
                    .zip(dx.as_slice_mut().unwrap().chunks_mut(d))
                {
                    let mean = xrow.iter().sum::<f64>() / d as f64;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xrow.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = (0..d).map(|k| grow[k] * gam[k]).collect();
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for k in 0..d {
                        dxrow[k] = inv * (dxhat[k] - m1 - xhat[k] * m2);
                        dgamma[k] += grow[k] * xhat[k];
                        dbeta[k] += grow[k];
                    }
                }
                vec![
                    (*x, dx),
                    (*gamma, ArrayD::from_shape_vec(IxDyn(&[d]), dgamma).unwrap()),
                    (*beta, ArrayD::from_shape_vec(IxDyn(&[d]), dbeta).unwrap()),
                ]
            }
        }
    }
}

/// Convenience: view a 2-D tensor.
pub fn view2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("2-d tensor")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum(w * f(inputs)))/d(input) for every
    /// element of every input.
    fn check<F>(shapes: &[&[usize]], seed: u64, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let eval = |inputs: &[Tensor]| -> (Graph, Vec<Var>, Var) {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
            let out = f(&mut g, &vars);
            (g, vars, out)
        };
        let (g0, _, out0) = eval(&inputs);
        let proj = {
            let mut r = ChaCha8Rng::seed_from_u64(seed + 1000);
            rand_tensor(&mut r, g0.shape(out0))
        };
        let loss = |inputs: &[Tensor]| -> f64 {
            let (g, _, out) = eval(inputs);
            (g.value(out) * &proj).sum()
        };
        let (g, vars, out) = eval(&inputs);
        let grads = g.backward_with(out, proj.clone());
        let h = 1e-5;
        for (k, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].raw_dim()));
            for idx in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].as_slice_mut().unwrap()[idx] += h;
                let mut minus = inputs.clone();
                minus[k].as_slice_mut().unwrap()[idx] -= h;
                let num = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-4);
                assert!(err < 1e-6, "input {k} idx {idx}: analytic {a} numeric {num}");
            }
        }
    }

    #[test]
    fn broadcast_arith_grads() {
        check(&[&[2, 3, 4], &[3, 1]], 1, |g, v| {
            let a = g.add(v[0], v[1]);
            let m = g.mul(a, v[1]);
            g.sub(m, v[0])
        });
        check(&[&[2, 3], &[1, 3]], 2, |g, v| {
            let s = g.sigmoid(v[1]);
            let d = g.scale(s, 2.0);
            let one = g.constant(Tensor::ones(IxDyn(&[1])));
            let den = g.add(d, one);
            g.div(v[0], den)
        });
    }

    #[test]
    fn unary_grads() {
        for f in [Unary::Neg, Unary::Abs, Unary::Sigmoid, Unary::Relu, Unary::Gelu, Unary::Square] {
            check(&[&[3, 5]], 3, move |g, v| g.unary(v[0], f));
        }
        check(&[&[3, 5]], 4, |g, v| {
            let sq = g.square(v[0]);
            let one = g.constant(Tensor::ones(IxDyn(&[1])));
            let p = g.add(sq, one);
            g.sqrt(p)
        });
    }

    #[test]
    fn linear_and_matmul_grads() {
        check(&[&[2, 3, 4], &[5, 4], &[5]], 5, |g, v| g.linear(v[0], v[1], Some(v[2])));
        check(&[&[2, 3, 4], &[2, 4, 2]], 6, |g, v| g.matmul(v[0], v[1]));
        check(&[&[2, 3, 4]], 7, |g, v| g.transpose(v[0]));
    }

    #[test]
    fn conv_and_pool_grads() {
        check(&[&[2, 3, 5, 4], &[4, 3, 3, 3], &[4]], 8, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 2, 1)
        });
        check(&[&[1, 2, 4, 4], &[3, 2, 1, 1]], 9, |g, v| g.conv2d(v[0], v[1], None, 1, 0));
        check(&[&[2, 2, 4, 6]], 10, |g, v| g.avg_pool2d(v[0], (2, 3)));
        check(&[&[1, 2, 5, 5]], 11, |g, v| g.max_pool2d(v[0]));
    }

    #[test]
    fn shape_op_grads() {
        check(&[&[2, 3], &[2, 2]], 12, |g, v| g.concat(&[v[0], v[1]], 1));
        check(&[&[2, 3, 4]], 13, |g, v| g.permute(v[0], &[2, 0, 1]));
        check(&[&[2, 3, 4]], 14, |g, v| g.reshape(v[0], &[6, 4]));
        check(&[&[4, 3, 2]], 20, |g, v| g.narrow(v[0], 0, 1, 2));
        check(&[&[2, 3, 4]], 15, |g, v| g.sum_axis(v[0], 1, false));
        check(&[&[2, 3, 4]], 16, |g, v| g.mean_axis(v[0], 2, true));
        check(&[&[2, 3, 4]], 17, |g, v| g.mean_all(v[0]));
    }

    #[test]
    fn softmax_and_layer_norm_grads() {
        check(&[&[2, 3, 5]], 18, |g, v| g.softmax(v[0]));
        check(&[&[2, 3, 6], &[6], &[6]], 19, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    }

    #[test]
    fn softmax_rows_sum_to_one_with_large_logits() {
        let mut g = Graph::new();
        let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1000.0, 999.0, -1000.0, 0.0, 0.0, 0.0]).unwrap());
        let y = g.softmax(x);
        for row in g.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::ones(IxDyn(&[3])));
        let p = g.param(Tensor::ones(IxDyn(&[3])));
        let m = g.mul(c, p);
        let l = g.sum_all(m);
        let grads = g.backward(l);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().as_slice().unwrap(), &[1.0, 1.0, 1.0]);
    }
}
