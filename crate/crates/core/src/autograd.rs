//! Minimal reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value, so node
//! order is already a topological order and [`Graph::backward`] is a single
//! reverse sweep. Nodes that do not depend on a gradient-requiring leaf are
//! skipped during the sweep, which keeps frozen-weight evaluation cheap.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::tensor::{col2im, gemm, im2col, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `x + constant`; only `x` carries gradient.
    Offset(Var),
    ChannelBias(Var, Var),
    Conv2d {
        x: Var,
        weight: Var,
        bias: Var,
        kernel: usize,
        in_channels: usize,
        height: usize,
        width: usize,
        cols: Option<Vec<f64>>,
    },
    Silu(Var),
    AvgPool2(Var),
    Upsample2(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    Sum(Var),
    SumSquares(Var),
    TotalVariation(Var),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar root with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(shape_err(format!("{what}: expected [c, h, w], got {:?}", t.shape()))),
    }
}

fn shape2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(shape_err(format!("{what}: expected a matrix, got {:?}", t.shape()))),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that gradients are accumulated into.
    pub fn variable(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Shares an already reference-counted tensor as a constant leaf.
    pub fn constant_rc(&self, t: Rc<Tensor>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(nodes.len() - 1)
    }

    /// Value of `v` as a new constant leaf: gradient stops here.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant_rc(value)
    }

    fn binary(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        va.ensure_same_shape(&vb, what)?;
        Ok(va.zip_map(&vb, f))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), self.rg(a) || self.rg(b)))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), self.rg(a))
    }

    pub fn offset(&self, a: Var, c: &Tensor) -> Result<Var> {
        let va = self.value(a);
        va.ensure_same_shape(c, "offset")?;
        let out = va.zip_map(c, |x, y| x + y);
        Ok(self.push(out, Op::Offset(a), self.rg(a)))
    }

    /// Adds `bias[c]` to every element of channel `c` of `x` (`x` is `[c, ...]`).
    pub fn channel_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.shape()[0];
        if vb.len() != c {
            return Err(shape_err(format!(
                "channel bias of {} for {c} channels",
                vb.len()
            )));
        }
        let per = vx.len() / c;
        let mut out = (*vx).clone();
        for (ci, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            let b = vb.data()[ci];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok(self.push(out, Op::ChannelBias(x, bias), self.rg(x) || self.rg(bias)))
    }

    /// Same-padded, stride-1 2-D convolution: `x [cin, h, w]`, `weight [cout, cin, k, k]`, `bias [cout]`.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(weight), self.value(bias));
        let (cin, h, w) = shape3(&vx, "conv2d input")?;
        let (cout, wcin, k) = match *vw.shape() {
            [o, i, k1, k2] if k1 == k2 && k1 % 2 == 1 => (o, i, k1),
            _ => return Err(shape_err(format!("conv2d weight {:?}", vw.shape()))),
        };
        if wcin != cin || vb.len() != cout {
            return Err(shape_err(format!(
                "conv2d input {:?} / weight {:?} / bias {:?}",
                vx.shape(),
                vw.shape(),
                vb.shape()
            )));
        }
        let hw = h * w;
        let kk = cin * k * k;
        let cols = im2col(vx.data(), cin, h, w, k);
        let mut out = vec![0.0; cout * hw];
        for (co, row) in out.chunks_mut(hw).enumerate() {
            row.fill(vb.data()[co]);
        }
        gemm(cout, kk, hw, 1.0, vw.data(), false, &cols, false, 1.0, &mut out);
        let keep_cols = self.rg(weight);
        let op = Op::Conv2d {
            x,
            weight,
            bias,
            kernel: k,
            in_channels: cin,
            height: h,
            width: w,
            cols: keep_cols.then_some(cols),
        };
        let rg = self.rg(x) || self.rg(weight) || self.rg(bias);
        Ok(self.push(Tensor::new(vec![cout, h, w], out)?, op, rg))
    }

    pub fn silu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), self.rg(x))
    }

    /// 2×2 average pooling of a `[c, h, w]` map with even `h`, `w`.
    pub fn avg_pool2(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (c, h, w) = shape3(&vx, "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err(format!("avg_pool2 needs even sides, got {h}×{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = vx.data();
        let out = Tensor::from_fn(&[c, oh, ow], |i| {
            let ci = i / (oh * ow);
            let y = (i / ow) % oh;
            let xx = i % ow;
            let base = ci * h * w + 2 * y * w + 2 * xx;
            0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1])
        });
        Ok(self.push(out, Op::AvgPool2(x), self.rg(x)))
    }

    /// Nearest-neighbour 2× upsampling of a `[c, h, w]` map.
    pub fn upsample2(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (c, h, w) = shape3(&vx, "upsample2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let src = vx.data();
        let out = Tensor::from_fn(&[c, oh, ow], |i| {
            let ci = i / (oh * ow);
            let y = (i / ow) % oh;
            let xx = i % ow;
            src[ci * h * w + (y / 2) * w + xx / 2]
        });
        Ok(self.push(out, Op::Upsample2(x), self.rg(x)))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = shape2(&va, "matmul lhs")?;
        let (k2, n) = shape2(&vb, "matmul rhs")?;
        if k != k2 {
            return Err(shape_err(format!(
                "matmul {:?} × {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, va.data(), false, vb.data(), false, 0.0, &mut out);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(a, b),
            self.rg(a) || self.rg(b),
        ))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (r, c) = shape2(&va, "transpose")?;
        let src = va.data();
        let out = Tensor::from_fn(&[c, r], |i| src[(i % r) * c + i / r]);
        Ok(self.push(out, Op::Transpose(a), self.rg(a)))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.value(a)).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), self.rg(a)))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (_, c) = shape2(&va, "softmax_rows")?;
        let mut out = (*va).clone();
        for row in out.data_mut().chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(self.push(out, Op::SoftmaxRows(a), self.rg(a)))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), self.rg(a))
    }

    pub fn sum_squares(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(a), self.rg(a))
    }

    /// Squared-difference total variation of a `[c, h, w]` map.
    pub fn total_variation(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (c, h, w) = shape3(&va, "total_variation")?;
        let s = tv_value(va.data(), c, h, w);
        Ok(self.push(Tensor::scalar(s), Op::TotalVariation(a), self.rg(a)))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.len() != 1 {
            return Err(shape_err("backward needs a scalar root"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape(), 1.0));

        let accumulate = |grads: &mut Vec<Option<Tensor>>, v: Var, g: Tensor| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_scaled(&g, 1.0),
                slot @ None => *slot = Some(g),
            }
        };

        for idx in (0..=root.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gout);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, gout.clone());
                    accumulate(&mut grads, *a, gout);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, gout.scale(-1.0));
                    accumulate(&mut grads, *a, gout);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    accumulate(&mut grads, *a, gout.zip_map(vb, |g, y| g * y));
                    accumulate(&mut grads, *b, gout.zip_map(va, |g, x| g * x));
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, gout.scale(*s)),
                Op::Offset(a) | Op::Reshape(a) => {
                    let shape = nodes[a.0].value.shape().to_vec();
                    accumulate(&mut grads, *a, gout.reshape(&shape)?);
                }
                Op::ChannelBias(x, b) => {
                    if nodes[b.0].requires_grad {
                        let c = nodes[b.0].value.len();
                        let per = gout.len() / c;
                        let gb: Vec<f64> =
                            gout.data().chunks(per).map(|ch| ch.iter().sum()).collect();
                        accumulate(&mut grads, *b, Tensor::new(nodes[b.0].value.shape().to_vec(), gb)?);
                    }
                    accumulate(&mut grads, *x, gout);
                }
                Op::Conv2d {
                    x,
                    weight,
                    bias,
                    kernel,
                    in_channels,
                    height,
                    width,
                    cols,
                } => {
                    let (k, cin, h, w) = (*kernel, *in_channels, *height, *width);
                    let hw = h * w;
                    let kk = cin * k * k;
                    let wval = &nodes[weight.0].value;
                    let cout = wval.shape()[0];
                    if nodes[bias.0].requires_grad {
                        let gb: Vec<f64> = gout.data().chunks(hw).map(|r| r.iter().sum()).collect();
                        accumulate(&mut grads, *bias, Tensor::new(vec![cout], gb)?);
                    }
                    if nodes[weight.0].requires_grad {
                        let cols = cols.as_ref().expect("columns kept for weight gradient");
                        let mut gw = vec![0.0; cout * kk];
                        gemm(cout, hw, kk, 1.0, gout.data(), false, cols, true, 0.0, &mut gw);
                        accumulate(&mut grads, *weight, Tensor::new(wval.shape().to_vec(), gw)?);
                    }
                    if nodes[x.0].requires_grad {
                        let mut gcols = vec![0.0; kk * hw];
                        gemm(kk, cout, hw, 1.0, wval.data(), true, gout.data(), false, 0.0, &mut gcols);
                        let gx = col2im(&gcols, cin, h, w, k);
                        accumulate(&mut grads, *x, Tensor::new(vec![cin, h, w], gx)?);
                    }
                }
                Op::Silu(a) => {
                    let va = &nodes[a.0].value;
                    let g = gout.zip_map(va, |g, x| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    });
                    accumulate(&mut grads, *a, g);
                }
                Op::AvgPool2(a) => {
                    let shape = nodes[a.0].value.shape().to_vec();
                    let (h, w) = (shape[1], shape[2]);
                    let (oh, ow) = (h / 2, w / 2);
                    let go = gout.data();
                    let g = Tensor::from_fn(&shape, |i| {
                        let ci = i / (h * w);
                        let y = (i / w) % h;
                        let xx = i % w;
                        0.25 * go[ci * oh * ow + (y / 2) * ow + xx / 2]
                    });
                    accumulate(&mut grads, *a, g);
                }
                Op::Upsample2(a) => {
                    let shape = nodes[a.0].value.shape().to_vec();
                    let (h, w) = (shape[1], shape[2]);
                    let ow = 2 * w;
                    let go = gout.data();
                    let g = Tensor::from_fn(&shape, |i| {
                        let ci = i / (h * w);
                        let y = (i / w) % h;
                        let xx = i % w;
                        let base = ci * 4 * h * w + 2 * y * ow + 2 * xx;
                        go[base] + go[base + 1] + go[base + ow] + go[base + ow + 1]
                    });
                    accumulate(&mut grads, *a, g);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = vb.shape()[1];
                    if nodes[a.0].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, 1.0, gout.data(), false, vb.data(), true, 0.0, &mut ga);
                        accumulate(&mut grads, *a, Tensor::new(vec![m, k], ga)?);
                    }
                    if nodes[b.0].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, 1.0, va.data(), true, gout.data(), false, 0.0, &mut gb);
                        accumulate(&mut grads, *b, Tensor::new(vec![k, n], gb)?);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    let go = gout.data();
                    let g = Tensor::from_fn(&[r, c], |i| go[(i % c) * r + i / c]);
                    accumulate(&mut grads, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let c = y.shape()[1];
                    let mut g = gout.clone();
                    for (grow, yrow) in g.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for (gv, yv) in grow.iter_mut().zip(yrow) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Sum(a) => {
                    let g0 = gout.data()[0];
                    let shape = nodes[a.0].value.shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::full(&shape, g0));
                }
                Op::SumSquares(a) => {
                    let g0 = gout.data()[0];
                    accumulate(&mut grads, *a, nodes[a.0].value.scale(2.0 * g0));
                }
                Op::TotalVariation(a) => {
                    let va = &nodes[a.0].value;
                    let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                    let g0 = gout.data()[0];
                    let mut g = Tensor::zeros(va.shape());
                    tv_grad(va.data(), c, h, w, g0, g.data_mut());
                    accumulate(&mut grads, *a, g);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn tv_value(x: &[f64], c: usize, h: usize, w: usize) -> f64 {
    let mut s = 0.0;
    for ci in 0..c {
        let p = &x[ci * h * w..(ci + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let v = p[i * w + j];
                if j >= 1 {
                    let d = v - p[i * w + j - 1];
                    s += d * d;
                }
                if i >= 1 {
                    let d = v - p[(i - 1) * w + j];
                    s += d * d;
                }
            }
        }
    }
    s
}

fn tv_grad(x: &[f64], c: usize, h: usize, w: usize, scale: f64, g: &mut [f64]) {
    for ci in 0..c {
        let off = ci * h * w;
        for i in 0..h {
            for j in 0..w {
                let here = off + i * w + j;
                if j >= 1 {
                    let d = 2.0 * scale * (x[here] - x[here - 1]);
                    g[here] += d;
                    g[here - 1] -= d;
                }
                if i >= 1 {
                    let d = 2.0 * scale * (x[here] - x[here - w]);
                    g[here] += d;
                    g[here - w] -= d;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(f)/d(input) against the tape.
    fn check<F>(input: Tensor, f: F)
    where
        F: Fn(&Graph, Var) -> Var,
    {
        let g = Graph::new();
        let x = g.variable(input.clone());
        let out = f(&g, x);
        let grads = g.backward(out).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut t = input.clone();
                t.data_mut()[i] += delta;
                let g = Graph::new();
                let x = g.constant(t);
                let o = f(&g, x);
                g.scalar(o)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = numeric.abs().max(a.abs()).max(1e-3);
            assert!(
                (numeric - a).abs() / denom < 1e-5,
                "element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn conv_input_and_weight_gradients() {
        let w = rand_tensor(&[3, 2, 3, 3], 1);
        let b = rand_tensor(&[3], 2);
        let x = rand_tensor(&[2, 4, 5], 3);
        let probe = rand_tensor(&[3, 4, 5], 4);
        let (w2, b2, p2) = (w.clone(), b.clone(), probe.clone());
        check(x.clone(), move |g, x| {
            let w = g.constant(w2.clone());
            let b = g.constant(b2.clone());
            let y = g.conv2d(x, w, b).unwrap();
            let p = g.constant(p2.clone());
            g.sum(g.mul(y, p).unwrap())
        });
        check(w, move |g, w| {
            let x = g.constant(x.clone());
            let b = g.constant(b.clone());
            let y = g.conv2d(x, w, b).unwrap();
            let p = g.constant(probe.clone());
            g.sum(g.mul(y, p).unwrap())
        });
    }

    #[test]
    fn pooling_upsampling_silu_gradients() {
        let probe = rand_tensor(&[2, 4, 4], 9);
        check(rand_tensor(&[2, 4, 4], 5), move |g, x| {
            let y = g.silu(g.upsample2(g.avg_pool2(x).unwrap()).unwrap());
            let p = g.constant(probe.clone());
            g.sum_squares(g.mul(y, p).unwrap())
        });
    }

    #[test]
    fn attention_style_chain_gradients() {
        let k = rand_tensor(&[3, 4], 6);
        let v = rand_tensor(&[4, 2], 7);
        check(rand_tensor(&[5, 3], 8), move |g, q| {
            let k = g.constant(k.clone());
            let v = g.constant(v.clone());
            let s = g.softmax_rows(g.matmul(q, k).unwrap()).unwrap();
            let o = g.matmul(s, v).unwrap();
            let ot = g.transpose(o).unwrap();
            let r = g.reshape(ot, &[1, 2, 5]).unwrap();
            g.total_variation(r).unwrap()
        });
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let g = Graph::new();
        let a = g.variable(Tensor::full(&[2], 1.0));
        let c = g.constant(Tensor::full(&[2], 3.0));
        let y = g.sum(g.mul(a, c).unwrap());
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 3.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = Graph::new();
        let a = g.variable(Tensor::full(&[2], 2.0));
        let d = g.detach(a);
        let y = g.sum(g.mul(a, d).unwrap());
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 2.0]);
    }
}
