//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Every forward primitive appends one node to the [`Tape`] and returns a
//! [`Var`] handle. Nodes only ever reference earlier nodes, so the tape order
//! is a topological order and [`Tape::backward`] is a single reverse sweep.
//! Complex values are carried as a leading axis of length 2 (re, im).
//!
//! ```
//! use mixse::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let y = tape.dot(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod gradcheck;
mod kernels;
mod tensor;

pub use tensor::Tensor;

use kernels::ConvDims;
use tensor::numel;

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Stride and padding of a 2-D convolution over `[channel, freq, time]`.
/// Padding is applied before the first row/column (`pad_*_lo`) and after the
/// last (`pad_*_hi`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride_f: usize,
    pub stride_t: usize,
    pub pad_f_lo: usize,
    pub pad_f_hi: usize,
    pub pad_t_lo: usize,
    pub pad_t_hi: usize,
}

impl ConvGeometry {
    pub const POINTWISE: ConvGeometry = ConvGeometry {
        stride_f: 1,
        stride_t: 1,
        pad_f_lo: 0,
        pad_f_hi: 0,
        pad_t_lo: 0,
        pad_t_hi: 0,
    };
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Conv2d(Var, Var, ConvDims),
    // dims describe the forward convolution this op is the adjoint of
    ConvTranspose2d(Var, Var, ConvDims),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Pow(Var, f64),
    Log(Var),
    ComplexAbs(Var),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Reshape(Var),
    Transpose(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of a forward computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::invalid(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input; receives a gradient on backward.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Fixed input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Gradient from the most recent [`Tape::backward`]; `None` if the node
    /// was not reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient, or zeros of the node's shape if it was not reached.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    fn binary_same_shape(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_vec(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    /// Element-wise `x^p`; inputs are expected to be positive when `p` is
    /// not an integer.
    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Pow(a, p), |x| x.powf(p))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    /// Magnitude of a complex tensor `[2, ...]`, giving `[1, ...]`. The
    /// derivative at the origin is taken as zero.
    pub fn complex_abs(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.shape().first() != Some(&2) {
            return Err(Error::invalid(format!(
                "complex_abs expects a leading axis of 2, got {:?}",
                va.shape()
            )));
        }
        let half = va.len() / 2;
        let (re, im) = va.data().split_at(half);
        let data = re.iter().zip(im).map(|(r, i)| r.hypot(*i)).collect();
        let mut shape = va.shape().to_vec();
        shape[0] = 1;
        let value = Tensor::from_vec(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::ComplexAbs(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Tensor::scalar(v.sum() / v.len().max(1) as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Inner product of two equally shaped tensors (flattened).
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("dot", va.shape(), vb.shape()));
        }
        let s = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::from_vec(vec![m, n], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `x[m, n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || numel(sb) != sx[1] {
            return Err(shape_err("add_row_bias", sx, sb));
        }
        let n = sx[1];
        let b = self.value(bias).data();
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += b[i % n];
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddRowBias(x, bias), rg))
    }

    /// `x[c, ...] + bias[c]` broadcast over all trailing axes.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.is_empty() || numel(sb) != sx[0] {
            return Err(shape_err("add_channel_bias", sx, sb));
        }
        let per = numel(&sx[1..]);
        let b = self.value(bias).data();
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += b[i / per];
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddChannelBias(x, bias), rg))
    }

    /// Strided convolution of `x[cin, f, t]` with `w[cout, cin, kf, kt]`.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] {
            return Err(shape_err("conv2d", sx, sw));
        }
        if geom.stride_f == 0 || geom.stride_t == 0 {
            return Err(Error::invalid("conv2d: zero stride"));
        }
        let (kf, kt) = (sw[2], sw[3]);
        let span_f = sx[1] + geom.pad_f_lo + geom.pad_f_hi;
        let span_t = sx[2] + geom.pad_t_lo + geom.pad_t_hi;
        if span_f < kf || span_t < kt {
            return Err(shape_err("conv2d (kernel larger than input)", sx, sw));
        }
        let dims = ConvDims {
            cin: sx[0],
            cout: sw[0],
            in_f: sx[1],
            in_t: sx[2],
            out_f: (span_f - kf) / geom.stride_f + 1,
            out_t: (span_t - kt) / geom.stride_t + 1,
            kf,
            kt,
            stride_f: geom.stride_f,
            stride_t: geom.stride_t,
            pad_f: geom.pad_f_lo,
            pad_t: geom.pad_t_lo,
        };
        let data = kernels::conv_forward(self.value(x).data(), self.value(w).data(), &dims);
        let value = Tensor::from_vec(vec![dims.cout, dims.out_f, dims.out_t], data)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::Conv2d(x, w, dims), rg))
    }

    /// Transposed convolution of `x[cin, f, t]` with `w[cin, cout, kf, kt]`
    /// into an output of `out_f x out_t`:
    /// `out[co, f*sf + j - pad_f_lo, t*st + i - pad_t_lo] += x[ci, f, t] w[ci, co, j, i]`.
    /// Contributions falling outside the output are dropped.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        geom: ConvGeometry,
        out_f: usize,
        out_t: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[0] {
            return Err(shape_err("conv_transpose2d", sx, sw));
        }
        if geom.stride_f == 0 || geom.stride_t == 0 {
            return Err(Error::invalid("conv_transpose2d: zero stride"));
        }
        // forward convolution whose input is our output and whose output is our input
        let dims = ConvDims {
            cin: sw[1],
            cout: sw[0],
            in_f: out_f,
            in_t: out_t,
            out_f: sx[1],
            out_t: sx[2],
            kf: sw[2],
            kt: sw[3],
            stride_f: geom.stride_f,
            stride_t: geom.stride_t,
            pad_f: geom.pad_f_lo,
            pad_t: geom.pad_t_lo,
        };
        let mut data = vec![0.0; dims.cin * out_f * out_t];
        kernels::conv_backward_data(self.value(w).data(), self.value(x).data(), &mut data, &dims);
        let value = Tensor::from_vec(vec![dims.cin, out_f, out_t], data)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::ConvTranspose2d(x, w, dims), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::from_vec(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Sub-range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::invalid(format!(
                "slice {start}..{end} on axis {axis} of {s:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src = self.value(a).data();
        let width = (end - start) * inner;
        let mut data = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let off = (o * len + start) * inner;
            data.extend_from_slice(&src[off..off + width]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let value = Tensor::from_vec(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Slice(a, axis, start), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::invalid(format!("transpose expects 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let value = Tensor::from_vec(vec![c, r], transpose2(self.value(a).data(), r, c))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    /// Populates the gradient of `loss` with respect to every node it depends
    /// on. Earlier gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| Tensor::zeros(n.value.shape()));
            f(buf.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gd));
                acc(*b, &mut |gb| add_into(gb, gd));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gd));
                acc(*b, &mut |gb| {
                    for (o, &x) in gb.iter_mut().zip(gd) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) | Op::Dot(a, b) => {
                let scalar_out = matches!(node.op, Op::Dot(..));
                let (va, vb) = (val(*a), val(*b));
                let gat = |i: usize| if scalar_out { gd[0] } else { gd[i] };
                acc(*a, &mut |ga| {
                    for (i, o) in ga.iter_mut().enumerate() {
                        *o += gat(i) * vb[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, o) in gb.iter_mut().enumerate() {
                        *o += gat(i) * va[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                for (o, &x) in ga.iter_mut().zip(gd) {
                    *o += c * x;
                }
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, gd)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                acc(*a, &mut |ga| kernels::matmul_grad_lhs(gd, val(*b), ga, m, k, n));
                acc(*b, &mut |gb| kernels::matmul_grad_rhs(val(*a), gd, gb, m, k, n));
            }
            Op::AddRowBias(x, b) => {
                acc(*x, &mut |gx| add_into(gx, gd));
                acc(*b, &mut |gb| {
                    let n = gb.len();
                    for (i, &x) in gd.iter().enumerate() {
                        gb[i % n] += x;
                    }
                });
            }
            Op::AddChannelBias(x, b) => {
                acc(*x, &mut |gx| add_into(gx, gd));
                acc(*b, &mut |gb| {
                    let per = gd.len() / gb.len();
                    for (c, o) in gb.iter_mut().enumerate() {
                        *o += gd[c * per..(c + 1) * per].iter().sum::<f64>();
                    }
                });
            }
            Op::Conv2d(x, w, dims) => {
                acc(*x, &mut |gx| kernels::conv_backward_data(val(*w), gd, gx, dims));
                acc(*w, &mut |gw| kernels::conv_backward_weight(val(*x), gd, gw, dims));
            }
            Op::ConvTranspose2d(x, w, dims) => {
                acc(*x, &mut |gx| {
                    let y = kernels::conv_forward(gd, val(*w), dims);
                    add_into(gx, &y);
                });
                acc(*w, &mut |gw| kernels::conv_backward_weight(gd, val(*x), gw, dims));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += gd[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += gd[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let x = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += if x[i] > 0.0 { gd[i] } else { slope * gd[i] };
                    }
                });
            }
            Op::Pow(a, p) => {
                let x = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += gd[i] * p * x[i].powf(p - 1.0);
                    }
                });
            }
            Op::Log(a) => {
                let x = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += gd[i] / x[i];
                    }
                });
            }
            Op::ComplexAbs(a) => {
                let x = val(*a);
                let m = node.value.data();
                let half = m.len();
                acc(*a, &mut |ga| {
                    for i in 0..half {
                        if m[i] > 0.0 {
                            ga[i] += gd[i] * x[i] / m[i];
                            ga[half + i] += gd[i] * x[half + i] / m[i];
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| {
                for o in ga.iter_mut() {
                    *o += gd[0];
                }
            }),
            Op::Mean(a) => acc(*a, &mut |ga| {
                let s = gd[0] / ga.len() as f64;
                for o in ga.iter_mut() {
                    *o += s;
                }
            }),
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.nodes[p.0].value.shape()[*axis] * inner;
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let src = &gd[o * total + offset..o * total + offset + chunk];
                            add_into(&mut gp[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice(a, axis, start) => {
                let src_shape = self.nodes[a.0].value.shape();
                let (outer, len, inner) = split_axis(src_shape, *axis);
                let width = node.value.shape()[*axis] * inner;
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        let off = (o * len + start) * inner;
                        add_into(&mut ga[off..off + width], &gd[o * width..(o + 1) * width]);
                    }
                });
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let t = transpose2(gd, s[0], s[1]);
                acc(*a, &mut |ga| add_into(ga, &t));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

fn transpose2(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests;
