//! Forward constructors for every primitive plus the matching backward rules.

use super::graph::{ConvGeom, Node, Op};
use super::{split_axis, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &s)| s)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

impl<T: Scalar> Graph<T> {
    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data,
        };
        Ok(self.push(value, op, &[a, b]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x);
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| f(v)).collect(),
        };
        self.push(value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[..., d] + bias[d]`, broadcasting the bias over every leading index.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = *tx.shape().last().unwrap_or(&0);
        if tb.len() != d {
            return Err(mismatch("add_row_bias", tx.shape(), tb.shape()));
        }
        let data = tx
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(&a, &b)| a + b))
            .collect();
        let value = Tensor {
            shape: tx.shape().to_vec(),
            data,
        };
        Ok(self.push(value, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let c = T::of(factor);
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            ta.data(),
            (k as isize, 1),
            tb.data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(value, Op::Matmul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 2 {
            return Err(mismatch("transpose", s, &[0, 0]));
        }
        let (m, n) = (s[0], s[1]);
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = t.data()[i * n + j];
            }
        }
        let value = Tensor {
            shape: vec![n, m],
            data,
        };
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(Error::EmptyParts)?;
        let base = self.shape(*first).to_vec();
        split_axis(&base, axis)?;
        let mut axis_total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            axis_total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = split_axis(&shape, axis)?;
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor { shape, data };
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = t.split_axis(axis)?;
        let inv = T::one() / T::of(len as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &t.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor {
            shape: reduced_shape(t.shape(), axis),
            data,
        };
        Ok(self.push(value, Op::Mean { x, axis }, &[x]))
    }

    /// Maximum along `axis`; the first maximal element receives the gradient.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = t.split_axis(axis)?;
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        let mut margin = T::infinity();
        for o in 0..outer {
            for i in 0..inner {
                let window = (0..len).map(|j| (o * len + j) * inner + i);
                let best = first_max(t.data(), window.clone());
                margin = margin.min(runner_up_gap(t.data(), window, best));
                argmax.push(best);
                data.push(t.data()[best]);
            }
        }
        let value = Tensor {
            shape: reduced_shape(t.shape(), axis),
            data,
        };
        Ok(self.push(value, Op::Max { x, argmax, margin }, &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.normalize_exp(x, axis, false)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.normalize_exp(x, axis, true)?;
        Ok(self.push(value, Op::LogSoftmax { x, axis }, &[x]))
    }

    fn normalize_exp(&self, x: Var, axis: usize, log: bool) -> Result<Tensor<T>> {
        let t = self.value(x);
        if !t.all_finite() {
            return Err(Error::NonFinite(if log { "log_softmax" } else { "softmax" }));
        }
        let (outer, len, inner) = t.split_axis(axis)?;
        let mut data = vec![T::zero(); t.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let m = (0..len)
                    .map(|j| t.data()[at(j)])
                    .fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..len {
                    let e = (t.data()[at(j)] - m).exp();
                    data[at(j)] = e;
                    z += e;
                }
                if log {
                    let lz = z.ln() + m;
                    for j in 0..len {
                        data[at(j)] = t.data()[at(j)] - lz;
                    }
                } else {
                    for j in 0..len {
                        data[at(j)] = data[at(j)] / z;
                    }
                }
            }
        }
        Ok(Tensor {
            shape: t.shape().to_vec(),
            data,
        })
    }

    /// Normalizes each row over the last axis (population variance), then
    /// applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().unwrap_or(&0);
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != d || tb.len() != d {
            return Err(mismatch("layer_norm", t.shape(), tg.shape()));
        }
        let rows = t.len() / d;
        let inv_d = T::one() / T::of(d as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); t.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = vec![T::zero(); t.len()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                data[r * d + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let value = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// `out.flat[i] = x.flat[index[i]]`. Indices may repeat; the backward
    /// pass scatter-adds.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != index.len() {
            return Err(mismatch("gather", shape, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= t.len()) {
            return Err(mismatch("gather", t.shape(), &[bad]));
        }
        let data = index.iter().map(|&i| t.data()[i]).collect();
        let value = Tensor {
            shape: shape.to_vec(),
            data,
        };
        Ok(self.push(value, Op::Gather { x, index }, &[x]))
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[0] {
            return Err(mismatch("rows", &s, &[start, len]));
        }
        let d = s[1];
        self.gather(x, (start * d..(start + len) * d).collect(), &[len, d])
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn columns(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(mismatch("columns", &s, &[start, len]));
        }
        let (m, n) = (s[0], s[1]);
        let index = (0..m)
            .flat_map(|i| (start..start + len).map(move |j| i * n + j))
            .collect();
        self.gather(x, index, &[m, len])
    }

    /// Row `i` of the output is row `order[i]` of the input.
    pub fn permute_rows(&mut self, x: Var, order: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || order.len() != s[0] {
            return Err(mismatch("permute_rows", &s, &[order.len()]));
        }
        let d = s[1];
        let index = order.iter().flat_map(|&r| r * d..(r + 1) * d).collect();
        self.gather(x, index, &s)
    }

    /// Stride-1 convolution with zero padding `kernel / 2`.
    /// `x: [B, C_in, H, W]`, `w: [C_out, C_in, k, k]`, `b: [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(mismatch("conv2d", sx, sw));
        }
        if sb != [sw[0]] {
            return Err(mismatch("conv2d bias", sw, sb));
        }
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            c_out: sw[0],
            height: sx[2],
            width: sx[3],
            kernel: sw[2],
            pad: sw[2] / 2,
        };
        let keep_cols = self.requires_grad(w) || self.requires_grad(x);
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (patch, plane) = (geom.patch(), geom.plane());
        let mut out = vec![T::zero(); geom.batch * geom.c_out * plane];
        let mut cols_all = if keep_cols {
            vec![T::zero(); geom.batch * patch * plane]
        } else {
            Vec::new()
        };
        let mut scratch = vec![T::zero(); if keep_cols { 0 } else { patch * plane }];
        for bi in 0..geom.batch {
            let img = &tx.data()[bi * geom.c_in * plane..(bi + 1) * geom.c_in * plane];
            let cols = if keep_cols {
                &mut cols_all[bi * patch * plane..(bi + 1) * patch * plane]
            } else {
                &mut scratch[..]
            };
            im2col(img, &geom, cols);
            let o = &mut out[bi * geom.c_out * plane..(bi + 1) * geom.c_out * plane];
            for (c, chunk) in o.chunks_mut(plane).enumerate() {
                chunk.fill(tb.data()[c]);
            }
            T::gemm(
                geom.c_out,
                patch,
                plane,
                tw.data(),
                (patch as isize, 1),
                cols,
                (plane as isize, 1),
                T::one(),
                o,
                (plane as isize, 1),
            );
        }
        let value = Tensor {
            shape: vec![geom.batch, geom.c_out, geom.height, geom.width],
            data: out,
        };
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                cols: cols_all,
                geom,
            },
            &[x, w, b],
        ))
    }

    /// Non-overlapping `k x k` max pooling over `[B, C, H, W]`.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(mismatch("max_pool2d", s, &[k, k]));
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let mut data = Vec::with_capacity(bc * oh * ow);
        let mut argmax = Vec::with_capacity(bc * oh * ow);
        let mut margin = T::infinity();
        for p in 0..bc {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let window = (0..k * k).map(|j| base + (oy * k + j / k) * w + ox * k + j % k);
                    let best = first_max(t.data(), window.clone());
                    margin = margin.min(runner_up_gap(t.data(), window, best));
                    argmax.push(best);
                    data.push(t.data()[best]);
                }
            }
        }
        let value = Tensor {
            shape: vec![s[0], s[1], oh, ow],
            data,
        };
        Ok(self.push(value, Op::MaxPool2d { x, argmax, margin }, &[x]))
    }
}

/// Index of the first maximal element.
fn first_max<T: Scalar>(data: &[T], mut window: impl Iterator<Item = usize>) -> usize {
    let first = window.next().expect("non-empty window");
    window.fold(first, |best, idx| if data[idx] > data[best] { idx } else { best })
}

/// Distance from the maximum to the largest strictly smaller element.
/// Exact ties (e.g. several clamped zeros) do not count.
fn runner_up_gap<T: Scalar>(data: &[T], window: impl Iterator<Item = usize>, best: usize) -> T {
    let top = data[best];
    window
        .filter(|&i| data[i] < top)
        .map(|i| top - data[i])
        .fold(T::infinity(), T::min)
}

fn gelu<T: Scalar>(x: T) -> T {
    let (c, k, half) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5));
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, k, half) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5));
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (h, w, k, pad) = (g.height as isize, g.width as isize, g.kernel, g.pad as isize);
    let plane = g.plane();
    for c in 0..g.c_in {
        let src = &img[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                for y in 0..h {
                    let iy = y + dy;
                    let line = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if iy < 0 || iy >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    for x in 0..w {
                        let ix = x + dx;
                        line[x as usize] = if ix < 0 || ix >= w {
                            T::zero()
                        } else {
                            src[(iy * w + ix) as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let (h, w, k, pad) = (g.height as isize, g.width as isize, g.kernel, g.pad as isize);
    let plane = g.plane();
    for c in 0..g.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                for y in 0..h {
                    let iy = y + dy;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for x in 0..w {
                        let ix = x + dx;
                        if ix >= 0 && ix < w {
                            img[c * plane + (iy * w + ix) as usize] += src[(y * w + x) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Mutable gradient slot for `v`, allocated on first use. `None` when `v`
/// does not take part in differentiation.
fn slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut [T]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn acc_each<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    f: impl Fn(usize) -> T,
) {
    if let Some(s) = slot(nodes, grads, v) {
        for (i, d) in s.iter_mut().enumerate() {
            *d += f(i);
        }
    }
}

pub(crate) fn backward_rule<T: Scalar>(
    nodes: &[Node<T>],
    i: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |v: Var| nodes[v.0].value.data();
    let out = nodes[i].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_each(nodes, grads, *a, |k| g[k]);
            acc_each(nodes, grads, *b, |k| g[k]);
        }
        Op::Sub(a, b) => {
            acc_each(nodes, grads, *a, |k| g[k]);
            acc_each(nodes, grads, *b, |k| -g[k]);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            acc_each(nodes, grads, *a, |k| g[k] * vb[k]);
            acc_each(nodes, grads, *b, |k| g[k] * va[k]);
        }
        Op::AddRowBias(x, bias) => {
            acc_each(nodes, grads, *x, |k| g[k]);
            if let Some(s) = slot(nodes, grads, *bias) {
                let d = s.len();
                for row in g.chunks(d) {
                    for (acc, &v) in s.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
        }
        Op::Scale(x, c) => acc_each(nodes, grads, *x, |k| g[k] * *c),
        Op::Relu(x) => {
            let vx = val(*x);
            acc_each(nodes, grads, *x, |k| {
                if vx[k] > T::zero() {
                    g[k]
                } else {
                    T::zero()
                }
            });
        }
        Op::Gelu(x) => {
            let vx = val(*x);
            acc_each(nodes, grads, *x, |k| g[k] * gelu_grad(vx[k]));
        }
        Op::Exp(x) => acc_each(nodes, grads, *x, |k| g[k] * out[k]),
        Op::Log(x) => {
            let vx = val(*x);
            acc_each(nodes, grads, *x, |k| g[k] / vx[k]);
        }
        Op::Matmul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (va, vb) = (val(*a), val(*b));
            if let Some(s) = slot(nodes, grads, *a) {
                // dA = G * B^T
                T::gemm(
                    m,
                    n,
                    k,
                    g,
                    (n as isize, 1),
                    vb,
                    (1, n as isize),
                    T::one(),
                    s,
                    (k as isize, 1),
                );
            }
            if let Some(s) = slot(nodes, grads, *b) {
                // dB = A^T * G
                T::gemm(
                    k,
                    m,
                    n,
                    va,
                    (1, k as isize),
                    g,
                    (n as isize, 1),
                    T::one(),
                    s,
                    (n as isize, 1),
                );
            }
        }
        Op::Transpose(x) => {
            let s = nodes[x.0].value.shape();
            let (m, n) = (s[0], s[1]);
            // input (i, j) maps to output (j, i)
            acc_each(nodes, grads, *x, |idx| g[(idx % n) * m + idx / n]);
        }
        Op::Reshape(x) => acc_each(nodes, grads, *x, |k| g[k]),
        Op::Concat { inputs, axis } => {
            let shape = nodes[i].value.shape();
            let (outer, total, inner) = split_axis(shape, *axis).expect("validated in forward");
            let mut offset = 0;
            for &v in inputs {
                let len = nodes[v.0].value.shape()[*axis];
                if let Some(s) = slot(nodes, grads, v) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        for (acc, &d) in s[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                            *acc += d;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Sum(x) => acc_each(nodes, grads, *x, |_| g[0]),
        Op::Mean { x, axis } => {
            let (_, len, inner) =
                split_axis(nodes[x.0].value.shape(), *axis).expect("validated in forward");
            let inv = T::one() / T::of(len as f64);
            acc_each(nodes, grads, *x, |k| g[k / (len * inner) * inner + k % inner] * inv);
        }
        Op::Max { x, argmax, .. } | Op::MaxPool2d { x, argmax, .. } => {
            if let Some(s) = slot(nodes, grads, *x) {
                for (o, &src) in argmax.iter().enumerate() {
                    s[src] += g[o];
                }
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_axis(nodes[i].value.shape(), *axis).expect("validated");
            if let Some(s) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for inn in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + inn;
                        let dot: T = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                        for j in 0..len {
                            s[at(j)] += out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax { x, axis } => {
            let (outer, len, inner) = split_axis(nodes[i].value.shape(), *axis).expect("validated");
            if let Some(s) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for inn in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + inn;
                        let total: T = (0..len).map(|j| g[at(j)]).sum();
                        for j in 0..len {
                            s[at(j)] += g[at(j)] - out[at(j)].exp() * total;
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = nodes[gamma.0].value.len();
            let vg = val(*gamma);
            if let Some(s) = slot(nodes, grads, *gamma) {
                for (r, row) in g.chunks(d).enumerate() {
                    for j in 0..d {
                        s[j] += row[j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *beta) {
                for row in g.chunks(d) {
                    for (acc, &v) in s.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *x) {
                let inv_d = T::one() / T::of(d as f64);
                for (r, row) in g.chunks(d).enumerate() {
                    let h = &xhat[r * d..(r + 1) * d];
                    let dh: Vec<T> = (0..d).map(|j| row[j] * vg[j]).collect();
                    let sum_dh: T = dh.iter().copied().sum();
                    let sum_dh_h: T = dh.iter().zip(h).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        s[r * d + j] += inv_std[r] * inv_d
                            * (T::of(d as f64) * dh[j] - sum_dh - h[j] * sum_dh_h);
                    }
                }
            }
        }
        Op::Gather { x, index } => {
            if let Some(s) = slot(nodes, grads, *x) {
                for (o, &src) in index.iter().enumerate() {
                    s[src] += g[o];
                }
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            cols,
            geom,
        } => {
            let (patch, plane) = (geom.patch(), geom.plane());
            let per_out = geom.c_out * plane;
            if let Some(s) = slot(nodes, grads, *b) {
                for bi in 0..geom.batch {
                    for (c, acc) in s.iter_mut().enumerate() {
                        let start = bi * per_out + c * plane;
                        *acc += g[start..start + plane].iter().copied().sum::<T>();
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *w) {
                for bi in 0..geom.batch {
                    // dW += G_b * cols_b^T
                    T::gemm(
                        geom.c_out,
                        plane,
                        patch,
                        &g[bi * per_out..(bi + 1) * per_out],
                        (plane as isize, 1),
                        &cols[bi * patch * plane..(bi + 1) * patch * plane],
                        (1, plane as isize),
                        T::one(),
                        s,
                        (patch as isize, 1),
                    );
                }
            }
            let vw = val(*w);
            if let Some(s) = slot(nodes, grads, *x) {
                let mut dcols = vec![T::zero(); patch * plane];
                let per_in = geom.c_in * plane;
                for bi in 0..geom.batch {
                    // dcols = W^T * G_b
                    T::gemm(
                        patch,
                        geom.c_out,
                        plane,
                        vw,
                        (1, patch as isize),
                        &g[bi * per_out..(bi + 1) * per_out],
                        (plane as isize, 1),
                        T::zero(),
                        &mut dcols,
                        (plane as isize, 1),
                    );
                    col2im_add(&dcols, geom, &mut s[bi * per_in..(bi + 1) * per_in]);
                }
            }
        }
    }
}
