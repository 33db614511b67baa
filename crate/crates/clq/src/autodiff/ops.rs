//! Forward constructors and backward rules for every tensor op.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::conv::{
    bilinear_coord_grad, bilinear_scatter, bilinear_value, col2im_acc, conv_output_size, im2col,
    matmul_abt_acc, matmul_acc, matmul_atb_acc,
};
use super::{numel, Tensor};

pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, f64),
    PowScalar(Tensor, f64),
    Exp(Tensor),
    Log(Tensor),
    Sigmoid(Tensor),
    Relu(Tensor),
    Clamp(Tensor, f64, f64),
    Minimum(Tensor, Tensor),
    Maximum(Tensor, Tensor),
    SumAll(Tensor),
    MeanAll(Tensor),
    SumAxis(Tensor, usize),
    MeanAxis(Tensor, usize),
    MatMul(Tensor, Tensor),
    Conv2d {
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    BilinearSample {
        feat: Tensor,
        xs: Tensor,
        ys: Tensor,
    },
    Reshape(Tensor),
    GatherCols(Tensor, Vec<usize>),
    Row(Tensor, usize),
    RepeatRow(Tensor, usize),
    RepeatCol(Tensor, usize),
    ConcatLast(Vec<Tensor>),
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<Tensor> {
        match self {
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Minimum(a, b)
            | Op::Maximum(a, b)
            | Op::MatMul(a, b) => vec![a.clone(), b.clone()],
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::PowScalar(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Clamp(a, _, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::Reshape(a)
            | Op::GatherCols(a, _)
            | Op::Row(a, _)
            | Op::RepeatRow(a, _)
            | Op::RepeatCol(a, _) => vec![a.clone()],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![input.clone(), weight.clone(), bias.clone()],
            Op::BilinearSample { feat, xs, ys } => vec![feat.clone(), xs.clone(), ys.clone()],
            Op::ConcatLast(parts) => parts.clone(),
        }
    }

    pub(crate) fn backward(
        &self,
        out_shape: &[usize],
        out_values: &[f64],
        g: &[f64],
        table: &mut HashMap<u64, Vec<f64>>,
    ) {
        let acc = |table: &mut HashMap<u64, Vec<f64>>, t: &Tensor, f: &mut dyn FnMut(&mut [f64])| {
            let entry = table
                .entry(t.id())
                .or_insert_with(|| vec![0.0; t.len()]);
            f(entry);
        };

        match self {
            Op::Add(a, b) => {
                acc(table, a, &mut |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                acc(table, b, &mut |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(table, a, &mut |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                acc(table, b, &mut |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = a.inner.values.borrow();
                let bv = b.inner.values.borrow();
                acc(table, a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(table, b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = b.inner.values.borrow();
                acc(table, a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / bv[i];
                    }
                });
                acc(table, b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] -= g[i] * out_values[i] / bv[i];
                    }
                });
            }
            Op::AddScalar(a) => {
                acc(table, a, &mut |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::MulScalar(a, s) => {
                acc(table, a, &mut |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y * s;
                    }
                });
            }
            Op::PowScalar(a, p) => {
                let av = a.inner.values.borrow();
                acc(table, a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * p * av[i].powf(p - 1.0);
                    }
                });
            }
            Op::Exp(a) => {
                acc(table, a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * out_values[i];
                    }
                });
            }
            Op::Log(a) => {
                let av = a.inner.values.borrow();
                acc(table, a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / av[i];
                    }
                });
            }
            Op::Sigmoid(a) => {
                acc(table, a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * out_values[i] * (1.0 - out_values[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let av = a.inner.values.borrow();
                acc(table, a, &mut |d| {
                    for i in 0..d.len() {
                        if av[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = a.inner.values.borrow();
                acc(table, a, &mut |d| {
                    for i in 0..d.len() {
                        if av[i] >= *lo && av[i] <= *hi {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Minimum(a, b) => {
                let av = a.inner.values.borrow();
                let bv = b.inner.values.borrow();
                acc(table, a, &mut |d| {
                    for i in 0..d.len() {
                        if av[i] <= bv[i] {
                            d[i] += g[i];
                        }
                    }
                });
                acc(table, b, &mut |d| {
                    for i in 0..d.len() {
                        if bv[i] < av[i] {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Maximum(a, b) => {
                let av = a.inner.values.borrow();
                let bv = b.inner.values.borrow();
                acc(table, a, &mut |d| {
                    for i in 0..d.len() {
                        if av[i] >= bv[i] {
                            d[i] += g[i];
                        }
                    }
                });
                acc(table, b, &mut |d| {
                    for i in 0..d.len() {
                        if bv[i] > av[i] {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                acc(table, a, &mut |d| {
                    for x in d.iter_mut() {
                        *x += g[0];
                    }
                });
            }
            Op::MeanAll(a) => {
                let inv = 1.0 / a.len() as f64;
                acc(table, a, &mut |d| {
                    for x in d.iter_mut() {
                        *x += g[0] * inv;
                    }
                });
            }
            Op::SumAxis(a, axis) => {
                let (m, n) = (a.shape()[0], a.shape()[1]);
                acc(table, a, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += if *axis == 0 { g[j] } else { g[i] };
                        }
                    }
                });
            }
            Op::MeanAxis(a, axis) => {
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let inv = 1.0 / if *axis == 0 { m as f64 } else { n as f64 };
                acc(table, a, &mut |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += inv * if *axis == 0 { g[j] } else { g[i] };
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let av = a.inner.values.borrow();
                let bv = b.inner.values.borrow();
                acc(table, a, &mut |d| {
                    matmul_abt_acc(d, g, &bv, m, n, k);
                });
                acc(table, b, &mut |d| {
                    matmul_atb_acc(d, &av, g, m, k, n);
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                let (cout, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
                let oh = out_shape[1];
                let ow = out_shape[2];
                let ncols = oh * ow;
                let kdim = cin * kh * kw;

                let iv = input.inner.values.borrow();
                let wv = weight.inner.values.borrow();
                let cols = im2col(&iv, cin, h, w, kh, kw, *stride, *padding);

                acc(table, bias, &mut |d| {
                    for c in 0..cout {
                        let mut s = 0.0;
                        for j in 0..ncols {
                            s += g[c * ncols + j];
                        }
                        d[c] += s;
                    }
                });
                acc(table, weight, &mut |d| {
                    // dW = g @ cols^T
                    matmul_abt_acc(d, g, &cols, cout, ncols, kdim);
                });
                acc(table, input, &mut |d| {
                    // dcols = W^T @ g, folded back
                    let mut dcols = vec![0.0; kdim * ncols];
                    matmul_atb_acc(&mut dcols, &wv, g, cout, kdim, ncols);
                    col2im_acc(&dcols, d, cin, h, w, kh, kw, *stride, *padding);
                });
            }
            Op::BilinearSample { feat, xs, ys } => {
                let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
                let n = xs.len();
                let fv = feat.inner.values.borrow();
                let xv = xs.inner.values.borrow();
                let yv = ys.inner.values.borrow();

                acc(table, feat, &mut |d| {
                    for ch in 0..c {
                        let plane = &mut d[ch * h * w..(ch + 1) * h * w];
                        for i in 0..n {
                            bilinear_scatter(plane, h, w, xv[i], yv[i], g[ch * n + i]);
                        }
                    }
                });
                acc(table, xs, &mut |d| {
                    for i in 0..n {
                        let mut s = 0.0;
                        for ch in 0..c {
                            let plane = &fv[ch * h * w..(ch + 1) * h * w];
                            let (dx, _) = bilinear_coord_grad(plane, h, w, xv[i], yv[i]);
                            s += g[ch * n + i] * dx;
                        }
                        d[i] += s;
                    }
                });
                acc(table, ys, &mut |d| {
                    for i in 0..n {
                        let mut s = 0.0;
                        for ch in 0..c {
                            let plane = &fv[ch * h * w..(ch + 1) * h * w];
                            let (_, dy) = bilinear_coord_grad(plane, h, w, xv[i], yv[i]);
                            s += g[ch * n + i] * dy;
                        }
                        d[i] += s;
                    }
                });
            }
            Op::Reshape(a) => {
                acc(table, a, &mut |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::GatherCols(a, idx) => {
                let rank = a.shape().len();
                if rank == 1 {
                    acc(table, a, &mut |d| {
                        for (j, &src) in idx.iter().enumerate() {
                            d[src] += g[j];
                        }
                    });
                } else {
                    let (k, n) = (a.shape()[0], a.shape()[1]);
                    let m = idx.len();
                    acc(table, a, &mut |d| {
                        for r in 0..k {
                            for (j, &src) in idx.iter().enumerate() {
                                d[r * n + src] += g[r * m + j];
                            }
                        }
                    });
                }
            }
            Op::Row(a, i) => {
                let n = a.shape()[1];
                acc(table, a, &mut |d| {
                    for j in 0..n {
                        d[i * n + j] += g[j];
                    }
                });
            }
            Op::RepeatRow(a, m) => {
                let n = a.len();
                acc(table, a, &mut |d| {
                    for i in 0..*m {
                        for j in 0..n {
                            d[j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::RepeatCol(a, n) => {
                let m = a.len();
                acc(table, a, &mut |d| {
                    for i in 0..m {
                        for j in 0..*n {
                            d[i] += g[i * n + j];
                        }
                    }
                });
            }
            Op::ConcatLast(parts) => {
                let rank = parts[0].shape().len();
                if rank == 1 {
                    let mut off = 0;
                    for p in parts {
                        let n = p.len();
                        acc(table, p, &mut |d| {
                            for j in 0..n {
                                d[j] += g[off + j];
                            }
                        });
                        off += n;
                    }
                } else {
                    let k = parts[0].shape()[0];
                    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
                    let mut off = 0;
                    for p in parts {
                        let n = p.shape()[1];
                        acc(table, p, &mut |d| {
                            for r in 0..k {
                                for j in 0..n {
                                    d[r * n + j] += g[r * total + off + j];
                                }
                            }
                        });
                        off += n;
                    }
                }
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

#[inline]
fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let vals = self.inner.values.borrow().iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape().to_vec(), vals, Some(op))
    }

    fn binary(
        &self,
        other: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Tensor> {
        same_shape(name, self, other)?;
        let a = self.inner.values.borrow();
        let b = other.inner.values.borrow();
        let vals = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::new(self.shape().to_vec(), vals, Some(op)))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.clone(), other.clone()))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |x, y| x / y, Op::Div(self.clone(), other.clone()))
    }

    pub fn minimum(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(
            other,
            "minimum",
            f64::min,
            Op::Minimum(self.clone(), other.clone()),
        )
    }

    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(
            other,
            "maximum",
            f64::max,
            Op::Maximum(self.clone(), other.clone()),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.unary(|x| x + s, Op::AddScalar(self.clone()))
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        self.unary(|x| x * s, Op::MulScalar(self.clone(), s))
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    /// Elementwise x^p for constant p.
    pub fn powf(&self, p: f64) -> Tensor {
        self.unary(|x| x.powf(p), Op::PowScalar(self.clone(), p))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, Op::Log(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(stable_sigmoid, Op::Sigmoid(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), Op::Relu(self.clone()))
    }

    /// Clamp with pass-through gradient inside [lo, hi], zero outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(|x| x.clamp(lo, hi), Op::Clamp(self.clone(), lo, hi))
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.inner.values.borrow().iter().sum();
        Tensor::new(vec![], vec![s], Some(Op::SumAll(self.clone())))
    }

    pub fn mean_all(&self) -> Tensor {
        let s: f64 = self.inner.values.borrow().iter().sum();
        Tensor::new(
            vec![],
            vec![s / self.len() as f64],
            Some(Op::MeanAll(self.clone())),
        )
    }

    /// Sum a rank-2 tensor over one axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor> {
        if self.shape().len() != 2 || axis > 1 {
            return Err(Error::ShapeMismatch {
                op: "reduce_axis",
                left: self.shape().to_vec(),
                right: vec![axis],
            });
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let v = self.inner.values.borrow();
        let (out_len, denom) = if axis == 0 { (n, m) } else { (m, n) };
        let mut out = vec![0.0; out_len];
        for i in 0..m {
            for j in 0..n {
                let o = if axis == 0 { j } else { i };
                out[o] += v[i * n + j];
            }
        }
        if mean {
            for x in out.iter_mut() {
                *x /= denom as f64;
            }
        }
        let op = if mean {
            Op::MeanAxis(self.clone(), axis)
        } else {
            Op::SumAxis(self.clone(), axis)
        };
        Ok(Tensor::new(vec![out_len], out, Some(op)))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 2 || other.shape().len() != 2 || self.shape()[1] != other.shape()[0]
        {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let mut out = vec![0.0; m * n];
        matmul_acc(
            &mut out,
            &self.inner.values.borrow(),
            &other.inner.values.borrow(),
            m,
            k,
            n,
        );
        Ok(Tensor::new(
            vec![m, n],
            out,
            Some(Op::MatMul(self.clone(), other.clone())),
        ))
    }

    /// 2-D convolution of [cin x h x w] with weight [cout x cin x kh x kw]
    /// plus bias [cout].
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        if self.shape().len() != 3 || weight.shape().len() != 4 || self.shape()[0] != weight.shape()[1]
        {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: self.shape().to_vec(),
                right: weight.shape().to_vec(),
            });
        }
        let (cin, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (cout, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
        if bias.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: bias.shape().to_vec(),
                right: vec![cout],
            });
        }
        let oh = conv_output_size(h, kh, stride, padding);
        let ow = conv_output_size(w, kw, stride, padding);
        let ncols = oh * ow;
        let kdim = cin * kh * kw;

        let cols = im2col(&self.inner.values.borrow(), cin, h, w, kh, kw, stride, padding);
        let mut out = vec![0.0; cout * ncols];
        matmul_acc(&mut out, &weight.inner.values.borrow(), &cols, cout, kdim, ncols);
        let bvals = bias.inner.values.borrow();
        for c in 0..cout {
            let bv = bvals[c];
            for x in out[c * ncols..(c + 1) * ncols].iter_mut() {
                *x += bv;
            }
        }
        Ok(Tensor::new(
            vec![cout, oh, ow],
            out,
            Some(Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.clone(),
                stride,
                padding,
            }),
        ))
    }

    /// Sample a [c x h x w] map at fractional (xs, ys); out-of-bounds
    /// coordinates read zero padding. Output is [c x n].
    pub fn bilinear_sample(&self, xs: &Tensor, ys: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 3 || xs.shape().len() != 1 || xs.shape() != ys.shape() {
            return Err(Error::ShapeMismatch {
                op: "bilinear_sample",
                left: xs.shape().to_vec(),
                right: ys.shape().to_vec(),
            });
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let n = xs.len();
        let fv = self.inner.values.borrow();
        let xv = xs.inner.values.borrow();
        let yv = ys.inner.values.borrow();
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            let plane = &fv[ch * h * w..(ch + 1) * h * w];
            for i in 0..n {
                out[ch * n + i] = bilinear_value(plane, h, w, xv[i], yv[i]);
            }
        }
        Ok(Tensor::new(
            vec![c, n],
            out,
            Some(Op::BilinearSample {
                feat: self.clone(),
                xs: xs.clone(),
                ys: ys.clone(),
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        Ok(Tensor::new(
            shape.to_vec(),
            self.values(),
            Some(Op::Reshape(self.clone())),
        ))
    }

    /// Select columns (rank 2) or elements (rank 1) by index.
    pub fn gather_cols(&self, idx: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        let v = self.inner.values.borrow();
        match rank {
            1 => {
                let n = self.len();
                if idx.iter().any(|&i| i >= n) {
                    return Err(Error::IndexMisalignment { expected: n, got: idx.len() });
                }
                let out: Vec<f64> = idx.iter().map(|&i| v[i]).collect();
                Ok(Tensor::new(
                    vec![idx.len()],
                    out,
                    Some(Op::GatherCols(self.clone(), idx.to_vec())),
                ))
            }
            2 => {
                let (k, n) = (self.shape()[0], self.shape()[1]);
                if idx.iter().any(|&i| i >= n) {
                    return Err(Error::IndexMisalignment { expected: n, got: idx.len() });
                }
                let m = idx.len();
                let mut out = vec![0.0; k * m];
                for r in 0..k {
                    for (j, &src) in idx.iter().enumerate() {
                        out[r * m + j] = v[r * n + src];
                    }
                }
                Ok(Tensor::new(
                    vec![k, m],
                    out,
                    Some(Op::GatherCols(self.clone(), idx.to_vec())),
                ))
            }
            _ => Err(Error::ShapeMismatch {
                op: "gather_cols",
                left: self.shape().to_vec(),
                right: vec![],
            }),
        }
    }

    /// Extract row `i` of a rank-2 tensor as a rank-1 tensor.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        if self.shape().len() != 2 || i >= self.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "row",
                left: self.shape().to_vec(),
                right: vec![i],
            });
        }
        let n = self.shape()[1];
        let v = self.inner.values.borrow();
        Ok(Tensor::new(
            vec![n],
            v[i * n..(i + 1) * n].to_vec(),
            Some(Op::Row(self.clone(), i)),
        ))
    }

    /// Tile a rank-1 tensor as m identical rows: [n] -> [m x n].
    pub fn repeat_row(&self, m: usize) -> Result<Tensor> {
        if self.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "repeat_row",
                left: self.shape().to_vec(),
                right: vec![m],
            });
        }
        let n = self.len();
        let v = self.inner.values.borrow();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&v);
        }
        Ok(Tensor::new(
            vec![m, n],
            out,
            Some(Op::RepeatRow(self.clone(), m)),
        ))
    }

    /// Tile a rank-1 tensor as n identical columns: [m] -> [m x n].
    pub fn repeat_col(&self, n: usize) -> Result<Tensor> {
        if self.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "repeat_col",
                left: self.shape().to_vec(),
                right: vec![n],
            });
        }
        let m = self.len();
        let v = self.inner.values.borrow();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for _ in 0..n {
                out.push(v[i]);
            }
        }
        Ok(Tensor::new(
            vec![m, n],
            out,
            Some(Op::RepeatCol(self.clone(), n)),
        ))
    }

    /// Concatenate along the last axis. All parts must share rank (1 or 2)
    /// and leading dimension.
    pub fn concat_last(parts: &[Tensor]) -> Result<Tensor> {
        assert!(!parts.is_empty(), "concat of nothing");
        let rank = parts[0].shape().len();
        match rank {
            1 => {
                let mut out = Vec::new();
                for p in parts {
                    if p.shape().len() != 1 {
                        return Err(Error::ShapeMismatch {
                            op: "concat_last",
                            left: parts[0].shape().to_vec(),
                            right: p.shape().to_vec(),
                        });
                    }
                    out.extend_from_slice(&p.inner.values.borrow());
                }
                let n = out.len();
                Ok(Tensor::new(
                    vec![n],
                    out,
                    Some(Op::ConcatLast(parts.to_vec())),
                ))
            }
            2 => {
                let k = parts[0].shape()[0];
                let mut widths = Vec::with_capacity(parts.len());
                for p in parts {
                    if p.shape().len() != 2 || p.shape()[0] != k {
                        return Err(Error::ShapeMismatch {
                            op: "concat_last",
                            left: parts[0].shape().to_vec(),
                            right: p.shape().to_vec(),
                        });
                    }
                    widths.push(p.shape()[1]);
                }
                let total: usize = widths.iter().sum();
                let mut out = vec![0.0; k * total];
                let mut off = 0;
                for (p, &n) in parts.iter().zip(&widths) {
                    let v = p.inner.values.borrow();
                    for r in 0..k {
                        out[r * total + off..r * total + off + n]
                            .copy_from_slice(&v[r * n..(r + 1) * n]);
                    }
                    off += n;
                }
                Ok(Tensor::new(
                    vec![k, total],
                    out,
                    Some(Op::ConcatLast(parts.to_vec())),
                ))
            }
            _ => Err(Error::ShapeMismatch {
                op: "concat_last",
                left: parts[0].shape().to_vec(),
                right: vec![],
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_analytic_point() {
        let x = Tensor::from_values(&[1], vec![0.0]).unwrap();
        let y = x.sigmoid();
        assert_eq!(y.values(), vec![0.5]);
        let loss = y.sum_all();
        loss.backward().unwrap();
        assert!((x.grad().unwrap()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn pow_analytic_point() {
        let x = Tensor::from_values(&[1], vec![1.0]).unwrap();
        let y = x.powf(0.3);
        assert_eq!(y.values(), vec![1.0]);
        y.sum_all().backward().unwrap();
        assert!((x.grad().unwrap()[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn matmul_known_and_grad() {
        let a = Tensor::from_values(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_values(&[2, 2], vec![0.5, 0.3, 0.7, 0.1]).unwrap();
        let y = a.matmul(&b).unwrap();
        y.sum_all().backward().unwrap();
        // dA = ones @ B^T: each row [0.8, 0.8]
        let ga = a.grad().unwrap();
        for v in ga {
            assert!((v - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input
        let x = Tensor::from_values(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_values(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = x.conv2d(&w, &b, 1, 0).unwrap();
        assert_eq!(y.values(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(y.shape(), &[1, 2, 2]);
    }

    #[test]
    fn conv2d_shapes_with_stride_padding() {
        let x = Tensor::zeros(&[3, 8, 8]);
        let w = Tensor::zeros(&[5, 3, 3, 3]);
        let b = Tensor::zeros(&[5]);
        let y = x.conv2d(&w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[5, 4, 4]);
        let y = x.conv2d(&w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[5, 8, 8]);
    }

    #[test]
    fn conv2d_channel_mismatch_errors() {
        let x = Tensor::zeros(&[3, 8, 8]);
        let w = Tensor::zeros(&[5, 4, 3, 3]);
        let b = Tensor::zeros(&[5]);
        assert!(x.conv2d(&w, &b, 1, 1).is_err());
    }

    #[test]
    fn gather_row_repeat_concat_roundtrip_values() {
        let t = Tensor::from_values(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = t.gather_cols(&[2, 0]).unwrap();
        assert_eq!(g.values(), vec![3.0, 1.0, 6.0, 4.0]);
        let r = t.row(1).unwrap();
        assert_eq!(r.values(), vec![4.0, 5.0, 6.0]);
        let rr = r.repeat_row(2).unwrap();
        assert_eq!(rr.values(), vec![4.0, 5.0, 6.0, 4.0, 5.0, 6.0]);
        let rc = r.repeat_col(2).unwrap();
        assert_eq!(rc.values(), vec![4.0, 4.0, 5.0, 5.0, 6.0, 6.0]);
        let c = Tensor::concat_last(&[t.clone(), t.clone()]).unwrap();
        assert_eq!(c.shape(), &[2, 6]);
        assert_eq!(&c.values()[0..6], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn bilinear_sample_values_and_zero_padding() {
        let f = Tensor::from_values(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let xs = Tensor::from_values(&[3], vec![0.0, 0.5, -1.0]).unwrap();
        let ys = Tensor::from_values(&[3], vec![0.0, 0.5, -1.0]).unwrap();
        let s = f.bilinear_sample(&xs, &ys).unwrap();
        let v = s.values();
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!((v[1] - 2.5).abs() < 1e-12);
        assert_eq!(v[2], 0.0);
    }
}
