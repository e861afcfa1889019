//! Forward primitives. Each records itself on the tape with whatever the
//! backward sweep needs.

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::real::{lit, Real};
use super::tape::{broadcast_index, Op, ReduceKind, Tape, Var};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// Normalisation epsilon shared by batch and layer normalisation.
pub const NORM_EPS: f64 = 1e-5;

impl<T: Real> Tape<'_, T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), v, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), v, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), v, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v, &[a])
    }

    fn broadcast(&mut self, x: Var, y: Var, xd: [usize; 3], yd: [usize; 3], mul: bool) -> Result<Var> {
        let op = if mul { "broadcast_mul" } else { "broadcast_add" };
        let ok = numel(&xd) == self.value(x).numel()
            && numel(&yd) == self.value(y).numel()
            && yd.iter().zip(&xd).all(|(&a, &b)| a == 1 || a == b);
        if !ok {
            return Err(Error::shape(op, &xd, &yd));
        }
        let yi = broadcast_index(xd, yd);
        let (xv, yv) = (self.value(x), self.value(y).data());
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(j, &a)| if mul { a * yv[yi(j)] } else { a + yv[yi(j)] })
            .collect();
        let v = Tensor::new(xv.shape(), data)?;
        self.push(Op::Broadcast { x, y, xd, yd, mul }, v, &[x, y])
    }

    /// `x ⊙ y` where `x` is viewed as `xd` and `y` as `yd`, each dimension of
    /// `yd` either 1 (broadcast) or equal to the matching `xd` entry.
    pub fn broadcast_mul(&mut self, x: Var, y: Var, xd: [usize; 3], yd: [usize; 3]) -> Result<Var> {
        self.broadcast(x, y, xd, yd, true)
    }

    pub fn broadcast_add(&mut self, x: Var, y: Var, xd: [usize; 3], yd: [usize; 3]) -> Result<Var> {
        self.broadcast(x, y, xd, yd, false)
    }

    /// `y = x·W + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let k = *xs.last().unwrap();
        if ws.len() != 2 || ws[0] != k {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let n = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::shape("linear", &ws, self.shape(b)));
            }
        }
        let m = numel(&xs) / k;
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        kernels::gemm_nn(m, k, n, self.value(x).data(), self.value(w).data(), &mut out);
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = n;
        let v = Tensor::new(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Op::Linear { x, w, b, m, k, n }, v, &inputs)
    }

    /// Batched matrix product `[B,m,k]·[B,k,n]`, or `[B,m,k]·[B,n,k]ᵀ` when
    /// `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("bmm", &as_, &bs);
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(bad());
        }
        let (batch, m, k) = (as_[0], as_[1], as_[2]);
        let (kb, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for t in 0..batch {
            let (aa, bb, cc) = (&av[t * m * k..], &bv[t * k * n..], &mut out[t * m * n..]);
            if trans_b {
                kernels::gemm_nt(m, k, n, aa, bb, cc);
            } else {
                kernels::gemm_nn(m, k, n, aa, bb, cc);
            }
        }
        let v = Tensor::new(&[batch, m, n], out)?;
        self.push(
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            v,
            &[a, b],
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = axis_layout(&shape, axis);
        let mut y = self.value(x).data().to_vec();
        for o in 0..outer {
            for q in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + q;
                let mx = (0..len).map(|l| y[idx(l)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for l in 0..len {
                    let e = (y[idx(l)] - mx).exp();
                    y[idx(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    y[idx(l)] /= s;
                }
            }
        }
        let v = Tensor::new(&shape, y)?;
        self.push(Op::Softmax { x, outer, len, inner }, v, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(T::zero()));
        self.push(Op::Relu(x), v, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| T::one() / (T::one() + (-a).exp()));
        self.push(Op::Sigmoid(x), v, &[x])
    }

    /// Cross-correlation of `x [B,C_in,H,W]` with `w [C_out,C_in,k,k]`, zero
    /// padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let (batch, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, k) = (ws[0], ws[2]);
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let span = |n: usize| -> Result<usize> {
            let padded = n + 2 * pad;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(Error::config(format!(
                    "conv2d output size ({n}+2·{pad}−{k})/{stride}+1 is not a positive integer"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            stride,
            pad,
            h_out: span(h)?,
            w_out: span(wd)?,
        };
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d", &ws, self.shape(b)));
            }
        }
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        let mut out = vec![T::zero(); batch * c_out * ol];
        let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { pl * ol }];
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let bv = b.map(|b| self.value(b).data());
        let in_len = c_in * h * wd;
        for t in 0..batch {
            let o = &mut out[t * c_out * ol..(t + 1) * c_out * ol];
            if let Some(bv) = bv {
                for (c, row) in o.chunks_mut(ol).enumerate() {
                    row.iter_mut().for_each(|v| *v = bv[c]);
                }
            }
            let xin = &xv[t * in_len..(t + 1) * in_len];
            let patches: &[T] = if geom.is_pointwise() {
                xin
            } else {
                kernels::im2col(&geom, xin, &mut cols);
                &cols
            };
            kernels::gemm_nn(c_out, pl, ol, wv, patches, o);
        }
        let v = Tensor::new(&[batch, c_out, geom.h_out, geom.w_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            Op::Conv2d {
                x,
                w,
                b,
                batch,
                geom,
                c_out,
            },
            v,
            &inputs,
        )
    }

    /// Batch normalisation with statistics over every axis except `feat_axis`.
    /// Returns the output plus the batch mean and (biased) variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        feat_axis: usize,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let shape = self.shape(x).to_vec();
        let (outer, feat, inner) = axis_layout(&shape, feat_axis);
        self.check_affine("batch_norm", gamma, beta, feat)?;
        let count = outer * inner;
        if count < 2 {
            return Err(Error::config(format!(
                "batch normalisation in train mode needs at least 2 values per feature, got {count}"
            )));
        }
        let xv = self.value(x).data();
        let at = |o: usize, f: usize, q: usize| (o * feat + f) * inner + q;
        let nf = T::from_usize(count).unwrap();
        let mut mean = vec![T::zero(); feat];
        let mut var = vec![T::zero(); feat];
        for o in 0..outer {
            for f in 0..feat {
                for q in 0..inner {
                    mean[f] += xv[at(o, f, q)];
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        for o in 0..outer {
            for f in 0..feat {
                for q in 0..inner {
                    let d = xv[at(o, f, q)] - mean[f];
                    var[f] += d * d;
                }
            }
        }
        var.iter_mut().for_each(|v| *v /= nf);
        let var_out = var.clone();
        let out = self.batch_norm_apply(x, gamma, beta, (outer, feat, inner), &mean, &var, true)?;
        Ok((out, mean, var_out))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        feat_axis: usize,
        mean: &[T],
        var: &[T],
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let layout = axis_layout(&shape, feat_axis);
        self.check_affine("batch_norm", gamma, beta, layout.1)?;
        if mean.len() != layout.1 || var.len() != layout.1 {
            return Err(Error::shape("batch_norm", &[layout.1], &[mean.len()]));
        }
        self.batch_norm_apply(x, gamma, beta, layout, mean, var, false)
    }

    fn check_affine(&self, op: &'static str, gamma: Var, beta: Var, feat: usize) -> Result<()> {
        if self.shape(gamma) != [feat] || self.shape(beta) != [feat] {
            return Err(Error::shape(op, &[feat], self.shape(gamma)));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        (outer, feat, inner): (usize, usize, usize),
        mean: &[T],
        var: &[T],
        batch_stats: bool,
    ) -> Result<Var> {
        let eps: T = lit(NORM_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xt = self.value(x);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = xt.data().to_vec();
        let mut y = vec![T::zero(); xhat.len()];
        for o in 0..outer {
            for f in 0..feat {
                for q in 0..inner {
                    let j = (o * feat + f) * inner + q;
                    xhat[j] = (xhat[j] - mean[f]) * inv_std[f];
                    y[j] = gv[f] * xhat[j] + bv[f];
                }
            }
        }
        let v = Tensor::new(xt.shape(), y)?;
        self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                outer,
                feat,
                inner,
                xhat,
                inv_std,
                batch_stats,
            },
            v,
            &[x, gamma, beta],
        )
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().unwrap();
        self.check_affine("layer_norm", gamma, beta, dim)?;
        let rows = numel(&shape) / dim;
        let eps: T = lit(NORM_EPS);
        let nf = T::from_usize(dim).unwrap();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = self.value(x).data().to_vec();
        let mut y = vec![T::zero(); xhat.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &mut xhat[r * dim..(r + 1) * dim];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            inv_std[r] = T::one() / (var + eps).sqrt();
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std[r];
                y[r * dim + c] = gv[c] * *v + bv[c];
            }
        }
        let v = Tensor::new(&shape, y)?;
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rows,
                dim,
                xhat,
                inv_std,
            },
            v,
            &[x, gamma, beta],
        )
    }

    /// Max or mean over `axis`; the axis is removed from the output shape.
    pub fn reduce(&mut self, x: Var, kind: ReduceKind, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index(format!("reduce axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = axis_layout(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0; outer * inner];
        }
        let inv = T::one() / T::from_usize(len).unwrap();
        for o in 0..outer {
            for q in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + q;
                match kind {
                    ReduceKind::Max => {
                        let mut best = idx(0);
                        for l in 1..len {
                            if xv[idx(l)] > xv[best] {
                                best = idx(l);
                            }
                        }
                        out[o * inner + q] = xv[best];
                        argmax[o * inner + q] = best;
                    }
                    ReduceKind::Mean => {
                        out[o * inner + q] = (0..len).map(|l| xv[idx(l)]).sum::<T>() * inv;
                    }
                }
            }
        }
        let mut out_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let v = Tensor::new(&out_shape, out)?;
        self.push(
            Op::Reduce {
                x,
                kind,
                outer,
                len,
                inner,
                argmax,
            },
            v,
            &[x],
        )
    }

    /// Global pooling of `[B,C,H,W]` over the spatial grid → `[B,C]`.
    pub fn global_pool(&mut self, x: Var, kind: ReduceKind) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_pool", &s, &[0, 0, 0, 0]));
        }
        let flat = self.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        self.reduce(flat, kind, 2)
    }

    /// Non-overlapping-or-strided window pooling of `[B,C,H,W]` without padding.
    pub fn pool2d(&mut self, x: Var, kind: ReduceKind, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || stride == 0 || s[2] < k || s[3] < k {
            return Err(Error::config(format!("pool2d window {k}/{stride} invalid for {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (h_out, w_out) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); planes * h_out * w_out];
        let mut argmax = vec![0; if kind == ReduceKind::Max { out.len() } else { 0 }];
        let inv = T::one() / T::from_usize(k * k).unwrap();
        for p in 0..planes {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let oi = (p * h_out + oy) * w_out + ox;
                    let mut best = usize::MAX;
                    let mut sum = T::zero();
                    for ky in 0..k {
                        for kx in 0..k {
                            let ii = (p * h + oy * stride + ky) * w + ox * stride + kx;
                            sum += xv[ii];
                            if best == usize::MAX || xv[ii] > xv[best] {
                                best = ii;
                            }
                        }
                    }
                    match kind {
                        ReduceKind::Max => {
                            out[oi] = xv[best];
                            argmax[oi] = best;
                        }
                        ReduceKind::Mean => out[oi] = sum * inv,
                    }
                }
            }
        }
        let v = Tensor::new(&[s[0], s[1], h_out, w_out], out)?;
        self.push(
            Op::Pool2d {
                x,
                kind,
                planes,
                h,
                w,
                k,
                stride,
                h_out,
                w_out,
                argmax,
            },
            v,
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(Op::Reshape(x), v, &[x])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let (outer, _, inner) = axis_layout(&first, axis);
        let mut lens = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let same =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape("concat", &first, s));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in xs.iter().zip(&lens) {
                out.extend_from_slice(&self.value(v).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        self.push(
            Op::Concat {
                xs: xs.to_vec(),
                outer,
                lens,
                inner,
            },
            value,
            xs,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), v, &[x])
    }

    /// Sum of squared differences Σ(a−b)².
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        self.push(Op::SqDiffSum(a, b), Tensor::scalar(s), &[a, b])
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.is_train() || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::config(format!("dropout rate {p} must be < 1")));
        }
        let keep: T = lit(1.0 / (1.0 - p));
        let shape = self.shape(x).to_vec();
        let rng = &mut self.rng;
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < p { T::zero() } else { keep });
        let m = self.constant(mask);
        self.mul(x, m)
    }
}
