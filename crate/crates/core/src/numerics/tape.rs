//! Reverse-mode differentiation over a linear record of primitive
//! applications. Forward ops live in `ops.rs`; this file owns the record and
//! the backward sweep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeom};
use super::param::{BufferId, BufferStore, Gradients, ParamId, ParamStore};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Max,
    Mean,
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Broadcast {
        x: Var,
        y: Var,
        xd: [usize; 3],
        yd: [usize; 3],
        mul: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        geom: ConvGeom,
        c_out: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        outer: usize,
        feat: usize,
        inner: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rows: usize,
        dim: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Reduce {
        x: Var,
        kind: ReduceKind,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    Pool2d {
        x: Var,
        kind: ReduceKind,
        planes: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        h_out: usize,
        w_out: usize,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        xs: Vec<Var>,
        outer: usize,
        lens: Vec<usize>,
        inner: usize,
    },
    Sum(Var),
    SqDiffSum(Var, Var),
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Broadcast { mul: true, .. } => "broadcast_mul",
            Op::Broadcast { mul: false, .. } => "broadcast_add",
            Op::Linear { .. } => "linear",
            Op::Bmm { .. } => "bmm",
            Op::Softmax { .. } => "softmax",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reduce { .. } => "reduce",
            Op::Pool2d { .. } => "pool2d",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Sum(_) => "sum",
            Op::SqDiffSum(..) => "mse",
        }
    }
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

struct Node<T> {
    op: Op<T>,
    value: Value<T>,
    needs_grad: bool,
}

/// Batch statistics observed in training mode, to be folded into running
/// statistics by the owning model after the forward pass.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub mean_buf: BufferId,
    pub var_buf: BufferId,
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

/// Computation record for one forward/backward pair.
pub struct Tape<'p, T> {
    params: &'p ParamStore<T>,
    buffers: Option<&'p BufferStore<T>>,
    nodes: Vec<Node<T>>,
    consumed: bool,
    mode: Mode,
    checked: bool,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) bn_updates: Vec<BnUpdate<T>>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>, mode: Mode) -> Self {
        Tape {
            params,
            buffers: None,
            nodes: Vec::new(),
            consumed: false,
            mode,
            checked: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            bn_updates: Vec::new(),
        }
    }

    /// Attaches the running statistics read by eval-mode normalisation.
    pub fn with_buffers(mut self, buffers: &'p BufferStore<T>) -> Self {
        self.buffers = Some(buffers);
        self
    }

    pub fn buffers(&self) -> Option<&'p BufferStore<T>> {
        self.buffers
    }

    /// Seeds the generator used by dropout.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    /// In checked mode every op verifies its output is finite.
    pub fn checked(mut self, on: bool) -> Self {
        self.checked = on;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears the record so the tape can be reused for a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.bn_updates.clear();
        self.consumed = false;
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.value(*id),
        }
    }

    /// Hash of every branch taken by a piecewise op: the sign of each ReLU
    /// input and the winner of each max reduction. Two forward passes with
    /// equal signatures evaluate the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) => {
                    i.hash(&mut h);
                    for &v in self.value(*x).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::Reduce { argmax, .. } | Op::Pool2d { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value: Value::Owned(t),
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let needs_grad = self.params.get(id).requires_grad;
        self.nodes.push(Node {
            op: Op::Param(id),
            value: Value::Param(id),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Result<Var> {
        let index = self.nodes.len();
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: index,
            });
        }
        let needs_grad = inputs.iter().any(|&v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
            needs_grad,
        });
        Ok(Var(index))
    }

    /// Propagates d`loss`/d(node) back to every reachable parameter.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>], out: &mut Gradients<T>) {
        let node = &self.nodes[i];
        let val = |v: Var| self.value(v).data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.value(v).numel()]);
            f(buf);
        };

        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                let t = Tensor::new(self.params.value(*id).shape(), g.to_vec()).expect("grad shape");
                match out.by_param.get_mut(id) {
                    Some(existing) => existing.data_mut().iter_mut().zip(t.data()).for_each(|(a, &b)| *a += b),
                    None => {
                        out.by_param.insert(*id, t);
                    }
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for ((x, &gy), &bb) in d.iter_mut().zip(g).zip(bv) {
                        *x += gy * bb;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, &gy), &aa) in d.iter_mut().zip(g).zip(av) {
                        *x += gy * aa;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| axpy_into(d, *c, g)),
            Op::Broadcast { x, y, xd, yd, mul } => {
                let (xv, yv) = (val(*x), val(*y));
                let yi = broadcast_index(*xd, *yd);
                if *mul {
                    acc(*x, &mut |d| {
                        for (j, (dx, &gy)) in d.iter_mut().zip(g).enumerate() {
                            *dx += gy * yv[yi(j)];
                        }
                    });
                    acc(*y, &mut |d| {
                        for (j, &gy) in g.iter().enumerate() {
                            d[yi(j)] += gy * xv[j];
                        }
                    });
                } else {
                    acc(*x, &mut |d| add_into(d, g));
                    acc(*y, &mut |d| {
                        for (j, &gy) in g.iter().enumerate() {
                            d[yi(j)] += gy;
                        }
                    });
                }
            }
            Op::Linear { x, w, b, m, k, n } => {
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |d| kernels::gemm_nt(*m, *n, *k, g, wv, d));
                acc(*w, &mut |d| kernels::gemm_tn(*k, *m, *n, xv, g, d));
                if let Some(b) = b {
                    acc(*b, &mut |d| {
                        for row in g.chunks(*n) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (av, bv) = (val(*a), val(*b));
                let (sa, sb, sc) = (m * k, k * n, m * n);
                acc(*a, &mut |d| {
                    for t in 0..*batch {
                        let (gc, bb, da) = (&g[t * sc..], &bv[t * sb..], &mut d[t * sa..]);
                        if *trans_b {
                            kernels::gemm_nn(*m, *n, *k, gc, bb, da);
                        } else {
                            kernels::gemm_nt(*m, *n, *k, gc, bb, da);
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for t in 0..*batch {
                        let (gc, aa, db) = (&g[t * sc..], &av[t * sa..], &mut d[t * sb..]);
                        if *trans_b {
                            kernels::gemm_tn(*n, *m, *k, gc, aa, db);
                        } else {
                            kernels::gemm_tn(*k, *m, *n, aa, gc, db);
                        }
                    }
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = match &node.value {
                    Value::Owned(t) => t.data(),
                    Value::Param(_) => unreachable!(),
                };
                acc(*x, &mut |d| {
                    for o in 0..*outer {
                        for q in 0..*inner {
                            let idx = |l: usize| (o * len + l) * inner + q;
                            let s: T = (0..*len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                            for l in 0..*len {
                                d[idx(l)] += y[idx(l)] * (g[idx(l)] - s);
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for ((dx, &gy), &xx) in d.iter_mut().zip(g).zip(xv) {
                        if xx > T::zero() {
                            *dx += gy;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = self.value(Var(i)).data();
                acc(*x, &mut |d| {
                    for ((dx, &gy), &yy) in d.iter_mut().zip(g).zip(y) {
                        *dx += gy * yy * (T::one() - yy);
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                batch,
                geom,
                c_out,
            } => self.conv2d_backward(*x, *w, *b, *batch, geom, *c_out, g, &mut acc),
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
            } => {
                let gv = val(*gamma);
                let count = outer * inner;
                let at = |o: usize, f: usize, q: usize| (o * feat + f) * inner + q;
                let mut sum_g = vec![T::zero(); *feat];
                let mut sum_gx = vec![T::zero(); *feat];
                for o in 0..*outer {
                    for f in 0..*feat {
                        for q in 0..*inner {
                            let j = at(o, f, q);
                            sum_g[f] += g[j];
                            sum_gx[f] += g[j] * xhat[j];
                        }
                    }
                }
                acc(*beta, &mut |d| add_into(d, &sum_g));
                acc(*gamma, &mut |d| add_into(d, &sum_gx));
                let nf = T::from_usize(count).unwrap();
                acc(*x, &mut |d| {
                    for o in 0..*outer {
                        for f in 0..*feat {
                            let scale = gv[f] * inv_std[f];
                            for q in 0..*inner {
                                let j = at(o, f, q);
                                d[j] += if *batch_stats {
                                    scale / nf * (nf * g[j] - sum_g[f] - xhat[j] * sum_gx[f])
                                } else {
                                    scale * g[j]
                                };
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rows,
                dim,
                xhat,
                inv_std,
            } => {
                let gv = val(*gamma);
                acc(*beta, &mut |d| {
                    for row in g.chunks(*dim) {
                        add_into(d, row);
                    }
                });
                acc(*gamma, &mut |d| {
                    for (grow, hrow) in g.chunks(*dim).zip(xhat.chunks(*dim)) {
                        for ((dd, &gy), &h) in d.iter_mut().zip(grow).zip(hrow) {
                            *dd += gy * h;
                        }
                    }
                });
                let nf = T::from_usize(*dim).unwrap();
                acc(*x, &mut |d| {
                    for r in 0..*rows {
                        let span = r * dim..(r + 1) * dim;
                        let (grow, hrow) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..*dim {
                            let gh = grow[c] * gv[c];
                            s1 += gh;
                            s2 += gh * hrow[c];
                        }
                        let drow = &mut d[span];
                        for c in 0..*dim {
                            let gh = grow[c] * gv[c];
                            drow[c] += inv_std[r] / nf * (nf * gh - s1 - hrow[c] * s2);
                        }
                    }
                });
            }
            Op::Reduce {
                x,
                kind,
                outer,
                len,
                inner,
                argmax,
            } => acc(*x, &mut |d| {
                let inv = T::one() / T::from_usize(*len).unwrap();
                for o in 0..*outer {
                    for q in 0..*inner {
                        let gy = g[o * inner + q];
                        match kind {
                            ReduceKind::Max => d[argmax[o * inner + q]] += gy,
                            ReduceKind::Mean => {
                                for l in 0..*len {
                                    d[(o * len + l) * inner + q] += gy * inv;
                                }
                            }
                        }
                    }
                }
            }),
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
            } => acc(*x, &mut |d| {
                let inv = T::one() / T::from_usize(k * k).unwrap();
                for p in 0..*planes {
                    for oy in 0..*h_out {
                        for ox in 0..*w_out {
                            let oi = (p * h_out + oy) * w_out + ox;
                            match kind {
                                ReduceKind::Max => d[argmax[oi]] += g[oi],
                                ReduceKind::Mean => {
                                    for ky in 0..*k {
                                        for kx in 0..*k {
                                            let (iy, ix) = (oy * stride + ky, ox * stride + kx);
                                            d[(p * h + iy) * w + ix] += g[oi] * inv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Concat { xs, outer, lens, inner } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (xv, &len) in xs.iter().zip(lens) {
                    acc(*xv, &mut |d| {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut d[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::SqDiffSum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let two = T::one() + T::one();
                acc(*a, &mut |d| {
                    for ((dd, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *dd += two * g[0] * (x - y);
                    }
                });
                acc(*b, &mut |d| {
                    for ((dd, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *dd -= two * g[0] * (x - y);
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        geom: &ConvGeom,
        c_out: usize,
        g: &[T],
        acc: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [T])),
    ) {
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        let in_len = geom.c_in * geom.h * geom.w;
        let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { pl * ol }];

        acc(w, &mut |dw| {
            for t in 0..batch {
                let xin = &xv[t * in_len..(t + 1) * in_len];
                let patches: &[T] = if geom.is_pointwise() {
                    xin
                } else {
                    kernels::im2col(geom, xin, &mut cols);
                    &cols
                };
                kernels::gemm_nt(c_out, ol, pl, &g[t * c_out * ol..], patches, dw);
            }
        });
        if let Some(b) = b {
            acc(b, &mut |db| {
                for t in 0..batch {
                    for (c, d) in db.iter_mut().enumerate() {
                        let base = (t * c_out + c) * ol;
                        *d += g[base..base + ol].iter().copied().sum();
                    }
                }
            });
        }
        acc(x, &mut |dx| {
            let mut dcols = vec![T::zero(); pl * ol];
            for t in 0..batch {
                let dxi = &mut dx[t * in_len..(t + 1) * in_len];
                if geom.is_pointwise() {
                    kernels::gemm_tn(pl, c_out, ol, wv, &g[t * c_out * ol..], dxi);
                } else {
                    dcols.iter_mut().for_each(|v| *v = T::zero());
                    kernels::gemm_tn(pl, c_out, ol, wv, &g[t * c_out * ol..], &mut dcols);
                    kernels::col2im(geom, &dcols, dxi);
                }
            }
        });
    }
}

fn add_into<T: Real>(d: &mut [T], g: &[T]) {
    d.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
}

fn axpy_into<T: Real>(d: &mut [T], c: T, g: &[T]) {
    d.iter_mut().zip(g).for_each(|(a, &b)| *a += c * b);
}

/// Maps a flat index into the `xd` view onto the matching index of the
/// broadcast operand with dims `yd` (each either 1 or equal to `xd`).
pub(crate) fn broadcast_index(xd: [usize; 3], yd: [usize; 3]) -> impl Fn(usize) -> usize {
    move |j| {
        let c = j % xd[2];
        let b = (j / xd[2]) % xd[1];
        let a = j / (xd[1] * xd[2]);
        let (a, b, c) = (
            if yd[0] == 1 { 0 } else { a },
            if yd[1] == 1 { 0 } else { b },
            if yd[2] == 1 { 0 } else { c },
        );
        (a * yd[1] + b) * yd[2] + c
    }
}
