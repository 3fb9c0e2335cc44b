use alloc::vec;
use alloc::vec::Vec;

use super::ops::{dice_coefficient_slice, Activation, BinaryOp, Reduce, DICE_EPS};
use super::shape::{axis_split, bcast_strides, for_each_bcast};
use super::{Gradients, Graph, Op, Var};
use crate::error::{ensure, Result};
use crate::kernels::conv;
use crate::kernels::interp::interpolate_backward;
use crate::kernels::norm::batch_norm_backward;
use crate::kernels::pool::pool_backward;
use crate::scalar::{sigmoid, Scalar};

struct Acc<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Acc<T> {
    fn add(&mut self, v: Var, delta: Vec<T>) {
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn add_with(&mut self, v: Var, len: usize, f: impl FnOnce(&mut [T])) {
        let slot = self.grads[v.0].get_or_insert_with(|| vec![T::ZERO; len]);
        f(slot);
    }
}

impl<'s, T: Scalar> Graph<'s, T> {
    /// Accumulates `d loss / d param` into `grads` for every parameter the loss
    /// depends on. `loss` must hold a single element.
    pub fn backward(&self, loss: Var, grads: &mut Gradients<T>) -> Result<()> {
        ensure!(self.value(loss).numel() == 1, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        let mut acc = Acc { grads: vec![None; loss.0 + 1] };
        acc.grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = acc.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.node_backward(i, &dy, &mut acc, grads);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, dy: &[T], acc: &mut Acc<T>, out: &mut Gradients<T>) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Input => {}
            Op::Param(id) => out.accumulate(*id, self.store.param(*id).shape(), dy),
            Op::Conv { x, w, b, geom } => {
                if self.needs(*x) {
                    acc.add(*x, conv::conv2d_backward_input(self.value(*w).data(), dy, geom));
                }
                let wants_b = b.is_some_and(|b| self.needs(b));
                if self.needs(*w) || wants_b {
                    let (dw, db) = conv::conv2d_backward_weight(self.value(*x).data(), dy, geom, wants_b);
                    if self.needs(*w) {
                        acc.add(*w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, db) {
                        acc.add(*b, db);
                    }
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                // The transposed op is the input-gradient of `geom`'s convolution,
                // so its own input-gradient is that convolution's forward.
                if self.needs(*x) {
                    acc.add(*x, conv::conv2d_forward(dy, self.value(*w).data(), None, geom));
                }
                if self.needs(*w) {
                    let (dw, _) = conv::conv2d_backward_weight(dy, self.value(*x).data(), geom, false);
                    acc.add(*w, dw);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let hw = geom.h * geom.w;
                    acc.add_with(b, geom.c_in, |db| {
                        for (p, plane) in dy.chunks(hw).enumerate() {
                            db[p % geom.c_in] += plane.iter().copied().sum::<T>();
                        }
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let (n, f) = (self.shape(*x)[0], self.shape(*x)[1]);
                let g = self.shape(*w)[1];
                if self.needs(*x) {
                    let mut dx = vec![T::ZERO; n * f];
                    conv::matmul(n, g, f, dy, false, self.value(*w).data(), true, &mut dx, false);
                    acc.add(*x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::ZERO; f * g];
                    conv::matmul(f, n, g, self.value(*x).data(), true, dy, false, &mut dw, false);
                    acc.add(*w, dw);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    acc.add_with(b, g, |db| {
                        for row in dy.chunks(g) {
                            db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                    });
                }
            }
            Op::Binary { a, b, op } => self.binary_backward(*a, *b, *op, dy, acc),
            Op::Scale { x, s } => acc.add(*x, dy.iter().map(|&v| v * *s).collect()),
            Op::AddScalar { x } => acc.add(*x, dy.to_vec()),
            Op::Act { x, kind } => {
                let xv = self.value(*x).data();
                let dx = match kind {
                    Activation::Relu => dy.iter().zip(xv).map(|(&g, &v)| if v > T::ZERO { g } else { T::ZERO }).collect(),
                    Activation::Sigmoid => dy.iter().zip(y).map(|(&g, &s)| g * s * (T::ONE - s)).collect(),
                    Activation::Swish => dy
                        .iter()
                        .zip(xv)
                        .map(|(&g, &v)| {
                            let s = sigmoid(v);
                            g * (s + v * s * (T::ONE - s))
                        })
                        .collect(),
                };
                acc.add(*x, dx);
            }
            Op::Pool { x, kind, geom, arg } => acc.add(*x, pool_backward(dy, *kind, geom, arg)),
            Op::BatchNorm { x, gamma, beta, saved, train } => {
                let dims = [self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2], self.shape(*x)[3]];
                let (dx, dg, db) = batch_norm_backward(dy, dims, self.value(*gamma).data(), saved, *train);
                if self.needs(*x) {
                    acc.add(*x, dx);
                }
                if self.needs(*gamma) {
                    acc.add(*gamma, dg);
                }
                if self.needs(*beta) {
                    acc.add(*beta, db);
                }
            }
            Op::Interp { x, mode, from, to } => {
                let s = self.shape(*x);
                acc.add(*x, interpolate_backward(dy, s[0] * s[1], *from, *to, *mode));
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut start = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut dx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            dx.extend_from_slice(&dy[base..base + len * inner]);
                        }
                        acc.add(v, dx);
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                acc.add_with(*x, outer * n * inner, |dx| {
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        let src = &dy[o * len * inner..(o + 1) * len * inner];
                        dx[base..base + len * inner].iter_mut().zip(src).for_each(|(a, &v)| *a += v);
                    }
                });
            }
            Op::Reshape { x } => acc.add(*x, dy.to_vec()),
            Op::Permute { x, index } => {
                acc.add_with(*x, index.len(), |dx| {
                    for (o, &src) in index.iter().enumerate() {
                        dx[src] += dy[o];
                    }
                });
            }
            Op::IndexSelect { x, idx } => {
                let rows = self.shape(*x)[0];
                let row = self.value(*x).numel() / rows.max(1);
                acc.add_with(*x, rows * row, |dx| {
                    for (k, &r) in idx.iter().enumerate() {
                        dx[r * row..(r + 1) * row].iter_mut().zip(&dy[k * row..(k + 1) * row]).for_each(|(a, &v)| *a += v);
                    }
                });
            }
            Op::ReduceAxis { x, axis, kind, arg } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let inv = T::ONE / T::from_usize(n);
                acc.add_with(*x, outer * n * inner, |dx| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let g = dy[o * inner + j];
                            match kind {
                                Reduce::Max => dx[(o * n + arg[o * inner + j] as usize) * inner + j] += g,
                                Reduce::Sum | Reduce::Mean => {
                                    let g = if *kind == Reduce::Mean { g * inv } else { g };
                                    for k in 0..n {
                                        dx[(o * n + k) * inner + j] += g;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::SumAll { x } => acc.add(*x, vec![dy[0]; self.value(*x).numel()]),
            Op::RoiAlign { x, plan } => {
                let s = self.shape(*x);
                acc.add(*x, plan.backward(dy, s[1], s[2] * s[3]));
            }
            Op::SigmoidBce { logits, targets, weights, norm } => {
                let g = dy[0] / *norm;
                let z = self.value(*logits).data();
                let dx = z
                    .iter()
                    .zip(targets)
                    .enumerate()
                    .map(|(i, (&zi, &t))| {
                        let d = (sigmoid(zi) - t) * g;
                        weights.as_ref().map_or(d, |w| d * w[i])
                    })
                    .collect();
                acc.add(*logits, dx);
            }
            Op::SoftmaxCe { logits, labels, probs, norm } => {
                let g = dy[0] / *norm;
                let k = probs.len() / labels.len().max(1);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * g).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * k + l] -= g;
                }
                acc.add(*logits, dx);
            }
            Op::SmoothL1 { pred, target, weight, beta, norm } => {
                let g = dy[0] / *norm;
                let p = self.value(*pred).data();
                let dx = (0..p.len())
                    .map(|i| {
                        let d = p[i] - target[i];
                        let s = if d.abs() < *beta {
                            d / *beta
                        } else if d > T::ZERO {
                            T::ONE
                        } else {
                            -T::ONE
                        };
                        weight[i] * s * g
                    })
                    .collect();
                acc.add(*pred, dx);
            }
            Op::Dice { probs, gt, rows } => {
                let p = self.value(*probs).data();
                let per = p.len() / rows;
                let g = -dy[0] / T::from_usize(*rows);
                let eps = T::from_f64(DICE_EPS);
                let two = T::from_f64(2.0);
                let mut dx = vec![T::ZERO; p.len()];
                for r in 0..*rows {
                    let (pr, gr) = (&p[r * per..(r + 1) * per], &gt[r * per..(r + 1) * per]);
                    let s = pr.iter().copied().sum::<T>() + gr.iter().copied().sum::<T>() + eps;
                    let d = dice_coefficient_slice(pr, gr);
                    // dD/dp = (2g - D) / (Σp + Σg + ε)
                    for j in 0..per {
                        dx[r * per + j] = g * (two * gr[j] - d) / s;
                    }
                }
                acc.add(*probs, dx);
            }
        }
    }

    fn binary_backward(&self, a: Var, b: Var, op: BinaryOp, dy: &[T], acc: &mut Acc<T>) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let (na, nb) = (self.needs(a), self.needs(b));
        if sa == sb {
            let n = dy.len();
            let (mut da, mut db) = (Vec::new(), Vec::new());
            if na {
                da = match op {
                    BinaryOp::Add | BinaryOp::Sub => dy.to_vec(),
                    BinaryOp::Mul => (0..n).map(|i| dy[i] * vb[i]).collect(),
                    BinaryOp::Div => (0..n).map(|i| dy[i] / vb[i]).collect(),
                };
            }
            if nb {
                db = match op {
                    BinaryOp::Add => dy.to_vec(),
                    BinaryOp::Sub => dy.iter().map(|&v| -v).collect(),
                    BinaryOp::Mul => (0..n).map(|i| dy[i] * va[i]).collect(),
                    BinaryOp::Div => (0..n).map(|i| -dy[i] * va[i] / (vb[i] * vb[i])).collect(),
                };
            }
            if na {
                acc.add(a, da);
            }
            if nb {
                acc.add(b, db);
            }
            return;
        }
        let out: Vec<usize> = sa.iter().zip(sb).map(|(&x, &y)| x.max(y)).collect();
        let (ta, tb) = (bcast_strides(sa, &out), bcast_strides(sb, &out));
        let mut da = if na { vec![T::ZERO; va.len()] } else { Vec::new() };
        let mut db = if nb { vec![T::ZERO; vb.len()] } else { Vec::new() };
        for_each_bcast(&out, &ta, &tb, |o, i, j| {
            let g = dy[o];
            let (x, y) = (va[i], vb[j]);
            let (ga, gb) = match op {
                BinaryOp::Add => (g, g),
                BinaryOp::Sub => (g, -g),
                BinaryOp::Mul => (g * y, g * x),
                BinaryOp::Div => (g / y, -g * x / (y * y)),
            };
            if na {
                da[i] += ga;
            }
            if nb {
                db[j] += gb;
            }
        });
        if na {
            acc.add(a, da);
        }
        if nb {
            acc.add(b, db);
        }
    }
}
