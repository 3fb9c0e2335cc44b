use alloc::vec;
use alloc::vec::Vec;

use super::shape::{axis_split, bcast_strides, broadcast_shape, for_each_bcast, permute_index};
use super::{Graph, Op, Var};
use crate::error::{ensure, Result};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::interp::{interpolate_forward, InterpMode};
use crate::kernels::norm::{batch_norm_forward, BN_MOMENTUM};
use crate::kernels::pool::{pool_forward, PoolGeom, PoolKind};
use crate::kernels::roi_align::roi_align_plan;
use crate::nn::store::{BufferId, BufferUpdate};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::Tensor;
use crate::Mode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Swish,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::ZERO),
            Activation::Sigmoid => sigmoid(x),
            Activation::Swish => x * sigmoid(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

/// Soft Dice coefficient `(2·Σpg + ε) / (Σp + Σg + ε)`.
pub const DICE_EPS: f64 = 1e-6;

pub fn dice_coefficient_slice<T: Scalar>(pred: &[T], gt: &[T]) -> T {
    let (mut inter, mut sp, mut sg) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p.to_f64(), g.to_f64());
        inter += p * g;
        sp += p;
        sg += g;
    }
    T::from_f64((2.0 * inter + DICE_EPS) / (sp + sg + DICE_EPS))
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        let ws = self.value(w).dims4()?;
        ensure!(ws[2] == ws[3], "only square kernels are supported, got {:?}", ws);
        let geom = ConvGeom::new(dims, ws[0], ws[2], stride, padding, groups)?;
        ensure!(
            ws == geom.weight_shape(),
            "weight shape {:?} does not match input {:?} with groups {} (expected {:?})",
            ws,
            dims,
            groups,
            geom.weight_shape()
        );
        if let Some(b) = b {
            ensure!(self.value(b).numel() == ws[0], "bias length must equal out-channels");
        }
        let out = conv::conv2d_forward(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), &geom);
        let t = Tensor::from_vec(&geom.out_shape(), out)?;
        self.stats.macs += geom.macs();
        let inputs = [x, w, b.unwrap_or(x)];
        self.push("conv2d", t, Op::Conv { x, w, b, geom }, &inputs)
    }

    /// Transposed convolution with weight `[c_in, c_out / groups, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        let ws = self.value(w).dims4()?;
        ensure!(ws[0] == dims[1] && ws[2] == ws[3], "transposed weight {:?} does not match input {:?}", ws, dims);
        let geom = conv::transpose_geom(dims, ws[1], ws[2], stride, padding, 1)?;
        let out = conv::conv_transpose2d_forward(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), &geom);
        let t = Tensor::from_vec(&[geom.n, geom.c_in, geom.h, geom.w], out)?;
        self.stats.macs += geom.macs();
        let inputs = [x, w, b.unwrap_or(x)];
        self.push("conv_transpose2d", t, Op::ConvTranspose { x, w, b, geom }, &inputs)
    }

    /// `x [n, f] @ w [f, g] + b [g]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        ensure!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[0], "linear: {:?} @ {:?} is not defined", xs, ws);
        let (n, f, g) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::ZERO; n * g];
        if let Some(b) = b {
            let bv = self.value(b).data();
            ensure!(bv.len() == g, "linear: bias length {} != {}", bv.len(), g);
            for row in out.chunks_mut(g) {
                row.copy_from_slice(bv);
            }
        }
        conv::matmul(n, f, g, self.value(x).data(), false, self.value(w).data(), false, &mut out, b.is_some());
        self.stats.macs += (n * f * g) as u64;
        let t = Tensor::from_vec(&[n, g], out)?;
        let inputs = [x, w, b.unwrap_or(x)];
        self.push("linear", t, Op::Linear { x, w, b }, &inputs)
    }

    pub fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let out = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![T::ZERO; out_shape.iter().product()];
            let (ta, tb) = (bcast_strides(&sa, &out_shape), bcast_strides(&sb, &out_shape));
            for_each_bcast(&out_shape, &ta, &tb, |o, i, j| out[o] = f(va[i], vb[j]));
            out
        };
        let t = Tensor::from_vec(&out_shape, out)?;
        self.push("binary", t, Op::Binary { a, b, op }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Div)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| v * s).collect();
        let t = Tensor::from_vec(self.shape(x), out)?;
        self.push("scale", t, Op::Scale { x, s }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| v + c).collect();
        let t = Tensor::from_vec(self.shape(x), out)?;
        self.push("add_scalar", t, Op::AddScalar { x }, &[x])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| kind.apply(v)).collect();
        let t = Tensor::from_vec(self.shape(x), out)?;
        self.push("activation", t, Op::Act { x, kind }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn swish(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Swish)
    }

    /// `kernel`/`stride` are ignored by the global kinds.
    pub fn pool(&mut self, x: Var, kind: PoolKind, kernel: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let geom = PoolGeom::new([n, c, h, w], kind, kernel, stride)?;
        let (out, arg) = pool_forward(self.value(x).data(), kind, &geom);
        let t = Tensor::from_vec(&[n, c, geom.ho, geom.wo], out)?;
        self.push("pool", t, Op::Pool { x, kind, geom, arg }, &[x])
    }

    /// Batch normalization over `[n, c, h, w]`. In training mode batch
    /// statistics are used and the running buffers receive an exponential
    /// moving-average update (see [`Graph::take_updates`]).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, running_mean: BufferId, running_var: BufferId) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        let c = dims[1];
        ensure!(
            self.value(gamma).numel() == c && self.value(beta).numel() == c,
            "batch_norm: gamma/beta length must equal channel count {}",
            c
        );
        let train = self.mode == Mode::Train;
        let store = self.store;
        let (rm, rv) = (store.buffer(running_mean).data(), store.buffer(running_var).data());
        let running = if train { None } else { Some((rm, rv)) };
        let (y, saved) = batch_norm_forward(self.value(x).data(), dims, self.value(gamma).data(), self.value(beta).data(), running);
        if train {
            let m = T::from_f64(BN_MOMENTUM);
            let ema = |old: &[T], new: &[T]| old.iter().zip(new).map(|(&o, &b)| (T::ONE - m) * o + m * b).collect::<Vec<T>>();
            self.record_update(BufferUpdate { id: running_mean, value: ema(rm, &saved.batch_mean) });
            self.record_update(BufferUpdate { id: running_var, value: ema(rv, &saved.batch_var) });
        }
        let t = Tensor::from_vec(&dims, y)?;
        self.push("batch_norm", t, Op::BatchNorm { x, gamma, beta, saved, train }, &[x, gamma, beta])
    }

    pub fn interpolate(&mut self, x: Var, to: (usize, usize), mode: InterpMode) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        ensure!(to.0 >= 1 && to.1 >= 1, "interpolate: target extents must be positive");
        let out = interpolate_forward(self.value(x).data(), n * c, (h, w), to, mode);
        let t = Tensor::from_vec(&[n, c, to.0, to.1], out)?;
        self.push("interpolate", t, Op::Interp { x, mode, from: (h, w), to }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        ensure!(!xs.is_empty(), "concat of nothing");
        let first = self.shape(xs[0]).to_vec();
        ensure!(axis < first.len(), "concat axis {} out of range", axis);
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            ensure!(
                s.len() == first.len() && s.iter().enumerate().all(|(d, &e)| d == axis || e == first[d]),
                "concat: shape {:?} incompatible with {:?} on axis {}",
                s,
                first,
                axis
            );
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let t = Tensor::from_vec(&shape, out)?;
        self.push("concat", t, Op::Concat { xs: xs.to_vec(), axis }, xs)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(axis < shape.len(), "narrow axis {} out of range", axis);
        ensure!(len >= 1 && start + len <= shape[axis], "narrow [{}, {}) outside extent {}", start, start + len, shape[axis]);
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let t = Tensor::from_vec(&s, out)?;
        self.push("narrow", t, Op::Narrow { x, axis, start }, &[x])
    }

    /// Splits the channel axis into `[0, at)` and `[at, C)`; both sides must be non-empty.
    pub fn split_channels(&mut self, x: Var, at: usize) -> Result<(Var, Var)> {
        let c = self.value(x).dims4()?[1];
        ensure!(at >= 1 && at < c, "split at {} leaves an empty side of {} channels", at, c);
        Ok((self.narrow(x, 1, 0, at)?, self.narrow(x, 1, at, c - at)?))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape { x }, &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(perm.len() == shape.len(), "permute rank mismatch");
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            ensure!(p < perm.len() && !seen[p], "invalid permutation {:?}", perm);
            seen[p] = true;
        }
        let index = permute_index(&shape, perm);
        let src = self.value(x).data();
        let out: Vec<T> = index.iter().map(|&i| src[i]).collect();
        let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let t = Tensor::from_vec(&new_shape, out)?;
        self.push("permute", t, Op::Permute { x, index }, &[x])
    }

    /// Rows of `x` (axis 0) in the order given by `idx`; indices may repeat.
    pub fn index_select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(!shape.is_empty(), "index_select on a scalar");
        let row: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            ensure!(i < shape[0], "index {} out of range {}", i, shape[0]);
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut s = shape;
        s[0] = idx.len();
        let t = Tensor::from_vec(&s, out)?;
        self.push("index_select", t, Op::IndexSelect { x, idx: idx.to_vec() }, &[x])
    }

    /// Reduction along `axis`, keeping it as an extent-1 dimension.
    pub fn reduce_axis(&mut self, x: Var, axis: usize, kind: Reduce) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(axis < shape.len(), "reduce axis {} out of range", axis);
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; outer * inner];
        let mut arg = if kind == Reduce::Max { vec![0u32; outer * inner] } else { Vec::new() };
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| src[(o * n + k) * inner + i];
                out[o * inner + i] = match kind {
                    Reduce::Sum => (0..n).map(at).sum(),
                    Reduce::Mean => (0..n).map(at).sum::<T>() / T::from_usize(n),
                    Reduce::Max => {
                        let mut best = 0;
                        for k in 1..n {
                            if at(k) > at(best) {
                                best = k;
                            }
                        }
                        arg[o * inner + i] = best as u32;
                        at(best)
                    }
                };
            }
        }
        let mut s = shape;
        s[axis] = 1;
        let t = Tensor::from_vec(&s, out)?;
        self.push("reduce_axis", t, Op::ReduceAxis { x, axis, kind, arg }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        ensure!(n > 0, "mean of an empty tensor");
        let s = self.sum(x)?;
        self.scale(s, T::ONE / T::from_usize(n))
    }

    /// RoIAlign over a single-image feature map `[1, c, h, w]`; output `[rois, c, out_h, out_w]`.
    pub fn roi_align(&mut self, x: Var, boxes: &[[f64; 4]], scale: f64, out: (usize, usize), sampling: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        ensure!(n == 1, "roi_align expects a single image, got batch {}", n);
        ensure!(!boxes.is_empty(), "roi_align with no regions");
        for b in boxes {
            ensure!(b.iter().all(|v| v.is_finite()) && b[2] >= b[0] && b[3] >= b[1], "invalid region {:?}", b);
        }
        let plan = roi_align_plan::<T>(boxes, scale, (h, w), out, sampling);
        self.stats.clamped_rois += plan.clamped;
        let data = plan.forward(self.value(x).data(), c, h * w);
        let t = Tensor::from_vec(&[boxes.len(), c, out.0, out.1], data)?;
        self.push("roi_align", t, Op::RoiAlign { x, plan }, &[x])
    }

    /// `Σ wᵢ · BCE(σ(logitᵢ), targetᵢ) / norm`, computed from logits.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: Vec<T>, weights: Option<Vec<T>>, norm: T) -> Result<Var> {
        let z = self.value(logits).data();
        ensure!(targets.len() == z.len(), "bce: {} targets for {} logits", targets.len(), z.len());
        if let Some(w) = &weights {
            ensure!(w.len() == z.len(), "bce: weight length mismatch");
        }
        let mut s = T::ZERO;
        for (i, (&zi, &yi)) in z.iter().zip(&targets).enumerate() {
            // softplus(z) - y z
            let l = softplus(zi) - yi * zi;
            s += weights.as_ref().map_or(l, |w| w[i] * l);
        }
        self.push("sigmoid_bce", Tensor::scalar(s / norm), Op::SigmoidBce { logits, targets, weights, norm }, &[logits])
    }

    /// Mean-free softmax cross entropy over rows of `[n, k]` logits, summed and divided by `norm`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], norm: T) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        ensure!(shape.len() == 2 && shape[0] == labels.len(), "cross entropy: logits {:?} vs {} labels", shape, labels.len());
        let k = shape[1];
        let z = self.value(logits).data();
        let mut probs = vec![T::ZERO; z.len()];
        let mut loss = T::ZERO;
        for (r, &lab) in labels.iter().enumerate() {
            ensure!(lab < k, "label {} out of range {}", lab, k);
            let row = &z[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(row[0], T::max);
            let mut den = T::ZERO;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[r * k + j] = e;
                den += e;
            }
            probs[r * k..(r + 1) * k].iter_mut().for_each(|p| *p /= den);
            loss += den.ln() + m - row[lab];
        }
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss / norm),
            Op::SoftmaxCe { logits, labels: labels.to_vec(), probs, norm },
            &[logits],
        )
    }

    /// `Σ wᵢ · smoothL1_β(predᵢ - targetᵢ) / norm`.
    pub fn smooth_l1(&mut self, pred: Var, target: Vec<T>, weight: Vec<T>, beta: T, norm: T) -> Result<Var> {
        let p = self.value(pred).data();
        ensure!(target.len() == p.len() && weight.len() == p.len(), "smooth_l1 length mismatch");
        let half = T::from_f64(0.5);
        let mut s = T::ZERO;
        for i in 0..p.len() {
            if weight[i] == T::ZERO {
                continue;
            }
            let d = (p[i] - target[i]).abs();
            let l = if d < beta { half * d * d / beta } else { d - half * beta };
            s += weight[i] * l;
        }
        self.push("smooth_l1", Tensor::scalar(s / norm), Op::SmoothL1 { pred, target, weight, beta, norm }, &[pred])
    }

    /// Mean over the leading axis of `-dice(probsᵣ, gtᵣ)`.
    pub fn dice_loss(&mut self, probs: Var, gt: Vec<T>) -> Result<Var> {
        let shape = self.shape(probs).to_vec();
        let p = self.value(probs).data();
        ensure!(gt.len() == p.len(), "dice: prediction and target sizes differ ({} vs {})", p.len(), gt.len());
        ensure!(!shape.is_empty() && shape[0] > 0, "dice over zero rows");
        let rows = shape[0];
        let per = p.len() / rows;
        let mut total = T::ZERO;
        for r in 0..rows {
            total += -dice_coefficient_slice(&p[r * per..(r + 1) * per], &gt[r * per..(r + 1) * per]);
        }
        let v = if rows == 1 { total } else { total / T::from_usize(rows) };
        self.push("dice_loss", Tensor::scalar(v), Op::Dice { probs, gt, rows }, &[probs])
    }
}
