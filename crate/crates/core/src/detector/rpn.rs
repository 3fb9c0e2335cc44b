//! Region proposal network: a 3×3 conv shared across pyramid levels with
//! objectness and box-delta 1×1 heads.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::anchors::{Anchor, LevelShape};
use super::assign::{assign_targets, sample};
use crate::autograd::{Graph, Var};
use crate::boxes::{batched_nms, BBox, BoxCoder};
use crate::error::Result;
use crate::neck::FeaturePyramid;
use crate::nn::{Builder, Conv2d};
use crate::scalar::Scalar;

/// Smooth-L1 transition point for RPN deltas.
pub const RPN_BETA: f64 = 1.0 / 9.0;

/// Proposals narrower or shorter than this (pixels) are dropped.
const MIN_PROPOSAL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct RpnHead {
    pub conv: Conv2d,
    pub objectness: Conv2d,
    pub deltas: Conv2d,
    pub anchors_per_cell: usize,
}

/// Batched head outputs, anchors in generation order.
#[derive(Clone, Copy, Debug)]
pub struct RpnOutput {
    /// `[n, anchors]`
    pub objectness: Var,
    /// `[n, anchors, 4]`
    pub deltas: Var,
}

/// Sampling result for one image, kept for diagnostics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RpnTargets {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl RpnHead {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, f: usize, anchors_per_cell: usize) -> Result<Self> {
        let a = anchors_per_cell;
        Ok(Self {
            conv: Conv2d::with_std(b, &crate::nn::join(name, "conv"), [f, f, 3, 1, 1], true, 0.01)?,
            objectness: Conv2d::with_std(b, &crate::nn::join(name, "objectness"), [f, a, 1, 1, 1], true, 0.01)?,
            deltas: Conv2d::with_std(b, &crate::nn::join(name, "deltas"), [f, 4 * a, 1, 1, 1], true, 0.001)?,
            anchors_per_cell: a,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &FeaturePyramid) -> Result<RpnOutput> {
        let a = self.anchors_per_cell;
        let mut objs = Vec::with_capacity(p.levels.len());
        let mut dels = Vec::with_capacity(p.levels.len());
        for &(_, x) in &p.levels {
            let t = self.conv.forward(g, x)?;
            let t = g.relu(t)?;
            let [n, _, h, w] = g.value(t).dims4()?;
            let o = self.objectness.forward(g, t)?;
            let o = g.permute(o, &[0, 2, 3, 1])?;
            objs.push(g.reshape(o, &[n, h * w * a])?);
            let d = self.deltas.forward(g, t)?;
            let d = g.reshape(d, &[n, a, 4, h, w])?;
            let d = g.permute(d, &[0, 3, 4, 1, 2])?;
            dels.push(g.reshape(d, &[n, h * w * a, 4])?);
        }
        let objectness = if objs.len() == 1 { objs[0] } else { g.concat(&objs, 1)? };
        let deltas = if dels.len() == 1 { dels[0] } else { g.concat(&dels, 1)? };
        Ok(RpnOutput { objectness, deltas })
    }

    pub fn macs(&self, shapes: &[LevelShape]) -> u64 {
        shapes
            .iter()
            .map(|l| {
                let hw = (l.h, l.w);
                self.conv.macs(hw) + self.objectness.macs(hw) + self.deltas.macs(hw)
            })
            .sum()
    }
}

/// Grid extents per level of a pyramid.
pub fn level_shapes<T: Scalar>(g: &Graph<T>, p: &FeaturePyramid) -> Result<Vec<LevelShape>> {
    p.levels
        .iter()
        .map(|&(level, x)| {
            let [_, _, h, w] = g.value(x).dims4()?;
            Ok(LevelShape { level, h, w })
        })
        .collect()
}

/// Objectness BCE plus smooth-L1 on positive deltas for image `i`, each
/// divided by the number of sampled anchors. Returns `(cls, box, targets)`.
#[allow(clippy::too_many_arguments)]
pub fn rpn_loss<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    out: &RpnOutput,
    i: usize,
    anchors: &[Anchor],
    gts: &[BBox],
    cfg: &super::HeadConfig,
    rng: &mut R,
) -> Result<(Var, Var, RpnTargets)> {
    let boxes: Vec<BBox> = anchors.iter().map(|a| a.bbox).collect();
    let assignment = assign_targets(&boxes, gts, cfg.rpn_pos_iou, cfg.rpn_neg_iou, true)?;
    let (pos, neg) = sample(&assignment, cfg.rpn_batch, cfg.rpn_pos_fraction, rng);
    let n = anchors.len();
    let norm = T::from_usize((pos.len() + neg.len()).max(1));

    let logits = g.narrow(out.objectness, 0, i, 1)?;
    let mut target = vec![T::ZERO; n];
    let mut weight = vec![T::ZERO; n];
    for &j in &pos {
        target[j] = T::ONE;
        weight[j] = T::ONE;
    }
    for &j in &neg {
        weight[j] = T::ONE;
    }
    let cls = g.sigmoid_bce(logits, target, Some(weight), norm)?;

    let pred = g.narrow(out.deltas, 0, i, 1)?;
    let mut dt = vec![T::ZERO; 4 * n];
    let mut dw = vec![T::ZERO; 4 * n];
    for &j in &pos {
        let gt = gts[assignment.matched[j].expect("positive anchors are matched")];
        let d = BoxCoder::UNIT.encode(&boxes[j], &gt);
        for k in 0..4 {
            dt[4 * j + k] = T::from_f64(d[k]);
            dw[4 * j + k] = T::ONE;
        }
    }
    let reg = g.smooth_l1(pred, dt, dw, T::from_f64(RPN_BETA), norm)?;
    Ok((cls, reg, RpnTargets { positives: pos, negatives: neg }))
}

/// Per-level top-k by objectness, decode, clip, batched NMS across levels,
/// then keep the best `post_topk`. Runs on values only.
#[allow(clippy::too_many_arguments)]
pub fn proposals<T: Scalar>(
    g: &Graph<T>,
    out: &RpnOutput,
    i: usize,
    anchors: &[Anchor],
    image_hw: (usize, usize),
    pre_topk: usize,
    post_topk: usize,
    nms_thresh: f64,
) -> Vec<(BBox, f64)> {
    let n = anchors.len();
    let obj = &g.value(out.objectness).data()[i * n..(i + 1) * n];
    let del = &g.value(out.deltas).data()[i * 4 * n..(i + 1) * 4 * n];
    let mut chosen: Vec<usize> = Vec::new();
    let mut start = 0;
    while start < n {
        let level = anchors[start].level;
        let mut end = start;
        while end < n && anchors[end].level == level {
            end += 1;
        }
        let mut idx: Vec<usize> = (start..end).collect();
        idx.sort_by(|&a, &b| obj[b].to_f64().total_cmp(&obj[a].to_f64()).then(a.cmp(&b)));
        idx.truncate(pre_topk);
        chosen.extend(idx);
        start = end;
    }
    let mut boxes = Vec::with_capacity(chosen.len());
    let mut scores = Vec::with_capacity(chosen.len());
    let mut groups = Vec::with_capacity(chosen.len());
    for &j in &chosen {
        let d = [del[4 * j].to_f64(), del[4 * j + 1].to_f64(), del[4 * j + 2].to_f64(), del[4 * j + 3].to_f64()];
        let b = BoxCoder::UNIT.decode(&anchors[j].bbox, d).clip(image_hw);
        if b.width() > MIN_PROPOSAL && b.height() > MIN_PROPOSAL {
            boxes.push(b);
            scores.push(crate::scalar::sigmoid(obj[j].to_f64()));
            groups.push(anchors[j].level);
        }
    }
    let mut keep = batched_nms(&boxes, &scores, &groups, nms_thresh);
    keep.truncate(post_topk);
    keep.into_iter().map(|k| (boxes[k], scores[k])).collect()
}
