//! Second stage: RoI sampling, multi-level RoIAlign, the box head and the
//! mask head with its two interchangeable objectives.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::assign::{assign_targets, sample};
use super::{roi_level, HeadConfig, MaskLossKind, MASK_SIZE};
use crate::autograd::{Graph, Var, DICE_EPS};
use crate::boxes::{BBox, BoxCoder};
use crate::data::Mask;
use crate::error::{ensure, Result};
use crate::kernels::roi_align::roi_align_plan;
use crate::neck::FeaturePyramid;
use crate::nn::{join, Builder, Conv2d, ConvTranspose2d, Linear};
use crate::scalar::Scalar;

/// Smooth-L1 transition point for box-head deltas.
pub const BOX_BETA: f64 = 1.0;

/// Soft Dice `(2Σpg + ε) / (Σp + Σg + ε)`.
pub fn dice_coefficient(pred: &[f64], gt: &[f64]) -> Result<f64> {
    ensure!(pred.len() == gt.len(), "dice: prediction has {} values, target {}", pred.len(), gt.len());
    Ok(crate::autograd::dice_coefficient_slice(pred, gt))
}

/// RoIs drawn for one image: positives first, then negatives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoiSamples {
    pub boxes: Vec<BBox>,
    /// 0 is background.
    pub labels: Vec<usize>,
    pub matched: Vec<Option<usize>>,
    pub num_pos: usize,
}

/// Matches proposals (with the ground-truth boxes appended) and samples a
/// fixed-size, positive-capped batch.
pub fn sample_rois<R: Rng>(
    proposals: &[BBox],
    gt_boxes: &[BBox],
    gt_classes: &[usize],
    cfg: &HeadConfig,
    rng: &mut R,
) -> Result<RoiSamples> {
    let mut cand: Vec<BBox> = proposals.to_vec();
    cand.extend_from_slice(gt_boxes);
    let a = assign_targets(&cand, gt_boxes, cfg.roi_pos_iou, cfg.roi_neg_iou, false)?;
    let (pos, neg) = sample(&a, cfg.roi_batch, cfg.roi_pos_fraction, rng);
    let mut s = RoiSamples { num_pos: pos.len(), ..Default::default() };
    for &i in &pos {
        let m = a.matched[i].expect("positive RoIs are matched");
        s.boxes.push(cand[i]);
        s.labels.push(gt_classes[m]);
        s.matched.push(Some(m));
    }
    for &i in &neg {
        s.boxes.push(cand[i]);
        s.labels.push(0);
        s.matched.push(None);
    }
    Ok(s)
}

/// RoIAlign of `boxes` from image `i` of the pyramid, each box read from its
/// assigned level. Output `[boxes, F, out, out]` in input order.
pub fn pool_rois<T: Scalar>(
    g: &mut Graph<T>,
    p: &FeaturePyramid,
    i: usize,
    boxes: &[BBox],
    out: usize,
    sampling: usize,
) -> Result<Var> {
    ensure!(!boxes.is_empty(), "no regions to pool");
    let ids = p.level_ids();
    let (lo, hi) = if ids.len() == 1 { (ids[0], ids[0]) } else { (ids[0].max(3), ids[ids.len() - 1].min(5)) };
    let levels: Vec<usize> = boxes.iter().map(|b| roi_level(b, lo, hi)).collect();
    let mut parts = Vec::new();
    let mut order = Vec::with_capacity(boxes.len());
    for l in lo..=hi {
        let idx: Vec<usize> = (0..boxes.len()).filter(|&k| levels[k] == l).collect();
        if idx.is_empty() {
            continue;
        }
        let x = p.get(l).ok_or_else(|| crate::Error::invalid(alloc::format!("pyramid has no level {l}")))?;
        let xi = g.narrow(x, 0, i, 1)?;
        let arr: Vec<[f64; 4]> = idx.iter().map(|&k| boxes[k].to_array()).collect();
        let scale = 1.0 / libm::exp2(l as f64);
        parts.push(g.roi_align(xi, &arr, scale, (out, out), sampling)?);
        order.extend(idx);
    }
    let cat = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? };
    if order.iter().enumerate().all(|(k, &o)| k == o) {
        return Ok(cat);
    }
    let mut inverse = vec![0; order.len()];
    for (pos, &k) in order.iter().enumerate() {
        inverse[k] = pos;
    }
    g.index_select(cat, &inverse)
}

#[derive(Clone, Debug)]
pub struct BoxHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub cls: Linear,
    pub bbox: Linear,
    pub num_classes: usize,
    pub in_features: usize,
}

impl BoxHead {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, f: usize, pool: usize, fc: usize, num_classes: usize) -> Result<Self> {
        let in_features = f * pool * pool;
        Ok(Self {
            fc1: Linear::new(b, &join(name, "fc1"), in_features, fc)?,
            fc2: Linear::new(b, &join(name, "fc2"), fc, fc)?,
            cls: Linear::with_std(b, &join(name, "cls"), fc, num_classes + 1, 0.01)?,
            bbox: Linear::with_std(b, &join(name, "bbox"), fc, 4 * num_classes, 0.001)?,
            num_classes,
            in_features,
        })
    }

    /// `[r, F, p, p]` → (`[r, C + 1]` logits, `[r, 4C]` deltas).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, feats: Var) -> Result<(Var, Var)> {
        let r = g.shape(feats)[0];
        let x = g.reshape(feats, &[r, self.in_features])?;
        let x = self.fc1.forward(g, x)?;
        let x = g.relu(x)?;
        let x = self.fc2.forward(g, x)?;
        let x = g.relu(x)?;
        Ok((self.cls.forward(g, x)?, self.bbox.forward(g, x)?))
    }

    pub fn macs(&self, rois: usize) -> u64 {
        self.fc1.macs(rois) + self.fc2.macs(rois) + self.cls.macs(rois) + self.bbox.macs(rois)
    }
}

/// Cross entropy over all sampled RoIs plus smooth-L1 on the matched class's
/// deltas of positives, both divided by the RoI count.
pub fn box_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    deltas: Var,
    s: &RoiSamples,
    gt_boxes: &[BBox],
    num_classes: usize,
) -> Result<(Var, Var)> {
    let r = s.labels.len();
    let norm = T::from_usize(r.max(1));
    let cls = g.softmax_cross_entropy(logits, &s.labels, norm)?;
    let mut target = vec![T::ZERO; r * 4 * num_classes];
    let mut weight = vec![T::ZERO; r * 4 * num_classes];
    for k in 0..s.num_pos {
        let c = s.labels[k] - 1;
        let gt = gt_boxes[s.matched[k].expect("positive")];
        let d = BoxCoder::HEAD.encode(&s.boxes[k], &gt);
        for j in 0..4 {
            let at = k * 4 * num_classes + 4 * c + j;
            target[at] = T::from_f64(d[j]);
            weight[at] = T::ONE;
        }
    }
    let reg = g.smooth_l1(deltas, target, weight, T::from_f64(BOX_BETA), norm)?;
    Ok((cls, reg))
}

#[derive(Clone, Debug)]
pub struct MaskHead {
    pub convs: Vec<Conv2d>,
    pub deconv: ConvTranspose2d,
    pub predictor: Conv2d,
    pub num_classes: usize,
}

impl MaskHead {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, f: usize, channels: usize, num_classes: usize) -> Result<Self> {
        let mut convs = Vec::with_capacity(4);
        let mut c = f;
        for k in 0..4 {
            convs.push(Conv2d::new(b, &join(name, &alloc::format!("conv{}", k + 1)), c, channels, 3, 1, 1, true)?);
            c = channels;
        }
        Ok(Self {
            convs,
            deconv: ConvTranspose2d::new(b, &join(name, "deconv"), channels, channels, 2, 2)?,
            predictor: Conv2d::with_std(b, &join(name, "predictor"), [channels, num_classes, 1, 1, 1], true, 0.001)?,
            num_classes,
        })
    }

    /// `[r, F, 14, 14]` → `[r, C, 28, 28]` logits.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, feats: Var) -> Result<Var> {
        let mut x = feats;
        for c in &self.convs {
            x = c.forward(g, x)?;
            x = g.relu(x)?;
        }
        x = self.deconv.forward(g, x)?;
        x = g.relu(x)?;
        self.predictor.forward(g, x)
    }

    pub fn macs(&self, rois: usize, pool: usize) -> u64 {
        let hw = (pool, pool);
        let up = (2 * pool, 2 * pool);
        let per: u64 = self.convs.iter().map(|c| c.macs(hw)).sum::<u64>() + self.deconv.macs(hw) + self.predictor.macs(up);
        per * rois as u64
    }
}

/// Rows `[r, 28·28]` holding each RoI's channel for `classes[k]` (1-based).
pub fn select_class<T: Scalar>(g: &mut Graph<T>, logits: Var, classes: &[usize]) -> Result<Var> {
    let [r, c, h, w] = g.value(logits).dims4()?;
    ensure!(classes.len() == r, "{} classes for {} mask rows", classes.len(), r);
    let flat = g.reshape(logits, &[r * c, h * w])?;
    let rows: Vec<usize> = classes
        .iter()
        .enumerate()
        .map(|(k, &cls)| {
            debug_assert!(cls >= 1 && cls <= c);
            k * c + cls - 1
        })
        .collect();
    g.index_select(flat, &rows)
}

/// Ground-truth mask of each positive RoI, RoIAligned onto a 28×28 grid over
/// the RoI box and thresholded at 0.5.
pub fn mask_targets(boxes: &[BBox], masks: &[&Mask]) -> Vec<f64> {
    let mut out = Vec::with_capacity(boxes.len() * MASK_SIZE * MASK_SIZE);
    for (b, m) in boxes.iter().zip(masks) {
        let plan = roi_align_plan::<f64>(&[b.to_array()], 1.0, (m.height, m.width), (MASK_SIZE, MASK_SIZE), 2);
        let v = plan.forward(&m.to_f64(), 1, m.height * m.width);
        out.extend(v.into_iter().map(|x| if x >= 0.5 { 1.0 } else { 0.0 }));
    }
    out
}

/// Mask objective on the selected class rows: mean sigmoid BCE per pixel, or
/// the mean over RoIs of `−Dice(σ(logits), target)`.
pub fn mask_loss<T: Scalar>(g: &mut Graph<T>, rows: Var, targets: &[f64], kind: MaskLossKind) -> Result<Var> {
    let t: Vec<T> = targets.iter().map(|&v| T::from_f64(v)).collect();
    match kind {
        MaskLossKind::Bce => {
            let n = T::from_usize(t.len().max(1));
            g.sigmoid_bce(rows, t, None, n)
        }
        MaskLossKind::Dice => {
            let p = g.sigmoid(rows)?;
            g.dice_loss(p, t)
        }
    }
}

/// Smallest value the soft Dice can take on disjoint supports of the given sizes.
pub fn dice_floor(sum_pred: f64, sum_gt: f64) -> f64 {
    DICE_EPS / (sum_pred + sum_gt + DICE_EPS)
}
