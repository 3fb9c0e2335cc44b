//! The full detector: backbone → feature network → RPN → box and mask heads.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Mode, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::boxes::BBox;
use crate::data::{DatasetRecord, Mask};
use crate::detector::anchors::{generate_anchors, Anchor, AnchorConfig, LevelShape};
use crate::detector::postprocess::{paste_mask, select_detections};
use crate::detector::roi_heads::{box_loss, mask_loss, mask_targets, pool_rois, sample_rois, select_class, BoxHead, MaskHead};
use crate::detector::rpn::{level_shapes, proposals, rpn_loss, RpnHead};
use crate::detector::{Detection, HeadConfig, ImageTargets, MASK_SIZE};
use crate::error::{ensure, Result};
use crate::neck::{FeaturePyramid, Neck, NeckKind, Topology};
use crate::nn::store::ParamStore;
use crate::nn::Builder;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stages needed for a C4-only head (the C4 tap is the fifth stage).
const C4_DEPTH: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub neck: NeckKind,
    /// Replaces the bundled NAS-FPN wiring when set.
    pub topology: Option<Topology>,
    pub pyramid_channels: usize,
    pub heads: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::b0(),
            neck: NeckKind::NasFpn,
            topology: None,
            pyramid_channels: 256,
            heads: HeadConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn anchor_config(&self) -> AnchorConfig {
        match self.neck {
            NeckKind::C4 => self.heads.anchors.single_level(4),
            _ => self.heads.anchors.clone(),
        }
    }
}

/// Individual loss terms of one training forward, each a scalar node.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub rpn_cls: Var,
    pub rpn_box: Var,
    pub box_cls: Var,
    pub box_reg: Var,
    pub mask: Var,
    /// Images in the batch that had no positive anchor.
    pub no_rpn_positives: usize,
    /// Images in the batch that had no positive RoI (mask term is 0 for them).
    pub no_roi_positives: usize,
}

#[derive(Clone, Debug)]
pub struct MaskRcnn {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub neck: Neck,
    pub rpn: RpnHead,
    pub box_head: BoxHead,
    pub mask_head: MaskHead,
}

impl MaskRcnn {
    pub fn new<T: Scalar>(b: &mut Builder<T>, config: &ModelConfig) -> Result<Self> {
        let h = &config.heads;
        ensure!(h.num_classes >= 1, "need at least one foreground class");
        ensure!(config.pyramid_channels >= 1, "pyramid channels must be positive");
        let depth = if config.neck == NeckKind::C4 { C4_DEPTH } else { 7 };
        let backbone = Backbone::truncated(b, "backbone", &config.backbone, depth)?;
        let f = config.pyramid_channels;
        let neck = Neck::new(b, config.neck, config.backbone.tap_channels(), f, config.topology.clone())?;
        let rpn = RpnHead::new(b, "rpn", f, config.anchor_config().per_cell())?;
        let box_head = BoxHead::new(b, "roi_heads.box", f, h.box_pool, h.box_fc, h.num_classes)?;
        let mask_head = MaskHead::new(b, "roi_heads.mask", f, h.mask_channels, h.num_classes)?;
        Ok(Self { config: config.clone(), backbone, neck, rpn, box_head, mask_head })
    }

    /// Builds a model together with a freshly initialized parameter store.
    pub fn build<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::new(&mut Builder::new(&mut store, seed), config)?;
        Ok((model, store))
    }

    pub fn pyramid<T: Scalar>(&self, g: &mut Graph<T>, images: Var) -> Result<FeaturePyramid> {
        let c = self.backbone.forward(g, images)?;
        self.neck.forward(g, &c)
    }

    fn anchors<T: Scalar>(&self, g: &Graph<T>, p: &FeaturePyramid) -> Result<(Vec<LevelShape>, Vec<Anchor>)> {
        let shapes = level_shapes(g, p)?;
        let anchors = generate_anchors(&shapes, &self.config.anchor_config());
        Ok((shapes, anchors))
    }

    /// Training forward on a batch `[n, 3, h, w]`; every term is averaged over images.
    pub fn forward_train<T: Scalar, R: Rng>(
        &self,
        g: &mut Graph<T>,
        images: Var,
        targets: &[ImageTargets],
        rng: &mut R,
    ) -> Result<LossTerms> {
        Ok(self.forward_train_with(g, images, targets, None, rng)?.0)
    }

    /// As [`forward_train`](Self::forward_train), optionally with fixed
    /// per-image proposals instead of the RPN's own. Also returns the
    /// proposals used. Gradients never flow through proposal coordinates, so
    /// fixing them gives a function whose derivative the tape computes exactly.
    pub fn forward_train_with<T: Scalar, R: Rng>(
        &self,
        g: &mut Graph<T>,
        images: Var,
        targets: &[ImageTargets],
        fixed: Option<&[Vec<BBox>]>,
        rng: &mut R,
    ) -> Result<(LossTerms, Vec<Vec<BBox>>)> {
        let [n, _, h, w] = g.value(images).dims4()?;
        ensure!(targets.len() == n, "{} targets for a batch of {}", targets.len(), n);
        if let Some(f) = fixed {
            ensure!(f.len() == n, "{} proposal lists for a batch of {}", f.len(), n);
        }
        let cfg = &self.config.heads;
        let p = self.pyramid(g, images)?;
        let out = self.rpn.forward(g, &p)?;
        let (_, anchors) = self.anchors(g, &p)?;
        let mut terms: [Vec<Var>; 5] = Default::default();
        let mut used = Vec::with_capacity(n);
        let (mut no_rpn, mut no_roi) = (0, 0);
        for (i, t) in targets.iter().enumerate() {
            ensure!(
                t.boxes.len() == t.classes.len() && t.boxes.len() == t.masks.len(),
                "image {}: {} boxes, {} classes, {} masks",
                i,
                t.boxes.len(),
                t.classes.len(),
                t.masks.len()
            );
            ensure!(t.classes.iter().all(|&c| (1..=cfg.num_classes).contains(&c)), "image {}: class id out of range", i);
            let (rc, rb, rt) = rpn_loss(g, &out, i, &anchors, &t.boxes, cfg, rng)?;
            if rt.positives.is_empty() {
                no_rpn += 1;
            }
            terms[0].push(rc);
            terms[1].push(rb);

            let props: Vec<BBox> = match fixed {
                Some(f) => f[i].clone(),
                None => proposals(
                    g,
                    &out,
                    i,
                    &anchors,
                    (h, w),
                    cfg.rpn_pre_nms_topk_train,
                    cfg.rpn_post_nms_topk_train,
                    cfg.rpn_nms_thresh,
                )
                .into_iter()
                .map(|(b, _)| b)
                .collect(),
            };
            let s = sample_rois(&props, &t.boxes, &t.classes, cfg, rng)?;
            used.push(props);
            if s.boxes.is_empty() {
                let z = g.input(Tensor::scalar(T::ZERO))?;
                terms[2].push(z);
                terms[3].push(z);
            } else {
                let feats = pool_rois(g, &p, i, &s.boxes, cfg.box_pool, cfg.roi_sampling)?;
                let (logits, deltas) = self.box_head.forward(g, feats)?;
                let (bc, br) = box_loss(g, logits, deltas, &s, &t.boxes, cfg.num_classes)?;
                terms[2].push(bc);
                terms[3].push(br);
            }

            if s.num_pos == 0 {
                no_roi += 1;
                terms[4].push(g.input(Tensor::scalar(T::ZERO))?);
                continue;
            }
            let pos_boxes = &s.boxes[..s.num_pos];
            let feats = pool_rois(g, &p, i, pos_boxes, cfg.mask_pool, cfg.roi_sampling)?;
            let logits = self.mask_head.forward(g, feats)?;
            let rows = select_class(g, logits, &s.labels[..s.num_pos])?;
            let gt: Vec<&Mask> = s.matched[..s.num_pos].iter().map(|m| &t.masks[m.expect("positive")]).collect();
            let tgt = mask_targets(pos_boxes, &gt);
            terms[4].push(mask_loss(g, rows, &tgt, cfg.mask_loss)?);
        }
        let mean = |g: &mut Graph<T>, v: &[Var]| -> Result<Var> {
            let mut acc = v[0];
            for &x in &v[1..] {
                acc = g.add(acc, x)?;
            }
            if v.len() == 1 {
                Ok(acc)
            } else {
                g.scale(acc, T::ONE / T::from_usize(v.len()))
            }
        };
        let terms = LossTerms {
            rpn_cls: mean(g, &terms[0])?,
            rpn_box: mean(g, &terms[1])?,
            box_cls: mean(g, &terms[2])?,
            box_reg: mean(g, &terms[3])?,
            mask: mean(g, &terms[4])?,
            no_rpn_positives: no_rpn,
            no_roi_positives: no_roi,
        };
        Ok((terms, used))
    }

    /// Detections per image of the batch, in input-pixel coordinates.
    pub fn infer<T: Scalar>(&self, g: &mut Graph<T>, images: Var) -> Result<Vec<Vec<Detection>>> {
        ensure!(g.mode() == Mode::Eval, "inference needs an eval-mode graph");
        let [n, _, h, w] = g.value(images).dims4()?;
        let cfg = &self.config.heads;
        let p = self.pyramid(g, images)?;
        let out = self.rpn.forward(g, &p)?;
        let (_, anchors) = self.anchors(g, &p)?;
        let mut all = Vec::with_capacity(n);
        for i in 0..n {
            let props: Vec<BBox> = proposals(
                g,
                &out,
                i,
                &anchors,
                (h, w),
                cfg.rpn_pre_nms_topk_test,
                cfg.rpn_post_nms_topk_test,
                cfg.rpn_nms_thresh,
            )
            .into_iter()
            .map(|(b, _)| b)
            .collect();
            if props.is_empty() {
                all.push(Vec::new());
                continue;
            }
            let feats = pool_rois(g, &p, i, &props, cfg.box_pool, cfg.roi_sampling)?;
            let (logits, deltas) = self.box_head.forward(g, feats)?;
            let probs = softmax_rows(g.value(logits));
            let deltas = g.value(deltas).to_f64_vec();
            let cands =
                select_detections(&props, &probs, &deltas, cfg.num_classes, (h, w), cfg.score_thresh, cfg.nms_thresh, cfg.max_det);
            if cands.is_empty() {
                all.push(Vec::new());
                continue;
            }
            let boxes: Vec<BBox> = cands.iter().map(|c| c.bbox).collect();
            let classes: Vec<usize> = cands.iter().map(|c| c.class_id).collect();
            let feats = pool_rois(g, &p, i, &boxes, cfg.mask_pool, cfg.roi_sampling)?;
            let logits = self.mask_head.forward(g, feats)?;
            let rows = select_class(g, logits, &classes)?;
            let m = g.value(rows).to_f64_vec();
            let per = MASK_SIZE * MASK_SIZE;
            let dets = cands
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let probs: Vec<f64> = m[k * per..(k + 1) * per].iter().map(|&z| crate::scalar::sigmoid(z)).collect();
                    Detection { bbox: c.bbox, class_id: c.class_id, score: c.score, mask: paste_mask(&probs, &c.bbox, (h, w)) }
                })
                .collect();
            all.push(dets);
        }
        Ok(all)
    }

    /// SHA-256 over every parameter and buffer name with its shape. Changes
    /// with anything that alters the architecture, not with the objective.
    pub fn fingerprint<T: Scalar>(store: &ParamStore<T>) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in store.entries() {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update([0xffu8]);
        }
        h.finalize().into()
    }
}

fn softmax_rows<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    let k = t.shape()[1];
    let mut out = t.to_f64_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - m);
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Packs records into a normalized `[n, 3, h, w]` batch; sizes must agree.
pub fn image_batch<T: Scalar>(records: &[&DatasetRecord]) -> Result<Tensor<T>> {
    ensure!(!records.is_empty(), "empty batch");
    let (w, h) = (records[0].width, records[0].height);
    let mut data = Vec::with_capacity(records.len() * 3 * h * w);
    for r in records {
        ensure!(r.width == w && r.height == h, "batch mixes {}x{} and {}x{} images", w, h, r.width, r.height);
        data.extend(r.image.normalized_chw().into_iter().map(|v| T::from_f64(v as f64)));
    }
    Tensor::from_vec(&[records.len(), 3, h, w], data)
}

/// Training targets of a record: crowd instances dropped, masks rasterized.
pub fn targets_of(record: &DatasetRecord) -> Result<ImageTargets> {
    let mut t = ImageTargets::default();
    for inst in record.instances.iter().filter(|i| !i.iscrowd) {
        let m = inst.mask.raster(record.height, record.width)?;
        if m.is_empty() {
            continue;
        }
        t.boxes.push(inst.bbox);
        t.classes.push(inst.class_id);
        t.masks.push(m);
    }
    Ok(t)
}

/// Short human-readable summary of a configuration.
pub fn describe(cfg: &ModelConfig) -> String {
    alloc::format!(
        "{}{}{} + {} + {} mask loss",
        cfg.backbone.variant.name(),
        if cfg.backbone.use_sam { "+SAM" } else { "" },
        if cfg.backbone.use_csp { "+CSP" } else { "" },
        cfg.neck.name(),
        cfg.heads.mask_loss.name()
    )
}
