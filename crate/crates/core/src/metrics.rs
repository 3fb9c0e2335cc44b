//! COCO-style box and mask AP, and instance mIoU.

use alloc::vec;
use alloc::vec::Vec;

use crate::boxes::BBox;
use crate::data::Mask;
use crate::detector::Detection;

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    core::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// Recall grid 0, 0.01, …, 1.
pub const RECALL_POINTS: usize = 101;

/// Detections per image that enter evaluation.
pub const MAX_DETS: usize = 100;

/// One ground-truth instance as seen by the evaluator.
#[derive(Clone, Debug, PartialEq)]
pub struct GtInstance {
    pub bbox: BBox,
    pub class_id: usize,
    pub mask: Mask,
    pub iscrowd: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IouKind {
    Box,
    Mask,
}

/// Mask IoU from pixel counts; `None` when both masks are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> Option<f64> {
    a.iou(b)
}

/// IoU of a detection against a ground truth. For crowd regions the union is
/// replaced by the detection's own area, so any detection inside a crowd
/// region overlaps it fully.
pub fn pair_iou(d: &Detection, g: &GtInstance, kind: IouKind) -> f64 {
    match kind {
        IouKind::Box => {
            if g.iscrowd {
                let a = d.bbox.area();
                if a > 0.0 {
                    d.bbox.intersection(&g.bbox) / a
                } else {
                    0.0
                }
            } else {
                d.bbox.iou(&g.bbox)
            }
        }
        IouKind::Mask => {
            if g.iscrowd {
                let a = d.mask.area();
                if a > 0 {
                    d.mask.intersection(&g.mask) as f64 / a as f64
                } else {
                    0.0
                }
            } else {
                mask_iou(&d.mask, &g.mask).unwrap_or(0.0)
            }
        }
    }
}

/// Outcome of greedy matching for one image and class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    pub tp: Vec<bool>,
    /// Matched a crowd region: neither true nor false positive.
    pub ignored: Vec<bool>,
    /// Ground-truth index matched by each detection.
    pub matched: Vec<Option<usize>>,
}

/// Greedy matching of detections (sorted by descending score) to ground
/// truth. Each detection takes the highest-IoU still-unmatched non-crowd GT
/// with IoU ≥ `threshold`; failing that, a crowd GT with IoU ≥ `threshold`
/// absorbs it without being consumed. `ious[d][g]`.
pub fn match_detections(ious: &[Vec<f64>], crowd: &[bool], threshold: f64) -> MatchResult {
    let mut taken = vec![false; crowd.len()];
    let mut r = MatchResult::default();
    for row in ious {
        let mut best: Option<(f64, usize)> = None;
        for (j, &iou) in row.iter().enumerate() {
            if crowd[j] || taken[j] || iou < threshold {
                continue;
            }
            if best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, j));
            }
        }
        if let Some((_, j)) = best {
            taken[j] = true;
            r.tp.push(true);
            r.ignored.push(false);
            r.matched.push(Some(j));
            continue;
        }
        let crowd_hit = row.iter().enumerate().find(|&(j, &iou)| crowd[j] && iou >= threshold).map(|(j, _)| j);
        r.tp.push(false);
        r.ignored.push(crowd_hit.is_some());
        r.matched.push(crowd_hit);
    }
    r
}

/// 101-point interpolated AP of a ranked list of true/false positive flags.
/// `None` when there is no ground truth to recall.
pub fn average_precision(flags_by_rank: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let n = flags_by_rank.len();
    let mut recall = Vec::with_capacity(n);
    let mut precision = Vec::with_capacity(n);
    let (mut tp, mut fp) = (0usize, 0usize);
    for &f in flags_by_rank {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..n.saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let i = recall.partition_point(|&x| x < r);
        if i < n {
            sum += precision[i];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

/// Orders a class's detections across images by descending score (stable in
/// image order) and returns AP over the non-ignored ones.
fn class_ap(entries: &mut [(f64, bool, bool)], n_gt: usize) -> Option<f64> {
    entries.sort_by(|a, b| b.0.total_cmp(&a.0));
    let flags: Vec<bool> = entries.iter().filter(|e| !e.2).map(|e| e.1).collect();
    average_precision(&flags, n_gt)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassResult {
    pub class_id: usize,
    pub num_gt: usize,
    pub box_ap: Option<f64>,
    pub mask_ap: Option<f64>,
}

/// Mask-IoU counts at threshold 0.5.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalResult {
    /// Mean over the ten thresholds; `None` when no class has ground truth.
    pub box_ap: Option<f64>,
    pub mask_ap: Option<f64>,
    pub box_ap_per_threshold: Vec<f64>,
    pub mask_ap_per_threshold: Vec<f64>,
    /// `None` without ground truth or without any detection.
    pub miou: Option<f64>,
    pub per_class: Vec<ClassResult>,
    pub counts: Counts,
    pub num_images: usize,
    pub num_gt: usize,
    pub num_dets: usize,
}

impl EvalResult {
    pub fn is_defined(&self) -> bool {
        self.box_ap.is_some() && self.mask_ap.is_some()
    }

    pub fn mask_ap50(&self) -> Option<f64> {
        self.mask_ap.map(|_| self.mask_ap_per_threshold[0])
    }

    pub fn box_ap50(&self) -> Option<f64> {
        self.box_ap.map(|_| self.box_ap_per_threshold[0])
    }
}

fn top_dets(d: &[Detection]) -> Vec<&Detection> {
    let mut v: Vec<&Detection> = d.iter().collect();
    v.sort_by(|a, b| b.score.total_cmp(&a.score));
    v.truncate(MAX_DETS);
    v
}

/// AP averaged over classes (those with ground truth) then over thresholds,
/// plus mIoU: the mean over non-crowd GT instances of the mask IoU with the
/// same-class detection matched at 0.5, unmatched instances counting 0.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<GtInstance>], num_classes: usize) -> EvalResult {
    assert_eq!(dets.len(), gts.len(), "detections and ground truth cover different image counts");
    let thresholds = iou_thresholds();
    let dets: Vec<Vec<&Detection>> = dets.iter().map(|d| top_dets(d)).collect();
    let mut res = EvalResult {
        num_images: gts.len(),
        num_gt: gts.iter().flatten().filter(|g| !g.iscrowd).count(),
        num_dets: dets.iter().map(Vec::len).sum(),
        ..Default::default()
    };
    let mut box_sum = [0.0; 10];
    let mut mask_sum = [0.0; 10];
    let mut defined = 0usize;
    let mut iou_sum = 0.0;
    for c in 1..=num_classes {
        let n_gt = gts.iter().flatten().filter(|g| g.class_id == c && !g.iscrowd).count();
        let mut cr = ClassResult { class_id: c, num_gt: n_gt, ..Default::default() };
        let mut per_kind = [[0.0; 10]; 2];
        let mut any = true;
        for (ki, kind) in [IouKind::Box, IouKind::Mask].into_iter().enumerate() {
            for (ti, &t) in thresholds.iter().enumerate() {
                let mut entries = Vec::new();
                for (d, g) in dets.iter().zip(gts) {
                    let dc: Vec<&Detection> = d.iter().copied().filter(|x| x.class_id == c).collect();
                    let gc: Vec<&GtInstance> = g.iter().filter(|x| x.class_id == c).collect();
                    let ious: Vec<Vec<f64>> = dc.iter().map(|x| gc.iter().map(|y| pair_iou(x, y, kind)).collect()).collect();
                    let crowd: Vec<bool> = gc.iter().map(|y| y.iscrowd).collect();
                    let m = match_detections(&ious, &crowd, t);
                    for (k, x) in dc.iter().enumerate() {
                        entries.push((x.score, m.tp[k], m.ignored[k]));
                    }
                    if kind == IouKind::Mask && ti == 0 {
                        for (k, &tp) in m.tp.iter().enumerate() {
                            if tp {
                                res.counts.tp += 1;
                                iou_sum += ious[k][m.matched[k].expect("tp is matched")];
                            } else if !m.ignored[k] {
                                res.counts.fp += 1;
                            }
                        }
                        let hit = m.tp.iter().filter(|&&x| x).count();
                        res.counts.fn_ += crowd.iter().filter(|&&x| !x).count() - hit;
                    }
                }
                match class_ap(&mut entries, n_gt) {
                    Some(ap) => per_kind[ki][ti] = ap,
                    None => any = false,
                }
            }
        }
        if any {
            defined += 1;
            for t in 0..10 {
                box_sum[t] += per_kind[0][t];
                mask_sum[t] += per_kind[1][t];
            }
            cr.box_ap = Some(per_kind[0].iter().sum::<f64>() / 10.0);
            cr.mask_ap = Some(per_kind[1].iter().sum::<f64>() / 10.0);
        }
        res.per_class.push(cr);
    }
    if defined > 0 {
        res.box_ap_per_threshold = box_sum.iter().map(|s| s / defined as f64).collect();
        res.mask_ap_per_threshold = mask_sum.iter().map(|s| s / defined as f64).collect();
        res.box_ap = Some(res.box_ap_per_threshold.iter().sum::<f64>() / 10.0);
        res.mask_ap = Some(res.mask_ap_per_threshold.iter().sum::<f64>() / 10.0);
    }
    if res.num_gt > 0 && res.num_dets > 0 {
        res.miou = Some(iou_sum / res.num_gt as f64);
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_tp_and_single_fp() {
        assert_eq!(average_precision(&[true], 1), Some(1.0));
        assert_eq!(average_precision(&[false], 1), Some(0.0));
        assert_eq!(average_precision(&[], 1), Some(0.0));
        assert_eq!(average_precision(&[], 0), None);
    }

    #[test]
    fn tp_fp_tp_hand_value() {
        // recall 0.5 @ precision 1, recall 1 @ precision 2/3: 51 grid points at 1, 50 at 2/3.
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - (51.0 + 50.0 * 2.0 / 3.0) / 101.0).abs() < 1e-12);
    }

    #[test]
    fn two_dets_one_gt() {
        let m = match_detections(&[vec![0.9], vec![0.8]], &[false], 0.5);
        assert_eq!(m.tp, [true, false]);
        assert_eq!(m.matched, [Some(0), None]);
    }

    #[test]
    fn crowd_absorbs_without_consuming() {
        let m = match_detections(&[vec![0.9], vec![0.8]], &[true], 0.5);
        assert_eq!(m.tp, [false, false]);
        assert_eq!(m.ignored, [true, true]);
    }

    #[test]
    fn perfect_detector_scores_one() {
        let mask = Mask::from_fn(8, 8, |y, x| y < 4 && x < 5);
        let g = GtInstance { bbox: mask.bbox().unwrap(), class_id: 1, mask: mask.clone(), iscrowd: false };
        let d = Detection { bbox: g.bbox, class_id: 1, score: 1.0, mask };
        let r = evaluate(&[vec![d]], &[vec![g]], 1);
        assert_eq!((r.box_ap, r.mask_ap, r.miou), (Some(1.0), Some(1.0), Some(1.0)));
    }

    #[test]
    fn no_detections_gives_zero_ap_and_undefined_miou() {
        let mask = Mask::from_fn(8, 8, |y, _| y < 2);
        let g = GtInstance { bbox: mask.bbox().unwrap(), class_id: 1, mask, iscrowd: false };
        let r = evaluate(&[vec![]], &[vec![g]], 1);
        assert_eq!(r.box_ap, Some(0.0));
        assert_eq!(r.miou, None);
        let r = evaluate(&[vec![]], &[vec![]], 1);
        assert!(!r.is_defined());
    }
}
