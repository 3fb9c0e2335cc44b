//! Independent reference implementations used by the property and acceptance
//! tests. Each one is written in the most direct form available, sharing no
//! code with the kernels it is compared against.

#![allow(dead_code)]

use cspdet_core::boxes::BBox;
use cspdet_core::data::Mask;
use cspdet_core::detector::Detection;
use cspdet_core::metrics::GtInstance;

/// Seven nested loops. `x` is `[n, c_in, h, w]`, `w` is `[c_out, c_in/groups, k, k]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    [n, c_in, h, wd]: [usize; 4],
    w: &[f64],
    bias: Option<&[f64]>,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Vec<f64> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let cig = c_in / groups;
    let cog = c_out / groups;
    let mut out = vec![0.0; n * c_out * ho * wo];
    for b in 0..n {
        for oc in 0..c_out {
            let grp = oc / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bv| bv[oc]);
                    for ic in 0..cig {
                        let c = grp * cig + ic;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((b * c_in + c) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((oc * cig + ic) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * c_out + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Quadratic NMS by repeated arg-max: take the best remaining box, delete
/// everything overlapping it by more than the threshold, repeat. Returns the
/// kept set in ascending index order.
pub fn nms(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if scores[i] > scores[best] || (scores[i] == scores[best] && i < best) {
                best = i;
            }
        }
        keep.push(best);
        alive.retain(|&i| i != best && iou(&boxes[i], &boxes[best]) <= thr);
    }
    keep.sort_unstable();
    keep
}

/// Bilinear read of one `[h, w]` plane at `(y, x)`, zero outside
/// `[-1, h] × [-1, w]`, edge-clamped inside.
pub fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return 0.0;
    }
    let y = y.max(0.0).min((h - 1) as f64);
    let x = x.max(0.0).min((w - 1) as f64);
    let (y0, x0) = (y.floor(), x.floor());
    let (y1, x1) = ((y0 + 1.0).min((h - 1) as f64), (x0 + 1.0).min((w - 1) as f64));
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| plane[yy as usize * w + xx as usize];
    at(y0, x0) * (1.0 - fy) * (1.0 - fx) + at(y0, x1) * (1.0 - fy) * fx + at(y1, x0) * fy * (1.0 - fx) + at(y1, x1) * fy * fx
}

/// RoIAlign with half-pixel alignment: the region `[x1, y1, x2, y2]·scale − ½`
/// (widened to at least one pixel per side) is split into `out` bins, each
/// averaging a `sampling × sampling` grid of bilinear samples at sub-bin
/// centres. `x` is `[c, h, w]`; output `[c, out_h, out_w]`.
pub fn roi_align(x: &[f64], [c, h, w]: [usize; 3], b: [f64; 4], scale: f64, (oh, ow): (usize, usize), sampling: usize) -> Vec<f64> {
    let (x1, y1) = (b[0] * scale - 0.5, b[1] * scale - 0.5);
    let rw = ((b[2] - b[0]) * scale).max(1.0);
    let rh = ((b[3] - b[1]) * scale).max(1.0);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for by in 0..oh {
            for bx in 0..ow {
                let mut acc = 0.0;
                for sy in 0..sampling {
                    for sx in 0..sampling {
                        let yy = y1 + rh * (by as f64 + (sy as f64 + 0.5) / sampling as f64) / oh as f64;
                        let xx = x1 + rw * (bx as f64 + (sx as f64 + 0.5) / sampling as f64) / ow as f64;
                        acc += bilinear(plane, h, w, yy, xx);
                    }
                }
                out.push(acc / (sampling * sampling) as f64);
            }
        }
    }
    out
}

/// Interpolated precision at each recall point, evaluated point by point:
/// the best precision among ranks whose recall reaches it.
pub fn ap_direct(flags: &[bool], n_gt: usize) -> f64 {
    let mut pts = Vec::new();
    let mut tp = 0;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        pts.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let best = pts.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
        total += best;
    }
    total / 101.0
}

/// Pixel-count mask IoU; 0 for two empty masks.
pub fn mask_iou(a: &Mask, b: &Mask) -> f64 {
    let (mut i, mut u) = (0usize, 0usize);
    for (p, q) in a.data.iter().zip(&b.data) {
        i += (*p != 0 && *q != 0) as usize;
        u += (*p != 0 || *q != 0) as usize;
    }
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

/// Metrics of a corpus without crowd regions, computed from first principles:
/// `(box AP, mask AP, mIoU)`; AP is `None` without ground truth, mIoU is
/// `None` without ground truth or without detections.
pub struct SheetResult {
    pub box_ap: Option<f64>,
    pub mask_ap: Option<f64>,
    pub miou: Option<f64>,
}

pub fn evaluate_sheet(dets: &[Vec<Detection>], gts: &[Vec<GtInstance>], num_classes: usize) -> SheetResult {
    let dets: Vec<Vec<Detection>> = dets
        .iter()
        .map(|d| {
            let mut d = d.clone();
            d.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            d.truncate(100);
            d
        })
        .collect();
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut kinds = [Vec::new(), Vec::new()];
    let mut iou_sum = 0.0;
    for cls in 1..=num_classes {
        let n_gt = gts.iter().flatten().filter(|g| g.class_id == cls).count();
        if n_gt == 0 {
            continue;
        }
        for (kind, sink) in kinds.iter_mut().enumerate() {
            let mut per_t = Vec::new();
            for (ti, &t) in thresholds.iter().enumerate() {
                // (score, image, is_tp) rows, one per detection of this class.
                let mut rows: Vec<(f64, usize, bool)> = Vec::new();
                for (img, (d, g)) in dets.iter().zip(gts).enumerate() {
                    let g: Vec<&GtInstance> = g.iter().filter(|x| x.class_id == cls).collect();
                    let mut used = vec![false; g.len()];
                    for det in d.iter().filter(|x| x.class_id == cls) {
                        let score_of = |gi: &GtInstance| if kind == 0 { iou(&det.bbox, &gi.bbox) } else { mask_iou(&det.mask, &gi.mask) };
                        let mut pick: Option<usize> = None;
                        for (j, gi) in g.iter().enumerate() {
                            let v = score_of(gi);
                            if used[j] || v < t {
                                continue;
                            }
                            if pick.is_none_or(|p| v > score_of(g[p])) {
                                pick = Some(j);
                            }
                        }
                        if let Some(j) = pick {
                            used[j] = true;
                            if kind == 1 && ti == 0 {
                                iou_sum += mask_iou(&det.mask, &g[j].mask);
                            }
                        }
                        rows.push((det.score, img, pick.is_some()));
                    }
                }
                rows.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                let flags: Vec<bool> = rows.iter().map(|r| r.2).collect();
                per_t.push(ap_direct(&flags, n_gt));
            }
            sink.push(per_t.iter().sum::<f64>() / per_t.len() as f64);
        }
    }
    let mean = |v: &Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let n_det: usize = dets.iter().map(Vec::len).sum();
    SheetResult {
        box_ap: mean(&kinds[0]),
        mask_ap: mean(&kinds[1]),
        miou: (n_gt > 0 && n_det > 0).then(|| iou_sum / n_gt as f64),
    }
}

/// Column-major run lengths computed by walking pixels in column order.
pub fn rle_counts(m: &Mask) -> Vec<u32> {
    let mut flat = Vec::with_capacity(m.height * m.width);
    for x in 0..m.width {
        for y in 0..m.height {
            flat.push(m.get(y, x));
        }
    }
    let mut counts = Vec::new();
    let mut cur = false;
    let mut run = 0u32;
    for v in flat {
        if v == cur {
            run += 1;
        } else {
            counts.push(run);
            cur = v;
            run = 1;
        }
    }
    counts.push(run);
    counts
}

pub struct HandExpected {
    pub box_ap: f64,
    pub mask_ap: f64,
    pub miou: f64,
}

/// Worked by hand for [`hand_corpus`]. Ranking is FP (0.95), TP (0.9), then
/// the 0.62-box / 0.68-mask detection (0.8), against three ground truths.
/// When the last one counts: recall reaches 2/3 at precision 2/3, 67 grid
/// points. When it does not: recall 1/3 at precision 1/2, 34 grid points.
/// It counts at 3 box thresholds (0.50..0.60) and 4 mask ones (0.50..0.65).
pub const HAND_EXPECTED: HandExpected = HandExpected {
    box_ap: (3.0 * 67.0 * (2.0 / 3.0) / 101.0 + 7.0 * 34.0 * 0.5 / 101.0) / 10.0,
    mask_ap: (4.0 * 67.0 * (2.0 / 3.0) / 101.0 + 6.0 * 34.0 * 0.5 / 101.0) / 10.0,
    miou: (1.0 + 0.68) / 3.0,
};

/// Three 24×24 images, one class: a perfect detection; a partial detection
/// plus a higher-scored stray; a missed instance.
pub fn hand_corpus() -> (Vec<Vec<Detection>>, Vec<Vec<GtInstance>>) {
    const S: usize = 24;
    let rect = |x1: usize, y1: usize, x2: usize, y2: usize| Mask::from_fn(S, S, |y, x| x >= x1 && x < x2 && y >= y1 && y < y2);
    let gt = |m: Mask| GtInstance { bbox: m.bbox().unwrap(), class_id: 1, mask: m, iscrowd: false };

    let g1 = gt(rect(2, 2, 8, 8));
    let d1 = Detection { bbox: g1.bbox, class_id: 1, score: 0.9, mask: g1.mask.clone() };

    let g2 = gt(rect(0, 0, 10, 10));
    // box 6.2 × 10 inside 10 × 10, mask 68 of the 100 pixels
    let partial = Mask::from_fn(S, S, |y, x| x < 10 && y < 10 && y * 10 + x < 68);
    let d2 = Detection { bbox: BBox::new(0.0, 0.0, 6.2, 10.0), class_id: 1, score: 0.8, mask: partial };
    let stray = rect(14, 14, 20, 20);
    let fp = Detection { bbox: stray.bbox().unwrap(), class_id: 1, score: 0.95, mask: stray };

    let g3 = gt(rect(10, 4, 16, 12));
    (vec![vec![d1], vec![d2, fp], vec![]], vec![vec![g1], vec![g2], vec![g3]])
}
