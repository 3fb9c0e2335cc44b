//! Turning head outputs into final detections.

use alloc::vec::Vec;

use super::MASK_SIZE;
use crate::boxes::{batched_nms, BBox, BoxCoder};
use crate::data::Mask;

/// Masks are binarized at this probability.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// 1-based.
    pub class_id: usize,
    pub score: f64,
    /// Image-sized raster.
    pub mask: Mask,
}

/// A scored box before its mask is computed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Per-class score filter, per-class NMS and a global `max_det` cut, ordered by
/// descending score. `probs` is `[r, C + 1]` softmax output, `deltas` `[r, 4C]`.
#[allow(clippy::too_many_arguments)]
pub fn select_detections(
    rois: &[BBox],
    probs: &[f64],
    deltas: &[f64],
    num_classes: usize,
    image_hw: (usize, usize),
    score_thresh: f64,
    nms_thresh: f64,
    max_det: usize,
) -> Vec<Candidate> {
    let k = num_classes + 1;
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    let mut classes = Vec::new();
    for (r, roi) in rois.iter().enumerate() {
        for c in 1..=num_classes {
            let s = probs[r * k + c];
            if s <= score_thresh {
                continue;
            }
            let o = r * 4 * num_classes + 4 * (c - 1);
            let d = [deltas[o], deltas[o + 1], deltas[o + 2], deltas[o + 3]];
            let b = BoxCoder::HEAD.decode(roi, d).clip(image_hw);
            if b.width() <= 0.0 || b.height() <= 0.0 {
                continue;
            }
            boxes.push(b);
            scores.push(s);
            classes.push(c);
        }
    }
    let mut keep = batched_nms(&boxes, &scores, &classes, nms_thresh);
    keep.truncate(max_det);
    keep.into_iter().map(|i| Candidate { bbox: boxes[i], class_id: classes[i], score: scores[i] }).collect()
}

/// Resamples a `28 × 28` probability map onto the pixels whose centers lie in
/// `bbox` (bilinear, half-pixel centers, edge-clamped) and thresholds it.
pub fn paste_mask(probs: &[f64], bbox: &BBox, (h, w): (usize, usize)) -> Mask {
    debug_assert_eq!(probs.len(), MASK_SIZE * MASK_SIZE);
    let mut m = Mask::new(h, w);
    let (bw, bh) = (bbox.width(), bbox.height());
    if bw <= 0.0 || bh <= 0.0 {
        return m;
    }
    let s = MASK_SIZE as f64;
    let x0 = libm::floor(bbox.x1 - 0.5).max(0.0) as usize;
    let y0 = libm::floor(bbox.y1 - 0.5).max(0.0) as usize;
    let x_end = (libm::ceil(bbox.x2 - 0.5).max(0.0) as usize).min(w);
    let y_end = (libm::ceil(bbox.y2 - 0.5).max(0.0) as usize).min(h);
    for y in y0..y_end {
        let cy = y as f64 + 0.5;
        if cy < bbox.y1 || cy >= bbox.y2 {
            continue;
        }
        let v = ((cy - bbox.y1) / bh * s - 0.5).clamp(0.0, s - 1.0);
        for x in x0..x_end {
            let cx = x as f64 + 0.5;
            if cx < bbox.x1 || cx >= bbox.x2 {
                continue;
            }
            let u = ((cx - bbox.x1) / bw * s - 0.5).clamp(0.0, s - 1.0);
            if bilinear(probs, v, u) >= MASK_THRESHOLD {
                m.set(y, x, true);
            }
        }
    }
    m
}

fn bilinear(p: &[f64], y: f64, x: f64) -> f64 {
    let (y0, x0) = (libm::floor(y) as usize, libm::floor(x) as usize);
    let (y1, x1) = ((y0 + 1).min(MASK_SIZE - 1), (x0 + 1).min(MASK_SIZE - 1));
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| p[r * MASK_SIZE + c];
    (1.0 - ly) * ((1.0 - lx) * at(y0, x0) + lx * at(y0, x1)) + ly * ((1.0 - lx) * at(y1, x0) + lx * at(y1, x1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn all_scores_below_threshold_give_nothing() {
        let rois = [BBox::new(0.0, 0.0, 10.0, 10.0)];
        let c = select_detections(&rois, &[0.99, 0.01], &[0.0; 4], 1, (32, 32), 0.05, 0.5, 100);
        assert!(c.is_empty());
    }

    #[test]
    fn one_confident_roi() {
        let rois = [BBox::new(2.0, 3.0, 12.0, 20.0)];
        let c = select_detections(&rois, &[0.1, 0.9], &[0.0; 4], 1, (32, 32), 0.05, 0.5, 100);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].bbox, rois[0]);
        let m = paste_mask(&vec![1.0; 784], &c[0].bbox, (32, 32));
        let tight = m.bbox().unwrap();
        assert!(tight.x1 >= 2.0 && tight.y1 >= 3.0 && tight.x2 <= 12.0 && tight.y2 <= 20.0);
        assert_eq!(m.area(), 10 * 17);
    }

    #[test]
    fn pasted_area_scales_with_box() {
        // Rectangle covering columns 7..21 and rows 4..24 of the 28-grid.
        let p: Vec<f64> = (0..784).map(|i| ((i / 28 >= 4 && i / 28 < 24 && i % 28 >= 7 && i % 28 < 21) as u8) as f64).collect();
        let small = 20.0 * 14.0;
        let b = BBox::new(10.0, 5.0, 66.0, 61.0);
        let m = paste_mask(&p, &b, (80, 80));
        let want = small * b.area() / 784.0;
        assert!((m.area() as f64 - want).abs() / want < 0.1, "{} vs {}", m.area(), want);
    }
}
