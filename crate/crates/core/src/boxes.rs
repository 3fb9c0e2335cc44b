//! Axis-aligned boxes, the delta parameterization used by the heads, and NMS.

use alloc::vec::Vec;

/// `[x1, y1, x2, y2]` in image pixels; widths are `x2 - x1`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.x2 > self.x1 && self.y2 > self.y1
    }

    /// Clamps to `[0, w] × [0, h]`.
    pub fn clip(&self, (h, w): (usize, usize)) -> Self {
        let (h, w) = (h as f64, w as f64);
        Self::new(self.x1.clamp(0.0, w), self.y1.clamp(0.0, h), self.x2.clamp(0.0, w), self.y2.clamp(0.0, h))
    }

    pub fn intersection(&self, o: &BBox) -> f64 {
        let w = self.x2.min(o.x2) - self.x1.max(o.x1);
        let h = self.y2.min(o.y2) - self.y1.max(o.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn hflip(&self, width: usize) -> Self {
        let w = width as f64;
        Self::new(w - self.x2, self.y1, w - self.x1, self.y2)
    }

    pub fn vflip(&self, height: usize) -> Self {
        let h = height as f64;
        Self::new(self.x1, h - self.y2, self.x2, h - self.y1)
    }
}

/// Upper bound on `dw`, `dh` before exponentiation.
pub const DELTA_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// `(dx, dy, dw, dh)` relative to a reference box, each scaled by a weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoder {
    pub weights: [f64; 4],
}

impl BoxCoder {
    pub const UNIT: BoxCoder = BoxCoder { weights: [1.0; 4] };
    pub const HEAD: BoxCoder = BoxCoder { weights: [10.0, 10.0, 5.0, 5.0] };

    pub fn encode(&self, reference: &BBox, target: &BBox) -> [f64; 4] {
        let (rx, ry) = reference.center();
        let (tx, ty) = target.center();
        let (rw, rh) = (reference.width(), reference.height());
        let [wx, wy, ww, wh] = self.weights;
        [
            wx * (tx - rx) / rw,
            wy * (ty - ry) / rh,
            ww * libm::log(target.width() / rw),
            wh * libm::log(target.height() / rh),
        ]
    }

    pub fn decode(&self, reference: &BBox, d: [f64; 4]) -> BBox {
        let (rx, ry) = reference.center();
        let (rw, rh) = (reference.width(), reference.height());
        let [wx, wy, ww, wh] = self.weights;
        let dw = (d[2] / ww).min(DELTA_CLAMP);
        let dh = (d[3] / wh).min(DELTA_CLAMP);
        BBox::from_center(rx + d[0] / wx * rw, ry + d[1] / wy * rh, rw * libm::exp(dw), rh * libm::exp(dh))
    }
}

pub fn encode_boxes(coder: &BoxCoder, references: &[BBox], targets: &[BBox]) -> Vec<[f64; 4]> {
    references.iter().zip(targets).map(|(r, t)| coder.encode(r, t)).collect()
}

/// Decodes and, when `clip` is given, clips to the image.
pub fn decode_boxes(coder: &BoxCoder, references: &[BBox], deltas: &[[f64; 4]], clip: Option<(usize, usize)>) -> Vec<BBox> {
    references
        .iter()
        .zip(deltas)
        .map(|(r, &d)| {
            let b = coder.decode(r, d);
            clip.map_or(b, |hw| b.clip(hw))
        })
        .collect()
}

/// Greedy non-maximum suppression. Boxes are visited by descending score
/// (ties: lower index first); a box is dropped when its IoU with an already
/// kept box exceeds `iou_threshold`. Returns kept indices in visit order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    let mut suppressed = alloc::vec![false; boxes.len()];
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && boxes[i].iou(&boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// NMS applied independently within each group (e.g. class); output sorted by
/// descending score.
pub fn batched_nms(boxes: &[BBox], scores: &[f64], groups: &[usize], iou_threshold: f64) -> Vec<usize> {
    let mut keys: Vec<usize> = groups.to_vec();
    keys.sort_unstable();
    keys.dedup();
    let mut keep = Vec::new();
    for k in keys {
        let idx: Vec<usize> = (0..boxes.len()).filter(|&i| groups[i] == k).collect();
        let b: Vec<BBox> = idx.iter().map(|&i| boxes[i]).collect();
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        keep.extend(nms(&b, &s, iou_threshold).into_iter().map(|j| idx[j]));
    }
    keep.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    keep
}
