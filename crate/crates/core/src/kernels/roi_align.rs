//! RoIAlign: each output bin averages `sampling × sampling` bilinear samples
//! taken at half-pixel-aligned positions inside the region.

use alloc::vec::Vec;

use crate::scalar::Scalar;

/// Sparse sampling plan shared by every channel: output bin `b` reads
/// `entries[offsets[b]..offsets[b + 1]]` as `(flat pixel index, weight)`.
#[derive(Clone, Debug)]
pub struct RoiPlan<T> {
    pub rois: usize,
    pub out_h: usize,
    pub out_w: usize,
    offsets: Vec<u32>,
    entries: Vec<(u32, T)>,
    /// RoIs narrower or shorter than one feature pixel, widened to one pixel.
    pub clamped: usize,
}

/// `boxes` are `[x1, y1, x2, y2]` in image pixels; `scale` maps them onto the
/// `h × w` feature grid.
pub fn roi_align_plan<T: Scalar>(
    boxes: &[[f64; 4]],
    scale: f64,
    (h, w): (usize, usize),
    (out_h, out_w): (usize, usize),
    sampling: usize,
) -> RoiPlan<T> {
    let mut offsets = Vec::with_capacity(boxes.len() * out_h * out_w + 1);
    let mut entries = Vec::new();
    let mut clamped = 0;
    offsets.push(0u32);
    let sr = sampling.max(1);
    let count = (sr * sr) as f64;
    for b in boxes {
        let x1 = b[0] * scale - 0.5;
        let y1 = b[1] * scale - 0.5;
        let mut rw = b[2] * scale - 0.5 - x1;
        let mut rh = b[3] * scale - 0.5 - y1;
        if rw < 1.0 || rh < 1.0 {
            clamped += 1;
            rw = rw.max(1.0);
            rh = rh.max(1.0);
        }
        let bin_w = rw / out_w as f64;
        let bin_h = rh / out_h as f64;
        for by in 0..out_h {
            for bx in 0..out_w {
                for iy in 0..sr {
                    let y = y1 + by as f64 * bin_h + (iy as f64 + 0.5) * bin_h / sr as f64;
                    for ix in 0..sr {
                        let x = x1 + bx as f64 * bin_w + (ix as f64 + 0.5) * bin_w / sr as f64;
                        push_bilinear(&mut entries, y, x, h, w, 1.0 / count);
                    }
                }
                offsets.push(entries.len() as u32);
            }
        }
    }
    RoiPlan { rois: boxes.len(), out_h, out_w, offsets, entries, clamped }
}

fn push_bilinear<T: Scalar>(out: &mut Vec<(u32, T)>, y: f64, x: f64, h: usize, w: usize, scale: f64) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let (y0, y1, ly) = axis(y.max(0.0), h);
    let (x0, x1, lx) = axis(x.max(0.0), w);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    for (idx, wt) in [(y0 * w + x0, hy * hx), (y0 * w + x1, hy * lx), (y1 * w + x0, ly * hx), (y1 * w + x1, ly * lx)] {
        if wt != 0.0 {
            out.push((idx as u32, T::from_f64(wt * scale)));
        }
    }
}

fn axis(v: f64, n: usize) -> (usize, usize, f64) {
    let lo = v as usize;
    if lo >= n - 1 {
        (n - 1, n - 1, 0.0)
    } else {
        (lo, lo + 1, v - lo as f64)
    }
}

impl<T: Scalar> RoiPlan<T> {
    /// `x` is one image's `[c, h, w]` feature map; output is `[rois, c, out_h, out_w]`.
    pub fn forward(&self, x: &[T], c: usize, hw: usize) -> Vec<T> {
        let bins = self.out_h * self.out_w;
        let mut out = alloc::vec![T::ZERO; self.rois * c * bins];
        for r in 0..self.rois {
            for b in 0..bins {
                let e = &self.entries[self.offsets[r * bins + b] as usize..self.offsets[r * bins + b + 1] as usize];
                for ch in 0..c {
                    let plane = &x[ch * hw..(ch + 1) * hw];
                    let mut acc = T::ZERO;
                    for &(i, wt) in e {
                        acc += plane[i as usize] * wt;
                    }
                    out[(r * c + ch) * bins + b] = acc;
                }
            }
        }
        out
    }

    pub fn backward(&self, dy: &[T], c: usize, hw: usize) -> Vec<T> {
        let bins = self.out_h * self.out_w;
        let mut dx = alloc::vec![T::ZERO; c * hw];
        for r in 0..self.rois {
            for b in 0..bins {
                let e = &self.entries[self.offsets[r * bins + b] as usize..self.offsets[r * bins + b + 1] as usize];
                for ch in 0..c {
                    let g = dy[(r * c + ch) * bins + b];
                    if g == T::ZERO {
                        continue;
                    }
                    let plane = &mut dx[ch * hw..(ch + 1) * hw];
                    for &(i, wt) in e {
                        plane[i as usize] += g * wt;
                    }
                }
            }
        }
        dx
    }
}
