//! Geometric augmentation applied consistently to pixels, masks and boxes.

use alloc::vec::Vec;

use super::{DatasetRecord, InstanceAnnotation, Mask, MaskSource, RgbImage};
use crate::boxes::BBox;
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugmentOp {
    HFlip,
    VFlip,
    /// Rescale both axes by this factor.
    ScaleJitter(f64),
    /// Aspect-preserving resize into a `size × size` square, padding centered.
    ResizeTo(usize),
}

/// Mapping `dst = src * scale + pad` into an `out_w × out_h` canvas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub out_w: usize,
    pub out_h: usize,
}

impl Affine {
    pub fn letterbox(width: usize, height: usize, size: usize) -> Self {
        let scale = size as f64 / width.max(height) as f64;
        Self {
            scale,
            pad_x: (size as f64 - width as f64 * scale) / 2.0,
            pad_y: (size as f64 - height as f64 * scale) / 2.0,
            out_w: size,
            out_h: size,
        }
    }

    pub fn rescale(width: usize, height: usize, factor: f64) -> Self {
        let out_w = libm::round(width as f64 * factor).max(1.0) as usize;
        let out_h = libm::round(height as f64 * factor).max(1.0) as usize;
        Self { scale: factor, pad_x: 0.0, pad_y: 0.0, out_w, out_h }
    }

    pub fn apply_box(&self, b: &BBox) -> BBox {
        BBox::new(
            b.x1 * self.scale + self.pad_x,
            b.y1 * self.scale + self.pad_y,
            b.x2 * self.scale + self.pad_x,
            b.y2 * self.scale + self.pad_y,
        )
    }

    fn src(&self, dst: usize, pad: f64) -> f64 {
        (dst as f64 + 0.5 - pad) / self.scale
    }

    /// Bilinear resampling; area outside the source becomes black.
    pub fn apply_image(&self, im: &RgbImage) -> RgbImage {
        let mut out = RgbImage::new(self.out_w, self.out_h);
        let (w, h) = (im.width as f64, im.height as f64);
        for y in 0..self.out_h {
            let sy = self.src(y, self.pad_y);
            if sy < 0.0 || sy > h {
                continue;
            }
            let fy = (sy - 0.5).clamp(0.0, h - 1.0);
            let y0 = fy as usize;
            let y1 = (y0 + 1).min(im.height - 1);
            let ly = fy - y0 as f64;
            for x in 0..self.out_w {
                let sx = self.src(x, self.pad_x);
                if sx < 0.0 || sx > w {
                    continue;
                }
                let fx = (sx - 0.5).clamp(0.0, w - 1.0);
                let x0 = fx as usize;
                let x1 = (x0 + 1).min(im.width - 1);
                let lx = fx - x0 as f64;
                let (a, b, c, d) = (im.pixel(y0, x0), im.pixel(y0, x1), im.pixel(y1, x0), im.pixel(y1, x1));
                let px = [0, 1, 2].map(|k| {
                    let top = a[k] as f64 * (1.0 - lx) + b[k] as f64 * lx;
                    let bot = c[k] as f64 * (1.0 - lx) + d[k] as f64 * lx;
                    libm::round(top * (1.0 - ly) + bot * ly).clamp(0.0, 255.0) as u8
                });
                out.put(y, x, px);
            }
        }
        out
    }

    /// Nearest-neighbour resampling at pixel centers.
    pub fn apply_mask(&self, m: &Mask) -> Mask {
        Mask::from_fn(self.out_h, self.out_w, |y, x| {
            let sy = self.src(y, self.pad_y);
            let sx = self.src(x, self.pad_x);
            if sy < 0.0 || sx < 0.0 {
                return false;
            }
            let (iy, ix) = (sy as usize, sx as usize);
            iy < m.height && ix < m.width && m.get(iy, ix)
        })
    }
}

fn map_instances(
    rec: &DatasetRecord,
    f_mask: impl Fn(&Mask) -> Mask,
    f_box: impl Fn(&BBox) -> BBox,
) -> Result<Vec<InstanceAnnotation>> {
    rec.instances
        .iter()
        .map(|inst| {
            let m = f_mask(&inst.mask.raster(rec.height, rec.width)?);
            let bbox = m.bbox().unwrap_or_else(|| f_box(&inst.bbox));
            Ok(InstanceAnnotation { class_id: inst.class_id, bbox, mask: MaskSource::Raster(m), iscrowd: inst.iscrowd })
        })
        .collect()
}

pub fn apply(rec: &DatasetRecord, op: AugmentOp) -> Result<DatasetRecord> {
    let (w, h) = (rec.width, rec.height);
    let (image, instances) = match op {
        AugmentOp::HFlip => (rec.image.hflip(), map_instances(rec, Mask::hflip, |b| b.hflip(w))?),
        AugmentOp::VFlip => (rec.image.vflip(), map_instances(rec, Mask::vflip, |b| b.vflip(h))?),
        AugmentOp::ScaleJitter(f) => {
            ensure!(f.is_finite() && f > 0.0, "scale factor must be positive");
            let a = Affine::rescale(w, h, f);
            (a.apply_image(&rec.image), map_instances(rec, |m| a.apply_mask(m), |b| a.apply_box(b))?)
        }
        AugmentOp::ResizeTo(size) => {
            ensure!(size >= 1, "resize target must be positive");
            let a = Affine::letterbox(w, h, size);
            (a.apply_image(&rec.image), map_instances(rec, |m| a.apply_mask(m), |b| a.apply_box(b))?)
        }
    };
    Ok(DatasetRecord {
        id: rec.id,
        file_name: rec.file_name.clone(),
        width: image.width,
        height: image.height,
        image,
        instances,
    })
}

pub fn augment(rec: &DatasetRecord, ops: &[AugmentOp]) -> Result<DatasetRecord> {
    let mut cur = rec.clone();
    for &op in ops {
        cur = apply(&cur, op)?;
    }
    Ok(cur)
}
