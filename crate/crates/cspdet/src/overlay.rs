//! Detections drawn over the input image: translucent mask fills and box
//! outlines, colored by instance index.

use cspdet_core::data::RgbImage;
use cspdet_core::detector::Detection;

const PALETTE: [[u8; 3]; 8] =
    [[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230]];

pub fn color(index: usize) -> [u8; 3] {
    PALETTE[index % PALETTE.len()]
}

fn blend(a: u8, b: u8) -> u8 {
    ((a as u16 + b as u16) / 2) as u8
}

pub fn render(image: &RgbImage, dets: &[Detection]) -> RgbImage {
    let mut out = image.clone();
    for (k, d) in dets.iter().enumerate() {
        let c = color(k);
        if d.mask.height == out.height && d.mask.width == out.width {
            for y in 0..out.height {
                for x in 0..out.width {
                    if d.mask.get(y, x) {
                        let p = out.pixel(y, x);
                        out.put(y, x, [blend(p[0], c[0]), blend(p[1], c[1]), blend(p[2], c[2])]);
                    }
                }
            }
        }
        let b = d.bbox.clip((out.height, out.width));
        if !(b.width() > 0.0 && b.height() > 0.0) {
            continue;
        }
        let (x1, y1) = (b.x1 as usize, b.y1 as usize);
        let x2 = (b.x2.ceil() as usize).clamp(x1 + 1, out.width) - 1;
        let y2 = (b.y2.ceil() as usize).clamp(y1 + 1, out.height) - 1;
        for x in x1..=x2 {
            out.put(y1, x, c);
            out.put(y2, x, c);
        }
        for y in y1..=y2 {
            out.put(y, x1, c);
            out.put(y, x2, c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use cspdet_core::boxes::BBox;
    use cspdet_core::data::Mask;

    #[test]
    fn no_detections_leave_the_image_alone() {
        let mut img = RgbImage::new(6, 4);
        img.put(2, 3, [9, 8, 7]);
        assert_eq!(render(&img, &[]), img);
    }

    #[test]
    fn box_outline_and_fill() {
        let img = RgbImage::new(10, 10);
        let mask = Mask::from_fn(10, 10, |y, x| (3..6).contains(&y) && (3..6).contains(&x));
        let d = Detection { bbox: BBox::new(2.0, 2.0, 7.0, 7.0), class_id: 1, score: 0.9, mask };
        let out = render(&img, &[d]);
        assert_eq!(out.pixel(2, 2), color(0));
        assert_eq!(out.pixel(6, 6), color(0));
        assert_eq!(out.pixel(4, 4), [115, 12, 37]);
        assert_eq!(out.pixel(0, 0), [0, 0, 0]);
    }
}
