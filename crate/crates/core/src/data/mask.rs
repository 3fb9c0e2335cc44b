use alloc::vec;
use alloc::vec::Vec;

use crate::boxes::BBox;

/// Binary raster, row-major, one byte per pixel (0 or 1).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(y, x) as u8;
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Tight box around the foreground: `x2`/`y2` are one past the last pixel.
    pub fn bbox(&self) -> Option<BBox> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        (x2 > 0).then(|| BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64))
    }

    pub fn intersection(&self, o: &Mask) -> usize {
        self.data.iter().zip(&o.data).filter(|(&a, &b)| a != 0 && b != 0).count()
    }

    pub fn union(&self, o: &Mask) -> usize {
        self.data.iter().zip(&o.data).filter(|(&a, &b)| a != 0 || b != 0).count()
    }

    /// Pixel IoU; `None` when both masks are empty.
    pub fn iou(&self, o: &Mask) -> Option<f64> {
        let u = self.union(o);
        (u > 0).then(|| self.intersection(o) as f64 / u as f64)
    }

    pub fn hflip(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    pub fn vflip(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(self.height - 1 - y, x))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn union_with(&mut self, o: &Mask) {
        self.data.iter_mut().zip(&o.data).for_each(|(a, &b)| *a |= b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_is_tight() {
        let m = Mask::from_fn(6, 8, |y, x| (2..4).contains(&y) && (1..6).contains(&x));
        assert_eq!(m.bbox(), Some(BBox::new(1.0, 2.0, 6.0, 4.0)));
        assert_eq!(m.area(), 10);
        assert_eq!(Mask::new(3, 3).bbox(), None);
        assert_eq!(Mask::new(3, 3).iou(&Mask::new(3, 3)), None);
    }
}
