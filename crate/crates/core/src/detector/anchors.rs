use alloc::vec::Vec;

use crate::boxes::BBox;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    pub level: usize,
    pub cell: (usize, usize),
    pub aspect_index: usize,
    pub scale_index: usize,
}

/// One feature level: pyramid level, grid height, grid width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelShape {
    pub level: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorConfig {
    pub base_size: f64,
    /// Height / width.
    pub ratios: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            base_size: 32.0,
            ratios: alloc::vec![0.5, 1.0, 2.0],
            scales: alloc::vec![1.0, libm::exp2(1.0 / 3.0), libm::exp2(2.0 / 3.0)],
        }
    }
}

impl AnchorConfig {
    pub fn per_cell(&self) -> usize {
        self.ratios.len() * self.scales.len()
    }

    /// Anchors for a single-level head: the three octaves per level of the
    /// pyramid configuration (levels 3..7) are all attached to `level`.
    pub fn single_level(&self, level: usize) -> Self {
        let mut scales = Vec::new();
        for l in 3..=7i32 {
            for &s in &self.scales {
                scales.push(s * libm::exp2((l - level as i32) as f64));
            }
        }
        Self { base_size: self.base_size, ratios: self.ratios.clone(), scales }
    }
}

/// Anchors ordered level → row → column → ratio → scale. Level `L` has stride
/// `2^L`, base size `base · 2^(L−3)`, and cell centers at `(col + 0.5) · stride`.
pub fn generate_anchors(levels: &[LevelShape], cfg: &AnchorConfig) -> Vec<Anchor> {
    let total: usize = levels.iter().map(|l| l.h * l.w * cfg.per_cell()).sum();
    let mut out = Vec::with_capacity(total);
    for l in levels {
        let stride = libm::exp2(l.level as f64);
        let base = cfg.base_size * libm::exp2(l.level as f64 - 3.0);
        for row in 0..l.h {
            for col in 0..l.w {
                let (cx, cy) = ((col as f64 + 0.5) * stride, (row as f64 + 0.5) * stride);
                for (ri, &r) in cfg.ratios.iter().enumerate() {
                    for (si, &s) in cfg.scales.iter().enumerate() {
                        let size = base * s;
                        let w = size / libm::sqrt(r);
                        let h = size * libm::sqrt(r);
                        out.push(Anchor {
                            bbox: BBox::from_center(cx, cy, w, h),
                            level: l.level,
                            cell: (row, col),
                            aspect_index: ri,
                            scale_index: si,
                        });
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_square_anchor() {
        let cfg = AnchorConfig { base_size: 32.0, ratios: alloc::vec![0.5, 1.0, 2.0], scales: alloc::vec![1.0] };
        let a = generate_anchors(&[LevelShape { level: 3, h: 4, w: 4 }], &cfg);
        assert_eq!(a.len(), 48);
        let sq = a[1].bbox;
        assert!((sq.width() - 32.0).abs() < 1e-12 && (sq.height() - 32.0).abs() < 1e-12);
        // ratio 2 is twice as tall as wide with the same area
        let tall = a[2].bbox;
        assert!((tall.height() / tall.width() - 2.0).abs() < 1e-12);
        assert!((tall.area() - 1024.0).abs() < 1e-9);
    }
}
