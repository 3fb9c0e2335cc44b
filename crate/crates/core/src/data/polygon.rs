//! Polygon rasterization: a pixel is foreground when its center lies inside
//! the polygon under the even-odd rule. Several polygons are unioned.

use alloc::vec::Vec;

use super::mask::Mask;

/// `polygons` are flat `[x0, y0, x1, y1, ...]` lists in pixel coordinates.
pub fn rasterize(polygons: &[Vec<f64>], height: usize, width: usize) -> Mask {
    let mut m = Mask::new(height, width);
    for poly in polygons {
        if poly.len() < 6 {
            continue;
        }
        let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        fill_even_odd(&pts, &mut m);
    }
    m
}

fn fill_even_odd(pts: &[(f64, f64)], m: &mut Mask) {
    let n = pts.len();
    let mut xs: Vec<f64> = Vec::new();
    for y in 0..m.height {
        let cy = y as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let (x0, y0) = pts[i];
            let (x1, y1) = pts[(i + 1) % n];
            // Half-open in y so shared vertices are counted once.
            if (y0 <= cy) != (y1 <= cy) {
                xs.push(x0 + (cy - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // Pixel centers strictly inside [a, b).
            let lo = libm::ceil(pair[0] - 0.5).max(0.0);
            let hi = libm::ceil(pair[1] - 0.5).min(m.width as f64);
            let mut x = lo;
            while x < hi {
                let v = m.get(y, x as usize);
                m.set(y, x as usize, !v);
                x += 1.0;
            }
        }
    }
}
