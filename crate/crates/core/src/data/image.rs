use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Result};

/// 8-bit RGB, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

pub const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const STD: [f32; 3] = [0.229, 0.224, 0.225];

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * 3] }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        ensure!(data.len() == width * height * 3, "RGB buffer of {} bytes for {}x{}", data.len(), width, height);
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, y: usize, x: usize, p: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&p);
    }

    /// CHW planes scaled to [0, 1] and standardized per channel.
    pub fn normalized_chw(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0f32; 3 * hw];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = (px[c] as f32 / 255.0 - MEAN[c]) / STD[c];
            }
        }
        out
    }

    pub fn hflip(&self) -> Self {
        let mut o = Self::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                o.put(y, self.width - 1 - x, self.pixel(y, x));
            }
        }
        o
    }

    pub fn vflip(&self) -> Self {
        let mut o = Self::new(self.width, self.height);
        for y in 0..self.height {
            let row = y * self.width * 3..(y + 1) * self.width * 3;
            let dst = (self.height - 1 - y) * self.width * 3;
            o.data[dst..dst + self.width * 3].copy_from_slice(&self.data[row]);
        }
        o
    }
}
