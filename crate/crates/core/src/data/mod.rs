//! Dataset records, mask codecs, augmentation and the synthetic cell generator.
//! Reading and writing files (COCO JSON, images) lives in the std crate.

pub mod augment;
pub mod image;
pub mod mask;
pub mod polygon;
pub mod rle;
pub mod synthetic;

use alloc::string::String;
use alloc::vec::Vec;

pub use image::RgbImage;
pub use mask::Mask;
pub use rle::Rle;

use crate::boxes::BBox;
use crate::error::Result;

/// Where an instance mask comes from; decoded on demand.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskSource {
    Raster(Mask),
    Polygons(Vec<Vec<f64>>),
    Rle(Rle),
}

impl MaskSource {
    pub fn raster(&self, height: usize, width: usize) -> Result<Mask> {
        match self {
            MaskSource::Raster(m) => Ok(m.clone()),
            MaskSource::Polygons(p) => Ok(polygon::rasterize(p, height, width)),
            MaskSource::Rle(r) => {
                crate::error::ensure!(
                    r.height == height && r.width == width,
                    "run-length mask is {}x{}, image is {}x{}",
                    r.width,
                    r.height,
                    width,
                    height
                );
                rle::decode(r)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceAnnotation {
    /// Contiguous class index, 1-based (0 is background).
    pub class_id: usize,
    pub bbox: BBox,
    pub mask: MaskSource,
    pub iscrowd: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub image: RgbImage,
    pub instances: Vec<InstanceAnnotation>,
}

impl DatasetRecord {
    /// Materializes every instance mask as a raster.
    pub fn rasterize(&mut self) -> Result<()> {
        for inst in &mut self.instances {
            if !matches!(inst.mask, MaskSource::Raster(_)) {
                inst.mask = MaskSource::Raster(inst.mask.raster(self.height, self.width)?);
            }
        }
        Ok(())
    }

    pub fn masks(&self) -> Result<Vec<Mask>> {
        self.instances.iter().map(|i| i.mask.raster(self.height, self.width)).collect()
    }
}
