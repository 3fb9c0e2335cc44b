use std::path::Path;

use cspdet_core::data::RgbImage;
use image::imageops::FilterType;

use crate::error::{CliError, CliResult};

pub fn load_rgb(path: &Path) -> CliResult<RgbImage> {
    let img = image::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?.to_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::from_raw(w as usize, h as usize, img.into_raw()).map_err(CliError::data)
}

fn to_buffer(img: &RgbImage) -> image::RgbImage {
    image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone()).expect("buffer matches dimensions")
}

pub fn save_png(path: &Path, img: &RgbImage) -> CliResult<()> {
    to_buffer(img).save_with_format(path, image::ImageFormat::Png).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Bilinear resize to `size × size`, ignoring aspect ratio.
pub fn resize_square(img: &RgbImage, size: usize) -> RgbImage {
    if img.width == size && img.height == size {
        return img.clone();
    }
    let out = image::imageops::resize(&to_buffer(img), size as u32, size as u32, FilterType::Triangle);
    RgbImage::from_raw(size, size, out.into_raw()).expect("resize keeps the channel count")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(5, 3);
        img.put(1, 4, [200, 10, 77]);
        let p = dir.path().join("x.png");
        save_png(&p, &img).unwrap();
        assert_eq!(load_rgb(&p).unwrap(), img);
    }
}
