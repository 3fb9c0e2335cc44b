use std::path::{Path, PathBuf};

use cspdet_core::boxes::BBox;
use cspdet_core::data::augment::Affine;
use cspdet_core::data::{Mask, RgbImage};
use cspdet_core::detector::Detection;
use cspdet_core::model::{image_batch, MaskRcnn};
use cspdet_core::nn::store::ParamStore;
use cspdet_core::{Graph, Mode};
use serde::{Deserialize, Serialize};

use crate::coco::{mask_to_segmentation, Segmentation};
use crate::commands::eval::load_model;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::{imageio, overlay};

pub const DETECTIONS: &str = "detections.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionJson {
    /// `[x1, y1, x2, y2]` in input pixels.
    pub bbox: [f64; 4],
    pub class_id: usize,
    pub score: f64,
    pub segmentation: Segmentation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub detections: Vec<DetectionJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlay: Option<String>,
}

/// Maps a detection made on a letterboxed image back to the original frame.
pub fn unletterbox(d: &Detection, a: &Affine, (h, w): (usize, usize)) -> Detection {
    let b = &d.bbox;
    let inv = |v: f64, pad: f64| (v - pad) / a.scale;
    let bbox = BBox::new(inv(b.x1, a.pad_x), inv(b.y1, a.pad_y), inv(b.x2, a.pad_x), inv(b.y2, a.pad_y)).clip((h, w));
    let mask = Mask::from_fn(h, w, |y, x| {
        let ly = ((y as f64 + 0.5) * a.scale + a.pad_y).floor();
        let lx = ((x as f64 + 0.5) * a.scale + a.pad_x).floor();
        ly >= 0.0 && lx >= 0.0 && (ly as usize) < d.mask.height && (lx as usize) < d.mask.width && d.mask.get(ly as usize, lx as usize)
    });
    Detection { bbox, class_id: d.class_id, score: d.score, mask }
}

pub fn detect(model: &MaskRcnn, store: &ParamStore<f32>, image: &RgbImage, image_size: usize) -> CliResult<Vec<Detection>> {
    let (h, w) = (image.height, image.width);
    let letterbox = (image_size > 0 && (w != image_size || h != image_size)).then(|| Affine::letterbox(w, h, image_size));
    let input = letterbox.map_or_else(|| image.clone(), |a| a.apply_image(image));
    let rec = cspdet_core::data::DatasetRecord {
        id: 0,
        file_name: String::new(),
        width: input.width,
        height: input.height,
        image: input,
        instances: Vec::new(),
    };
    let mut g = Graph::new(store, Mode::Eval);
    let x = g.input(image_batch::<f32>(&[&rec]).map_err(CliError::data)?).map_err(CliError::data)?;
    let dets = model.infer(&mut g, x).map_err(CliError::from_core)?.pop().unwrap_or_default();
    Ok(match letterbox {
        Some(a) => dets.iter().map(|d| unletterbox(d, &a, (h, w))).collect(),
        None => dets,
    })
}

pub fn to_json(file: &str, image: &RgbImage, dets: &[Detection]) -> ImageDetections {
    ImageDetections {
        file: file.to_string(),
        width: image.width,
        height: image.height,
        detections: dets
            .iter()
            .map(|d| DetectionJson { bbox: d.bbox.to_array(), class_id: d.class_id, score: d.score, segmentation: mask_to_segmentation(&d.mask) })
            .collect(),
        overlay: None,
    }
}

/// Runs the checkpoint on each image and writes `detections.json` (and
/// `<stem>.overlay.png` files when asked) into `out`.
pub fn run(cfg: &RunConfig, checkpoint: &Path, images: &[PathBuf], out: &Path, with_overlay: bool) -> CliResult<Vec<ImageDetections>> {
    let (model, store) = load_model(cfg, checkpoint)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut all = Vec::with_capacity(images.len());
    for p in images {
        let img = imageio::load_rgb(p)?;
        let dets = detect(&model, &store, &img, cfg.data.image_size)?;
        let mut j = to_json(&p.display().to_string(), &img, &dets);
        if with_overlay {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let op = out.join(format!("{stem}.overlay.png"));
            imageio::save_png(&op, &overlay::render(&img, &dets))?;
            j.overlay = Some(op.display().to_string());
        }
        all.push(j);
    }
    crate::coco::write_json(&out.join(DETECTIONS), &all)?;
    Ok(all)
}
