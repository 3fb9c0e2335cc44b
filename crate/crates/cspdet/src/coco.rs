//! COCO-format annotation files.

use std::collections::HashMap;
use std::path::Path;

use cspdet_core::boxes::BBox;
use cspdet_core::data::rle::{counts_from_string, counts_to_string, encode};
use cspdet_core::data::{DatasetRecord, InstanceAnnotation, Mask, MaskSource, Rle};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::imageio;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Compressed(String),
    Raw(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle { counts: RleCounts, size: [usize; 2] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]`
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<Segmentation>,
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<Category>,
}

/// Records with contiguous class ids; `categories[k]` is class `k + 1`.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub categories: Vec<Category>,
    pub skipped: usize,
}

pub fn rle_from_counts(counts: &RleCounts, [h, w]: [usize; 2]) -> CliResult<Rle> {
    let counts = match counts {
        RleCounts::Raw(v) => v.clone(),
        RleCounts::Compressed(s) => counts_from_string(s).map_err(CliError::data)?,
    };
    Ok(Rle { height: h, width: w, counts })
}

pub fn mask_to_segmentation(m: &Mask) -> Segmentation {
    let r = encode(m);
    Segmentation::Rle { counts: RleCounts::Compressed(counts_to_string(&r.counts)), size: [r.height, r.width] }
}

fn mask_source(a: &CocoAnnotation) -> CliResult<MaskSource> {
    Ok(match &a.segmentation {
        Some(Segmentation::Polygons(p)) => MaskSource::Polygons(p.clone()),
        Some(Segmentation::Rle { counts, size }) => MaskSource::Rle(rle_from_counts(counts, *size)?),
        None => {
            let [x, y, w, h] = a.bbox;
            MaskSource::Polygons(vec![vec![x, y, x + w, y, x + w, y + h, x, y + h]])
        }
    })
}

pub fn parse_coco(text: &str) -> CliResult<CocoFile> {
    serde_json::from_str(text).map_err(|e| CliError::Data(format!("malformed COCO JSON: {e}")))
}

/// Reads an annotation file and the images it names. Images that cannot be
/// read are skipped with a warning; a malformed file is an error.
pub fn load_coco(json_path: &Path, image_root: &Path) -> CliResult<Dataset> {
    let text = std::fs::read_to_string(json_path).map_err(|e| CliError::io(json_path, e))?;
    let file = parse_coco(&text)?;
    let mut categories = file.categories.clone();
    categories.sort_by_key(|c| c.id);
    let class_of: HashMap<u64, usize> = categories.iter().enumerate().map(|(i, c)| (c.id, i + 1)).collect();
    let mut by_image: HashMap<u64, Vec<&CocoAnnotation>> = HashMap::new();
    for a in &file.annotations {
        by_image.entry(a.image_id).or_default().push(a);
    }
    let mut ds = Dataset { categories, ..Default::default() };
    for im in &file.images {
        let path = image_root.join(&im.file_name);
        let image = match imageio::load_rgb(&path) {
            Ok(i) => i,
            Err(e) => {
                log::warn!("skipping image {}: {e}", im.id);
                ds.skipped += 1;
                continue;
            }
        };
        if image.width != im.width || image.height != im.height {
            log::warn!("skipping image {}: file is {}x{}, annotation says {}x{}", im.id, image.width, image.height, im.width, im.height);
            ds.skipped += 1;
            continue;
        }
        let mut instances = Vec::new();
        for a in by_image.get(&im.id).map(Vec::as_slice).unwrap_or_default() {
            let class_id = *class_of
                .get(&a.category_id)
                .ok_or_else(|| CliError::Data(format!("annotation {} has unknown category {}", a.id, a.category_id)))?;
            let [x, y, w, h] = a.bbox;
            instances.push(InstanceAnnotation { class_id, bbox: BBox::new(x, y, x + w, y + h), mask: mask_source(a)?, iscrowd: a.iscrowd != 0 });
        }
        ds.records.push(DatasetRecord { id: im.id, file_name: im.file_name.clone(), width: im.width, height: im.height, image, instances });
    }
    Ok(ds)
}

/// Annotation document for `records` with RLE masks. Class `k` is written
/// as `categories[k - 1]`.
pub fn to_coco(records: &[DatasetRecord], categories: &[Category]) -> CliResult<CocoFile> {
    let mut file = CocoFile { images: Vec::new(), annotations: Vec::new(), categories: categories.to_vec() };
    for r in records {
        file.images.push(CocoImage { id: r.id, file_name: r.file_name.clone(), width: r.width, height: r.height });
        for inst in &r.instances {
            let cat = categories
                .get(inst.class_id.wrapping_sub(1))
                .ok_or_else(|| CliError::Data(format!("class {} has no category", inst.class_id)))?;
            let m = inst.mask.raster(r.height, r.width).map_err(CliError::data)?;
            let b = inst.bbox;
            file.annotations.push(CocoAnnotation {
                id: file.annotations.len() as u64 + 1,
                image_id: r.id,
                category_id: cat.id,
                bbox: [b.x1, b.y1, b.width(), b.height()],
                area: m.area() as f64,
                segmentation: Some(mask_to_segmentation(&m)),
                iscrowd: inst.iscrowd as u8,
            });
        }
    }
    Ok(file)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
