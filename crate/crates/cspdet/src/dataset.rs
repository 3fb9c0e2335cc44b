//! Training and evaluation splits as the run configuration describes them.

use std::path::Path;

use cspdet_core::data::augment::{apply, AugmentOp};
use cspdet_core::data::synthetic::generate_synthetic;
use cspdet_core::data::DatasetRecord;

use crate::coco::{load_coco, Category, Dataset};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Letterboxes to `size × size` (when non-zero and not already that size)
/// and rasterizes every mask once.
pub fn prepare(records: Vec<DatasetRecord>, size: usize) -> CliResult<Vec<DatasetRecord>> {
    records
        .into_iter()
        .map(|r| {
            let mut r = if size > 0 && (r.width != size || r.height != size) { apply(&r, AugmentOp::ResizeTo(size)).map_err(CliError::data)? } else { r };
            r.rasterize().map_err(CliError::data)?;
            Ok(r)
        })
        .collect()
}

pub fn synthetic(cfg: &RunConfig) -> CliResult<Dataset> {
    let s = &cfg.data.synthetic;
    let (records, stats) = generate_synthetic(&s.spec(), s.count).map_err(CliError::from_core)?;
    log::debug!("synthetic data: {stats:?}");
    Ok(Dataset { records: prepare(records, cfg.data.image_size)?, categories: vec![Category { id: 1, name: "cell".into() }], skipped: 0 })
}

fn coco(cfg: &RunConfig, json: &str, images: &str) -> CliResult<Dataset> {
    if json.is_empty() {
        return Err(CliError::Config("data.train_json is required when data.source = \"coco\"".into()));
    }
    let mut ds = load_coco(Path::new(json), Path::new(images))?;
    ds.records = prepare(std::mem::take(&mut ds.records), cfg.data.image_size)?;
    Ok(ds)
}

pub fn train_split(cfg: &RunConfig) -> CliResult<Dataset> {
    match cfg.data.source.as_str() {
        "synthetic" => synthetic(cfg),
        _ => coco(cfg, &cfg.data.train_json, &cfg.data.train_images),
    }
}

/// The validation split when one is configured, otherwise the training split.
pub fn eval_split(cfg: &RunConfig) -> CliResult<Dataset> {
    if cfg.data.source == "coco" && !cfg.data.val_json.is_empty() {
        coco(cfg, &cfg.data.val_json, &cfg.data.val_images)
    } else {
        train_split(cfg)
    }
}
