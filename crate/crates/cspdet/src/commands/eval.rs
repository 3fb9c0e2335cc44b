use std::path::Path;

use cspdet_core::data::DatasetRecord;
use cspdet_core::detector::Detection;
use cspdet_core::metrics::{evaluate, EvalResult};
use cspdet_core::model::{describe, MaskRcnn};
use cspdet_core::nn::store::ParamStore;
use cspdet_core::train::{evaluate_model, gt_instances};

use crate::ckpt;
use crate::config::RunConfig;
use crate::dataset;
use crate::error::{CliError, CliResult};
use crate::report::EvalReport;

/// Builds the configured model and loads `path` into it; an architecture
/// mismatch is a config error.
pub fn load_model(cfg: &RunConfig, path: &Path) -> CliResult<(MaskRcnn, ParamStore<f32>)> {
    let (model, mut store) = MaskRcnn::build::<f32>(&cfg.model_config()?, 0).map_err(CliError::from_core)?;
    let fp = MaskRcnn::fingerprint(&store);
    let c = ckpt::load(path)?;
    c.restore(&mut store, &fp).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok((model, store))
}

/// Every non-crowd ground-truth instance as a detection with score 1.
pub fn oracle_detections(rec: &DatasetRecord) -> CliResult<Vec<Detection>> {
    Ok(gt_instances(rec)
        .map_err(CliError::data)?
        .into_iter()
        .filter(|g| !g.iscrowd)
        .map(|g| Detection { bbox: g.bbox, class_id: g.class_id, score: 1.0, mask: g.mask })
        .collect())
}

pub fn evaluate_oracle(records: &[DatasetRecord], num_classes: usize) -> CliResult<EvalResult> {
    let mut dets = Vec::with_capacity(records.len());
    let mut gts = Vec::with_capacity(records.len());
    for r in records {
        dets.push(oracle_detections(r)?);
        gts.push(gt_instances(r).map_err(CliError::data)?);
    }
    Ok(evaluate(&dets, &gts, num_classes))
}

/// Evaluates a checkpoint (or the ground truth itself with `oracle`) on the
/// evaluation split. Returns the report even when metrics are undefined;
/// the caller decides the exit code.
pub fn run(cfg: &RunConfig, checkpoint: Option<&Path>, oracle: bool) -> CliResult<EvalReport> {
    let data = dataset::eval_split(cfg)?;
    let names: Vec<String> = data.categories.iter().map(|c| c.name.clone()).collect();
    let model_cfg = cfg.model_config()?;
    let (label, result) = if oracle {
        ("ground-truth oracle".to_string(), evaluate_oracle(&data.records, model_cfg.heads.num_classes)?)
    } else {
        let path = checkpoint.ok_or_else(|| CliError::Config("eval needs --checkpoint (or --oracle)".into()))?;
        let (model, store) = load_model(cfg, path)?;
        (describe(&model_cfg), evaluate_model(&model, &store, &data.records).map_err(CliError::from_core)?)
    };
    Ok(EvalReport::new(&label, &result, &names))
}
