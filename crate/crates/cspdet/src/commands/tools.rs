//! Diagnostics and data generation: gradient checks, cost tables, synthetic
//! datasets.

use std::fmt::Write as _;
use std::path::Path;

use cspdet_core::flops::{backbone_cost, csp_stage_reductions, model_cost, CostTable};
use cspdet_core::gradcheck::{run_suite, CheckConfig, CheckReport};
use cspdet_core::model::MaskRcnn;

use crate::coco::{to_coco, write_json, Category, CocoFile};
use crate::config::{RunConfig, SyntheticSection};
use crate::error::{CliError, CliResult};
use crate::imageio;

pub fn gradcheck(cfg: &CheckConfig, filter: Option<&str>) -> CliResult<Vec<CheckReport>> {
    let reports = run_suite(cfg, filter).map_err(CliError::from_core)?;
    if reports.is_empty() {
        return Err(CliError::Config(format!("no gradient case matches `{}`", filter.unwrap_or(""))));
    }
    Ok(reports)
}

pub fn gradcheck_table(reports: &[CheckReport]) -> String {
    let mut s = format!("{:<40} {:>7} {:>6} {:>10} {:>8}  {}\n", "case", "coords", "kinks", "max rel", "tol", "result");
    for r in reports {
        let _ = writeln!(
            s,
            "{:<40} {:>7} {:>6} {:>10.2e} {:>8.0e}  {}",
            r.name,
            r.judged().count(),
            r.kinks(),
            r.max_rel(),
            r.tol,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    s
}

/// Cost of the configured model at `hw`, and the same model with the CSP
/// toggle flipped.
pub fn flops(cfg: &RunConfig, hw: (usize, usize), rois: usize, mask_rois: usize) -> CliResult<(CostTable, CostTable)> {
    let table = |use_csp: bool| -> CliResult<CostTable> {
        let mut mc = cfg.model_config()?;
        mc.backbone.use_csp = use_csp;
        let (model, store) = MaskRcnn::build::<f32>(&mc, 0).map_err(CliError::from_core)?;
        Ok(model_cost(&model, &store, hw, rois, mask_rois))
    };
    let own = table(cfg.backbone.use_csp)?;
    let other = table(!cfg.backbone.use_csp)?;
    Ok((own, other))
}

/// Backbone-only comparison of the CSP and plain layouts at the configured
/// width and depth.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneComparison {
    pub csp_macs: u64,
    pub plain_macs: u64,
    pub csp_params: usize,
    pub plain_params: usize,
    /// Fractional MAC reduction of stages 2 through 7.
    pub stage_reductions: Vec<f64>,
}

pub fn backbone_comparison(cfg: &RunConfig, hw: (usize, usize)) -> CliResult<BackboneComparison> {
    let mut bc = cfg.backbone_config()?;
    bc.use_csp = true;
    let (c, csp_params) = backbone_cost(&bc, hw).map_err(CliError::from_core)?;
    bc.use_csp = false;
    let (p, plain_params) = backbone_cost(&bc, hw).map_err(CliError::from_core)?;
    Ok(BackboneComparison {
        csp_macs: c.total(),
        plain_macs: p.total(),
        csp_params,
        plain_params,
        stage_reductions: csp_stage_reductions(&bc, hw).map_err(CliError::from_core)?,
    })
}

pub fn flops_table(t: &CostTable) -> String {
    let mut s = format!("{:<20} {:>16} {:>12}\n", "module", "MACs", "params");
    for r in &t.rows {
        let _ = writeln!(s, "{:<20} {:>16} {:>12}", r.name, r.macs, r.params);
    }
    let _ = writeln!(s, "{:<20} {:>16} {:>12}", "total", t.total_macs(), t.total_params());
    s
}

/// Writes the images under `images/` and `annotations.json` under `out`.
pub fn synth(spec: &SyntheticSection, out: &Path) -> CliResult<CocoFile> {
    let (records, stats) = cspdet_core::data::synthetic::generate_synthetic(&spec.spec(), spec.count).map_err(CliError::from_core)?;
    log::info!("generated {} images: {stats:?}", records.len());
    let img_dir = out.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| CliError::io(&img_dir, e))?;
    for r in &records {
        imageio::save_png(&img_dir.join(&r.file_name), &r.image)?;
    }
    let file = to_coco(&records, &[Category { id: 1, name: "cell".into() }])?;
    write_json(&out.join("annotations.json"), &file)?;
    Ok(file)
}
