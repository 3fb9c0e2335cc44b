use std::path::PathBuf;
use std::time::Instant;

use cspdet_core::checkpoint::Checkpoint;
use cspdet_core::metrics::EvalResult;
use cspdet_core::model::{describe, MaskRcnn};
use cspdet_core::train::{evaluate_model, StepRecord, Trainer};

use crate::ckpt;
use crate::config::RunConfig;
use crate::dataset;
use crate::error::{CliError, CliResult};
use crate::metrics_log::{self, EvalLine, LogLine, MetricLog};
use crate::report::EvalReport;

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const METRICS: &str = "metrics.jsonl";
pub const REPORT: &str = "report.json";

#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    /// Completed optimizer steps, including those before a resume.
    pub steps: usize,
    pub resumed_from: Option<usize>,
    pub last_eval: Option<EvalResult>,
    pub stopped_early: bool,
    /// Records of the steps run by this invocation.
    pub records: Vec<StepRecord>,
}

fn reached(cfg: &RunConfig, e: &EvalResult) -> bool {
    e.miou.is_some_and(|m| m >= cfg.train.stop_miou) && e.mask_ap50().is_some_and(|a| a >= cfg.train.stop_mask_ap50)
}

pub fn run(cfg: &RunConfig, resume: bool) -> CliResult<TrainOutcome> {
    let dir = PathBuf::from(&cfg.output.dir);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let resolved = dir.join(RESOLVED_CONFIG);
    std::fs::write(&resolved, cfg.resolved()).map_err(|e| CliError::io(&resolved, e))?;

    let data = dataset::train_split(cfg)?;
    if data.records.is_empty() {
        return Err(CliError::Data("training set is empty".into()));
    }
    let eval_data = if cfg.data.source == "coco" && !cfg.data.val_json.is_empty() { Some(dataset::eval_split(cfg)?) } else { None };
    let eval_records = eval_data.as_ref().map_or(&data.records, |d| &d.records);

    let model_cfg = cfg.model_config()?;
    let tc = cfg.train_config()?;
    let (model, store) = MaskRcnn::build::<f32>(&model_cfg, tc.seed).map_err(CliError::from_core)?;
    let fingerprint = MaskRcnn::fingerprint(&store);
    let mut trainer = Trainer::new(&model, store, tc).map_err(CliError::from_core)?;

    let log_path = dir.join(METRICS);
    let mut resumed_from = None;
    match (resume, ckpt::latest(&dir)?) {
        (true, Some((step, path))) => {
            let c = ckpt::load(&path)?;
            let sgd = c.restore(&mut trainer.store, &fingerprint).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if let Some(s) = sgd {
                trainer.sgd = s;
            }
            trainer.step = step as usize;
            resumed_from = Some(step as usize);
            metrics_log::rewind(&log_path, step as usize)?;
            log::info!("resumed from {} at step {step}", path.display());
        }
        _ => {
            if log_path.exists() {
                std::fs::remove_file(&log_path).map_err(|e| CliError::io(&log_path, e))?;
            }
        }
    }
    let mut log = MetricLog::open(&log_path)?;
    log::info!("training {} for {} steps on {} images", describe(&model_cfg), cfg.train.max_steps, data.records.len());

    let t = &cfg.train;
    let mut records = Vec::new();
    let mut last_eval = None;
    let mut stopped_early = false;
    let started = Instant::now();
    while trainer.step < t.max_steps {
        let rec = trainer.step(&data.records).map_err(CliError::from_core)?;
        if rec.step % t.log_every == 0 {
            log.append(&LogLine::Loss((&rec).into()))?;
        }
        records.push(rec);
        let done = trainer.step;
        let at_end = done == t.max_steps;
        if (t.eval_every > 0 && done % t.eval_every == 0) || at_end {
            let e = evaluate_model(&model, &trainer.store, eval_records).map_err(CliError::from_core)?;
            log.append(&LogLine::Eval(EvalLine { step: done, eval: (&e).into() }))?;
            log::info!("step {done}: mIoU {:?} maskAP50 {:?} ({:.0}s)", e.miou, e.mask_ap50(), started.elapsed().as_secs_f64());
            stopped_early = t.early_stop && !at_end && reached(cfg, &e);
            last_eval = Some(e);
        }
        if done % t.checkpoint_every == 0 || at_end || stopped_early {
            let c = Checkpoint::capture(&trainer.store, Some(&trainer.sgd), done as u64, fingerprint);
            ckpt::save(&dir.join(ckpt::file_name(done as u64)), &c)?;
        }
        if stopped_early {
            break;
        }
    }
    if let Some(e) = &last_eval {
        let names: Vec<String> = data.categories.iter().map(|c| c.name.clone()).collect();
        let report = EvalReport::new(&describe(&model_cfg), e, &names);
        let p = dir.join(REPORT);
        std::fs::write(&p, report.to_json()).map_err(|e| CliError::io(&p, e))?;
    }
    Ok(TrainOutcome { run_dir: dir, steps: trainer.step, resumed_from, last_eval, stopped_early, records })
}
