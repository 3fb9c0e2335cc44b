//! Append-only metric log: one JSON object per line, keyed by step.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use cspdet_core::metrics::EvalResult;
use cspdet_core::train::StepRecord;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossLine {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub rpn_cls: f64,
    pub rpn_box: f64,
    pub box_cls: f64,
    pub box_reg: f64,
    pub mask: f64,
}

impl From<&StepRecord> for LossLine {
    fn from(r: &StepRecord) -> Self {
        Self {
            step: r.step,
            lr: r.lr,
            total: r.total,
            rpn_cls: r.rpn_cls,
            rpn_box: r.rpn_box,
            box_cls: r.box_cls,
            box_reg: r.box_reg,
            mask: r.mask,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub box_ap: Option<f64>,
    pub mask_ap: Option<f64>,
    pub mask_ap50: Option<f64>,
    pub miou: Option<f64>,
    pub num_dets: usize,
}

impl From<&EvalResult> for EvalSummary {
    fn from(r: &EvalResult) -> Self {
        Self { box_ap: r.box_ap, mask_ap: r.mask_ap, mask_ap50: r.mask_ap50(), miou: r.miou, num_dets: r.num_dets }
    }
}

/// `step` counts completed optimizer steps at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLine {
    pub step: usize,
    pub eval: EvalSummary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogLine {
    Eval(EvalLine),
    Loss(LossLine),
}

impl LogLine {
    pub fn step(&self) -> usize {
        match self {
            LogLine::Eval(e) => e.step,
            LogLine::Loss(l) => l.step,
        }
    }
}

pub struct MetricLog {
    path: PathBuf,
    file: File,
}

impl MetricLog {
    pub fn open(path: &Path) -> CliResult<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), file })
    }

    pub fn append(&mut self, line: &LogLine) -> CliResult<()> {
        self.append_json(line)
    }

    pub fn append_json<S: Serialize>(&mut self, line: &S) -> CliResult<()> {
        let mut s = serde_json::to_string(line).expect("log line serializes");
        s.push('\n');
        self.file.write_all(s.as_bytes()).and_then(|_| self.file.flush()).map_err(|e| CliError::io(&self.path, e))
    }
}

pub fn read(path: &Path) -> CliResult<Vec<LogLine>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

/// Drops loss lines for steps `>= step` and evaluations after `step`
/// completed steps: what a run interrupted after its checkpoint at `step`
/// may have written beyond it. Used before resuming.
pub fn rewind(path: &Path, step: usize) -> CliResult<()> {
    if !path.exists() {
        return Ok(());
    }
    let keep: Vec<LogLine> = read(path)?
        .into_iter()
        .filter(|l| match l {
            LogLine::Loss(x) => x.step < step,
            LogLine::Eval(x) => x.step <= step,
        })
        .collect();
    let mut text = String::new();
    for l in &keep {
        text.push_str(&serde_json::to_string(l).expect("log line serializes"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
