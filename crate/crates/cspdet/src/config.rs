//! Run configuration: one TOML file with a section per subsystem, dotted
//! `--set` overrides on top, and a fully resolved dump written into every
//! run directory.

use std::path::{Path, PathBuf};

use cspdet_core::backbone::{BackboneConfig, Variant};
use cspdet_core::data::synthetic::SyntheticCellSpec;
use cspdet_core::detector::{AnchorConfig, HeadConfig, MaskLossKind};
use cspdet_core::model::ModelConfig;
use cspdet_core::neck::{NeckKind, Topology};
use cspdet_core::train::{LossWeights, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    /// b0 … b7
    pub variant: String,
    pub use_sam: bool,
    pub use_csp: bool,
    pub se_ratio: f64,
    /// Fraction of channels that bypass the block stack in a CSP stage.
    pub csp_split: f64,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let b = BackboneConfig::b0();
        Self { variant: "b0".into(), use_sam: b.use_sam, use_csp: b.use_csp, se_ratio: b.se_ratio, csp_split: b.csp_split }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeckSection {
    /// c4 | fpn | nasfpn
    pub kind: String,
    /// Merging-cell wiring file; empty selects the bundled one.
    pub topology: String,
    pub channels: usize,
}

impl Default for NeckSection {
    fn default() -> Self {
        Self { kind: "nasfpn".into(), topology: String::new(), channels: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorSection {
    pub base_size: f64,
    pub ratios: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Default for AnchorSection {
    fn default() -> Self {
        let a = AnchorConfig::default();
        Self { base_size: a.base_size, ratios: a.ratios, scales: a.scales }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadsSection {
    pub num_classes: usize,
    /// bce | dice
    pub mask_loss: String,
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub max_det: usize,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_nms_thresh: f64,
    pub rpn_pre_nms_topk_train: usize,
    pub rpn_post_nms_topk_train: usize,
    pub rpn_pre_nms_topk_test: usize,
    pub rpn_post_nms_topk_test: usize,
    pub roi_batch: usize,
    pub roi_pos_fraction: f64,
    pub roi_pos_iou: f64,
    pub roi_neg_iou: f64,
    pub box_fc: usize,
    pub mask_channels: usize,
    pub roi_sampling: usize,
    pub box_pool: usize,
    pub mask_pool: usize,
    pub anchors: AnchorSection,
}

impl Default for HeadsSection {
    fn default() -> Self {
        let h = HeadConfig::default();
        Self {
            num_classes: h.num_classes,
            mask_loss: h.mask_loss.name().into(),
            score_thresh: h.score_thresh,
            nms_thresh: h.nms_thresh,
            max_det: h.max_det,
            rpn_batch: h.rpn_batch,
            rpn_pos_fraction: h.rpn_pos_fraction,
            rpn_pos_iou: h.rpn_pos_iou,
            rpn_neg_iou: h.rpn_neg_iou,
            rpn_nms_thresh: h.rpn_nms_thresh,
            rpn_pre_nms_topk_train: h.rpn_pre_nms_topk_train,
            rpn_post_nms_topk_train: h.rpn_post_nms_topk_train,
            rpn_pre_nms_topk_test: h.rpn_pre_nms_topk_test,
            rpn_post_nms_topk_test: h.rpn_post_nms_topk_test,
            roi_batch: h.roi_batch,
            roi_pos_fraction: h.roi_pos_fraction,
            roi_pos_iou: h.roi_pos_iou,
            roi_neg_iou: h.roi_neg_iou,
            box_fc: h.box_fc,
            mask_channels: h.mask_channels,
            roi_sampling: h.roi_sampling,
            box_pool: h.box_pool,
            mask_pool: h.mask_pool,
            anchors: AnchorSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeightSection {
    pub rpn_cls: f64,
    pub rpn_box: f64,
    pub box_cls: f64,
    pub box_reg: f64,
    pub mask: f64,
}

impl Default for LossWeightSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self { rpn_cls: w.rpn_cls, rpn_box: w.rpn_box, box_cls: w.box_cls, box_reg: w.box_reg, mask: w.mask }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub warmup_factor: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub hflip: bool,
    /// Write a loss line every this many steps.
    pub log_every: usize,
    /// Evaluate on the evaluation set every this many steps (0: only at the end).
    pub eval_every: usize,
    pub checkpoint_every: usize,
    /// Stop at an evaluation that reaches both thresholds below.
    pub early_stop: bool,
    pub stop_miou: f64,
    pub stop_mask_ap50: f64,
    pub loss_weights: LossWeightSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            warmup_steps: t.warmup_steps,
            warmup_factor: t.warmup_factor,
            milestones: t.milestones,
            gamma: t.gamma,
            batch_size: t.batch_size,
            max_steps: t.max_steps,
            seed: t.seed,
            hflip: t.hflip,
            log_every: 1,
            eval_every: 200,
            checkpoint_every: 200,
            early_stop: false,
            stop_miou: 0.7,
            stop_mask_ap50: 0.6,
            loss_weights: LossWeightSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub cells: [usize; 2],
    pub nucleus_radius: [f64; 2],
    pub cytoplasm_radius: [f64; 2],
    pub cytoplasm_contrast: [f64; 2],
    pub overlap_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let s = SyntheticCellSpec::default();
        Self {
            count: 8,
            height: s.height,
            width: s.width,
            cells: [s.cells.0, s.cells.1],
            nucleus_radius: [s.nucleus_radius.0, s.nucleus_radius.1],
            cytoplasm_radius: [s.cytoplasm_radius.0, s.cytoplasm_radius.1],
            cytoplasm_contrast: [s.cytoplasm_contrast.0, s.cytoplasm_contrast.1],
            overlap_prob: s.overlap_prob,
            seed: s.seed,
        }
    }
}

impl SyntheticSection {
    pub fn spec(&self) -> SyntheticCellSpec {
        SyntheticCellSpec {
            height: self.height,
            width: self.width,
            cells: (self.cells[0], self.cells[1]),
            nucleus_radius: (self.nucleus_radius[0], self.nucleus_radius[1]),
            cytoplasm_radius: (self.cytoplasm_radius[0], self.cytoplasm_radius[1]),
            cytoplasm_contrast: (self.cytoplasm_contrast[0], self.cytoplasm_contrast[1]),
            overlap_prob: self.overlap_prob,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// synthetic | coco
    pub source: String,
    pub train_json: String,
    pub train_images: String,
    /// Evaluation split; empty means evaluate on the training split.
    pub val_json: String,
    pub val_images: String,
    /// Letterbox every image into a square of this side (0 keeps native size).
    pub image_size: usize,
    pub synthetic: SyntheticSection,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: "synthetic".into(),
            train_json: String::new(),
            train_images: String::new(),
            val_json: String::new(),
            val_images: String::new(),
            image_size: 256,
            synthetic: SyntheticSection::default(),
        }
    }
}

/// Image-folder classification harness for backbone ablations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifySection {
    /// One sub-directory per class, sorted by name.
    pub train_dir: String,
    pub val_dir: String,
    pub num_classes: usize,
    /// Images are resized to this square side.
    pub image_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ClassifySection {
    fn default() -> Self {
        Self {
            train_dir: String::new(),
            val_dir: String::new(),
            num_classes: 10,
            image_size: 64,
            epochs: 5,
            batch_size: 32,
            lr: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "runs/default".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneSection,
    pub neck: NeckSection,
    pub heads: HeadsSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub classify: ClassifySection,
    pub output: OutputSection,
}

fn section<T: DeserializeOwned + Default>(root: &mut Table, name: &str) -> CliResult<T> {
    match root.remove(name) {
        None => Ok(T::default()),
        Some(Value::Table(t)) => t.try_into().map_err(|e: toml::de::Error| CliError::Config(format!("[{name}] {}", e.message()))),
        Some(_) => Err(CliError::Config(format!("`{name}` must be a table"))),
    }
}

/// The literal after `=` in an override, read as a TOML value when it
/// parses as one and as a bare string otherwise.
fn override_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("just inserted"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a document.
pub fn apply_override(root: &mut Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` has an empty component")));
    }
    let mut t = root;
    for (i, p) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = match entry {
            Value::Table(inner) => inner,
            _ => return Err(CliError::Config(format!("override `{key}`: `{}` is not a table", parts[..=i].join(".")))),
        };
    }
    t.insert(parts[parts.len() - 1].to_string(), override_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_table(mut root: Table) -> CliResult<Self> {
        let cfg = Self {
            backbone: section(&mut root, "backbone")?,
            neck: section(&mut root, "neck")?,
            heads: section(&mut root, "heads")?,
            train: section(&mut root, "train")?,
            data: section(&mut root, "data")?,
            classify: section(&mut root, "classify")?,
            output: section(&mut root, "output")?,
        };
        if let Some(k) = root.keys().next() {
            return Err(CliError::Config(format!("unknown section `{k}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, overrides: &[String]) -> CliResult<Self> {
        let mut root: Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        Self::from_table(root)
    }

    /// Reads `path` (or starts from defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    /// Every key with its effective value.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn validate(&self) -> CliResult<()> {
        self.variant()?;
        self.neck_kind()?;
        self.mask_loss()?;
        if !matches!(self.data.source.as_str(), "synthetic" | "coco") {
            return Err(CliError::Config(format!("data.source: expected synthetic or coco, got `{}`", self.data.source)));
        }
        self.train_config()?.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        if self.train.log_every == 0 || self.train.checkpoint_every == 0 {
            return Err(CliError::Config("train.log_every and train.checkpoint_every must be positive".into()));
        }
        if self.heads.num_classes == 0 {
            return Err(CliError::Config("heads.num_classes must be at least 1".into()));
        }
        Ok(())
    }

    fn variant(&self) -> CliResult<Variant> {
        Variant::parse(&self.backbone.variant)
            .ok_or_else(|| CliError::Config(format!("backbone.variant: expected b0..b7, got `{}`", self.backbone.variant)))
    }

    fn neck_kind(&self) -> CliResult<NeckKind> {
        NeckKind::parse(&self.neck.kind)
            .ok_or_else(|| CliError::Config(format!("neck.kind: expected c4, fpn or nasfpn, got `{}`", self.neck.kind)))
    }

    fn mask_loss(&self) -> CliResult<MaskLossKind> {
        MaskLossKind::parse(&self.heads.mask_loss)
            .ok_or_else(|| CliError::Config(format!("heads.mask_loss: expected bce or dice, got `{}`", self.heads.mask_loss)))
    }

    pub fn backbone_config(&self) -> CliResult<BackboneConfig> {
        let b = &self.backbone;
        let mut c = BackboneConfig::new(self.variant()?, b.use_sam, b.use_csp);
        c.se_ratio = b.se_ratio;
        c.csp_split = b.csp_split;
        Ok(c)
    }

    pub fn model_config(&self) -> CliResult<ModelConfig> {
        let h = &self.heads;
        let topology = if self.neck.topology.is_empty() {
            None
        } else {
            let p = PathBuf::from(&self.neck.topology);
            let text = std::fs::read_to_string(&p).map_err(|e| CliError::Config(format!("neck.topology {}: {e}", p.display())))?;
            Some(Topology::parse(&text).map_err(|e| CliError::Config(format!("neck.topology: {e}")))?)
        };
        Ok(ModelConfig {
            backbone: self.backbone_config()?,
            neck: self.neck_kind()?,
            topology,
            pyramid_channels: self.neck.channels,
            heads: HeadConfig {
                num_classes: h.num_classes,
                mask_loss: self.mask_loss()?,
                score_thresh: h.score_thresh,
                nms_thresh: h.nms_thresh,
                max_det: h.max_det,
                anchors: AnchorConfig { base_size: h.anchors.base_size, ratios: h.anchors.ratios.clone(), scales: h.anchors.scales.clone() },
                rpn_batch: h.rpn_batch,
                rpn_pos_fraction: h.rpn_pos_fraction,
                rpn_pos_iou: h.rpn_pos_iou,
                rpn_neg_iou: h.rpn_neg_iou,
                rpn_nms_thresh: h.rpn_nms_thresh,
                rpn_pre_nms_topk_train: h.rpn_pre_nms_topk_train,
                rpn_post_nms_topk_train: h.rpn_post_nms_topk_train,
                rpn_pre_nms_topk_test: h.rpn_pre_nms_topk_test,
                rpn_post_nms_topk_test: h.rpn_post_nms_topk_test,
                roi_batch: h.roi_batch,
                roi_pos_fraction: h.roi_pos_fraction,
                roi_pos_iou: h.roi_pos_iou,
                roi_neg_iou: h.roi_neg_iou,
                box_fc: h.box_fc,
                mask_channels: h.mask_channels,
                roi_sampling: h.roi_sampling,
                box_pool: h.box_pool,
                mask_pool: h.mask_pool,
            },
        })
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let t = &self.train;
        let w = &t.loss_weights;
        Ok(TrainConfig {
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            warmup_steps: t.warmup_steps,
            warmup_factor: t.warmup_factor,
            milestones: t.milestones.clone(),
            gamma: t.gamma,
            batch_size: t.batch_size,
            max_steps: t.max_steps,
            seed: t.seed,
            loss_weights: LossWeights { rpn_cls: w.rpn_cls, rpn_box: w.rpn_box, box_cls: w.box_cls, box_reg: w.box_reg, mask: w.mask },
            hflip: t.hflip,
        })
    }
}
