//! Two-stage heads: region proposals over anchors, then box classification /
//! regression and per-class masks on RoIAlign features.

pub mod anchors;
pub mod assign;
pub mod postprocess;
pub mod roi_heads;
pub mod rpn;

use alloc::vec::Vec;

pub use anchors::{generate_anchors, Anchor, AnchorConfig, LevelShape};
pub use assign::{assign_targets, Assignment, Label};
pub use postprocess::{paste_mask, select_detections, Candidate, Detection};
pub use roi_heads::{dice_coefficient, BoxHead, MaskHead};
pub use rpn::RpnHead;

use crate::boxes::BBox;
use crate::data::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskLossKind {
    Bce,
    Dice,
}

impl MaskLossKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bce" => Some(Self::Bce),
            "dice" => Some(Self::Dice),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Bce => "bce",
            Self::Dice => "dice",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    /// Foreground classes (background is extra).
    pub num_classes: usize,
    pub mask_loss: MaskLossKind,
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub max_det: usize,
    pub anchors: AnchorConfig,
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
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_classes: 1,
            mask_loss: MaskLossKind::Dice,
            score_thresh: 0.05,
            nms_thresh: 0.5,
            max_det: 100,
            anchors: AnchorConfig::default(),
            rpn_batch: 256,
            rpn_pos_fraction: 0.5,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_nms_thresh: 0.7,
            rpn_pre_nms_topk_train: 2000,
            rpn_post_nms_topk_train: 1000,
            rpn_pre_nms_topk_test: 1000,
            rpn_post_nms_topk_test: 1000,
            roi_batch: 128,
            roi_pos_fraction: 0.25,
            roi_pos_iou: 0.5,
            roi_neg_iou: 0.5,
            box_fc: 1024,
            mask_channels: 256,
            roi_sampling: 2,
            box_pool: 7,
            mask_pool: 14,
        }
    }
}

/// Side length of predicted masks.
pub const MASK_SIZE: usize = 28;

/// Ground truth for one image, crowd instances removed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageTargets {
    pub boxes: Vec<BBox>,
    /// 1-based class ids.
    pub classes: Vec<usize>,
    pub masks: Vec<Mask>,
}

/// Pyramid level for a RoI of the given box: `floor(4 + log2(sqrt(wh) / 224))`
/// clamped to `[lo, hi]`.
pub fn roi_level(b: &BBox, lo: usize, hi: usize) -> usize {
    let s = libm::sqrt(b.area().max(1e-12));
    let k = libm::floor(4.0 + libm::log2(s / 224.0 + 1e-8));
    (k.max(lo as f64).min(hi as f64)) as usize
}
