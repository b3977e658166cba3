use serde::{Deserialize, Serialize};

use super::AnchorConfig;
use crate::error::{Error, Result};
use crate::head::{ClassifierKind, DEFAULT_EPS, DEFAULT_GAMMA};

/// Architecture and sampling hyperparameters of the toy two-stage detector.
///
/// Defaults are the usual Faster R-CNN values scaled down to 64×64 scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Output channels of the three conv+relu+maxpool backbone stages.
    pub backbone_channels: Vec<usize>,
    /// One stride per feature level: `[8]`, or `[8, 16]` for the optional
    /// second level.
    pub anchors: AnchorConfig,
    pub rpn_positive_iou: f64,
    pub rpn_negative_iou: f64,
    pub rpn_batch_per_image: usize,
    pub rpn_positive_fraction: f64,
    pub pre_nms_top_k: usize,
    pub post_nms_top_k: usize,
    pub proposal_nms: f64,
    pub detection_nms: f64,
    pub min_proposal_size: f64,
    /// Proposals must have objectness strictly above this at inference.
    pub objectness_floor: f64,
    pub roi_size: usize,
    pub roi_batch_per_image: usize,
    pub roi_positive_fraction: f64,
    pub roi_foreground_iou: f64,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    /// Foreground classes; the classifier has one extra background row.
    pub num_classes: usize,
    pub classifier: ClassifierKind,
    pub gamma: f64,
    pub eps: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            backbone_channels: vec![16, 32, 32],
            anchors: AnchorConfig::default(),
            rpn_positive_iou: 0.7,
            rpn_negative_iou: 0.3,
            rpn_batch_per_image: 64,
            rpn_positive_fraction: 0.5,
            pre_nms_top_k: 256,
            post_nms_top_k: 64,
            proposal_nms: 0.7,
            detection_nms: 0.5,
            min_proposal_size: 1.0,
            objectness_floor: 0.0,
            roi_size: 4,
            roi_batch_per_image: 32,
            roi_positive_fraction: 0.25,
            roi_foreground_iou: 0.5,
            hidden_dim: 128,
            embedding_dim: 64,
            num_classes: 5,
            classifier: ClassifierKind::Cosine,
            gamma: DEFAULT_GAMMA,
            eps: DEFAULT_EPS,
            score_threshold: 0.05,
            max_detections: 100,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.backbone_channels.len() != 3 || self.backbone_channels.contains(&0) {
            return bad(format!(
                "backbone_channels must list 3 positive widths, got {:?}",
                self.backbone_channels
            ));
        }
        if self.anchors.strides != [8] && self.anchors.strides != [8, 16] {
            return bad(format!(
                "anchor strides must be [8] or [8, 16], got {:?}",
                self.anchors.strides
            ));
        }
        for (name, v) in [
            ("rpn_positive_iou", self.rpn_positive_iou),
            ("rpn_negative_iou", self.rpn_negative_iou),
            ("rpn_positive_fraction", self.rpn_positive_fraction),
            ("proposal_nms", self.proposal_nms),
            ("detection_nms", self.detection_nms),
            ("roi_positive_fraction", self.roi_positive_fraction),
            ("roi_foreground_iou", self.roi_foreground_iou),
            ("score_threshold", self.score_threshold),
            ("objectness_floor", self.objectness_floor),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0,1], got {v}"));
            }
        }
        if self.rpn_positive_iou < self.rpn_negative_iou {
            return bad("rpn_positive_iou must be ≥ rpn_negative_iou".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be ≥ 1".into());
        }
        for (name, v) in [
            ("roi_size", self.roi_size),
            ("hidden_dim", self.hidden_dim),
            ("embedding_dim", self.embedding_dim),
            ("pre_nms_top_k", self.pre_nms_top_k),
            ("post_nms_top_k", self.post_nms_top_k),
            ("rpn_batch_per_image", self.rpn_batch_per_image),
            ("roi_batch_per_image", self.roi_batch_per_image),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.gamma > 0.0) || !(self.eps > 0.0) {
            return bad("gamma and eps must be positive".into());
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.anchors.strides.len()
    }

    /// Images must be at least this large and a multiple of it on each side.
    pub fn size_multiple(&self) -> usize {
        *self.anchors.strides.last().unwrap()
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone_channels[2]
    }
}
