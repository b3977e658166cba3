//! Two-stage detector: anchors, RPN target assignment, proposals with NMS,
//! ROI-align, box-delta regression, and the freeze policy.

mod anchors;
mod assign;
mod boxes;
mod config;
mod freeze;
mod model;

pub use anchors::{generate_anchors, AnchorConfig};
pub use assign::{assign_rpn_targets, AnchorLabel, RpnTargets};
pub use boxes::{decode_deltas, encode_deltas, iou, nms, score_order, BBox, DELTA_CLAMP};
pub use config::DetectorConfig;
pub use freeze::{apply_freeze_policy, FreezePolicy};
pub use model::{Detection, Detector, GroundTruth, LossBreakdown, Proposal, COMPONENTS};
