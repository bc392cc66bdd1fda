//! Anchors, training targets, the proposal head and its loss.

mod anchors;
mod boxes;
mod head;
mod loss;
pub mod refine;
mod targets;

pub use anchors::{generate_anchors, generate_pyramid_anchors, AnchorConfig};
pub use boxes::{decode_box, decode_box_clamped, encode_box, iou, Bbox, GtBox, MAX_LOG_DELTA};
pub use head::{
    flatten_predictions, head_backward, head_forward, head_forward_traced, scatter_predictions, FlatPredictions,
    HeadCache, HeadParams, LevelPrediction,
};
pub use loss::{compute_loss, LossBreakdown};
pub use targets::{
    build_targets, ignore_cross_boundary, label_anchors, sample_minibatch, AnchorLabel, AnchorTargets, LabelState,
    Minibatch, TargetConfig,
};
