//! Miniature anchor-based one-stage detector.

mod anchors;
mod decode;
mod losses;
mod network;
mod targets;

pub use anchors::{AnchorSet, LevelAnchors};
pub use decode::{decode_and_nms, detection_order, nms};
pub use losses::{dense_focal, dense_regression, focal_loss, smooth_l1, smooth_l1_elem, smooth_l1_grad, FocalLoss, SMOOTH_L1_BETA};
pub use network::{ForwardCache, NetConfig, Network, OutputGrads, PyramidOutputs, CLS_HEAD_PREFIX};
pub use targets::{assign_targets, decode as decode_box, encode as encode_box, AnchorLabel, AnchorTargets};

use crate::types::Config;

/// Anchors for the configured input size.
pub fn anchors_for(config: &Config) -> AnchorSet {
    AnchorSet::new(config.image_size, config.pyramid_levels, config.anchor_scales, config.anchor_base)
}
