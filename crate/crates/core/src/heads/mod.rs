//! Task heads: feature reductions, losses and prediction rules over the
//! fused feature map.

pub mod correspondence;
pub mod pooling;
pub mod recognition;
pub mod retrieval;
pub mod segmentation;

pub use correspondence::{
    epe_loss, flow_at_cells, flow_from_correlation, hard_flow_at_cells, keypoint_cell, patch_contrastive_loss,
    transfer_keypoints, CorrespondenceAnnotation, Keypoint, MatchMode, DEFAULT_CONTRASTIVE_TAU,
    DEFAULT_FLOW_TEMPERATURE,
};
pub use pooling::pool_global;
pub use recognition::{ce_loss, LinearClassifier};
pub use retrieval::{euclidean_distance, triplet_loss, DEFAULT_MARGIN};
pub use segmentation::{
    bce_from_probs, correlation_mask_logits, identity_post_process, predict_mask, seg_train_loss, SegMask,
    DEFAULT_STEEPNESS, DEFAULT_THRESHOLD,
};
