//! Evaluation metrics for retrieval, recognition, keypoint transfer and
//! segmentation, plus the flat text report they are written to.

pub mod keypoint;
pub mod report;
pub mod retrieval;
pub mod segmentation;

pub use keypoint::pck_at_k;
pub use report::MetricReport;
pub use retrieval::{acc_at_k, map_at_k, precision_at_k, top_k_accuracy, RankedRetrieval};
pub use segmentation::miou_pacc;
