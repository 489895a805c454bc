use crate::error::{Error, Result};
use crate::heads::Keypoint;

/// Fraction of predictions within `k_percent`% of `image_size` pixels of
/// the ground truth (inclusive).
pub fn pck_at_k(pred: &[Keypoint], gt: &[Keypoint], k_percent: f64, image_size: usize) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Metric(format!("{} predicted keypoints for {} targets", pred.len(), gt.len())));
    }
    if gt.is_empty() {
        return Err(Error::Metric("PCK over zero keypoints".into()));
    }
    let threshold = k_percent / 100.0 * image_size as f64;
    let n = pred.iter().zip(gt).filter(|(p, g)| p.distance(g) <= threshold).count();
    Ok(n as f64 / gt.len() as f64)
}
