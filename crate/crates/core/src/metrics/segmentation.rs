use crate::error::{Error, Result};
use crate::heads::SegMask;

/// Foreground IoU averaged over samples, and pixel accuracy over all
/// pixels. A sample where both masks are empty scores IoU 1.
pub fn miou_pacc(pred: &[SegMask], gt: &[SegMask]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::Metric(format!("{} predicted masks for {} targets", pred.len(), gt.len())));
    }
    if gt.is_empty() {
        return Err(Error::Metric("segmentation metrics over zero masks".into()));
    }
    let mut iou_sum = 0.0;
    let (mut correct, mut pixels) = (0usize, 0usize);
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if (p.height(), p.width()) != (g.height(), g.width()) {
            return Err(Error::Metric(format!(
                "mask {i}: prediction {}x{} vs target {}x{}",
                p.height(),
                p.width(),
                g.height(),
                g.width()
            )));
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in p.data().iter().zip(g.data()) {
            inter += usize::from(*a == 1 && *b == 1);
            union += usize::from(*a == 1 || *b == 1);
            correct += usize::from(a == b);
        }
        pixels += g.data().len();
        iou_sum += if union == 0 {
            log::debug!("mask {i}: prediction and target both empty; IoU taken as 1");
            1.0
        } else {
            inter as f64 / union as f64
        };
    }
    Ok((iou_sum / gt.len() as f64, correct as f64 / pixels as f64))
}
