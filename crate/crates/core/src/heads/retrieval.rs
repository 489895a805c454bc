//! Triplet ranking loss for sketch-photo retrieval.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::grid::{all_finite, l2_normalize};

pub const DEFAULT_MARGIN: f64 = 0.3;

/// Row-wise Euclidean distance `[B]` between `[B, d]` inputs.
///
/// The squared distance is floored at 1e-24 before the square root so the
/// gradient stays finite for coincident points.
pub fn euclidean_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.sum(1)?.maximum(1e-24)?.sqrt()?)
}

/// `mean_b max{0, μ + δ(s, p) − δ(s, n)}` on L2-normalized `[B, d]` features.
/// At the hinge point the zero-gradient side is taken.
pub fn triplet_loss(fs: &Tensor, fp: &Tensor, fneg: &Tensor, margin: f64) -> Result<Tensor> {
    if margin < 0.0 {
        return Err(Error::InvalidArgument(format!("negative triplet margin {margin}")));
    }
    for t in [fs, fp, fneg] {
        if !all_finite(t)? {
            return Err(Error::NonFinite("triplet loss input".into()));
        }
    }
    let s = l2_normalize(fs, 1, "triplet anchor")?;
    let p = l2_normalize(fp, 1, "triplet positive")?;
    let n = l2_normalize(fneg, 1, "triplet negative")?;
    let x = (euclidean_distance(&s, &p)? - euclidean_distance(&s, &n)?)?.affine(1.0, margin)?;
    let active = x.gt(0.0)?.to_dtype(x.dtype())?.detach();
    Ok((x * active)?.mean_all()?)
}
