//! One-shot segmentation from sketch/photo correlation maps.

use candle_core::{DType, Device, Tensor};

use crate::aggregator::FusedFeatureMap;
use crate::error::{Error, Result};
use crate::grid::{l2_normalize, resize_bilinear};

pub const DEFAULT_STEEPNESS: f64 = 50.0;
pub const DEFAULT_THRESHOLD: f64 = 0.47;

const PROB_EPS: f64 = 1e-7;

/// Binary `H × W` mask, row-major, values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl SegMask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape("mask", &[h * w], &[data.len()]));
        }
        if let Some(v) = data.iter().find(|v| **v > 1) {
            return Err(Error::InvalidArgument(format!("mask value {v} is not binary")));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0; h * w] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|v| **v == 1).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| 1 - v).collect(),
        }
    }

    /// `[H, W]` tensor of 0/1 values.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let v: Vec<f32> = self.data.iter().map(|v| *v as f32).collect();
        Ok(Tensor::from_vec(v, (self.h, self.w), device)?.to_dtype(dtype)?)
    }
}

/// Cosine similarity between each pooled sketch vector `[B, d]` and every
/// photo patch, upsampled to `size`: `[B, H, W]`.
pub fn correlation_mask_logits(fs: &Tensor, fp_map: &FusedFeatureMap, size: (usize, usize)) -> Result<Tensor> {
    let (b, d) = fs.dims2()?;
    if fp_map.batch() != b || fp_map.dim() != d {
        return Err(Error::shape("correlation mask", &[b, d], &[fp_map.batch(), fp_map.dim()]));
    }
    let s = l2_normalize(fs, 1, "pooled sketch feature")?;
    let p = l2_normalize(fp_map.tensor(), 1, "photo patch")?;
    let c = p.broadcast_mul(&s.reshape((b, d, 1, 1))?)?.sum_keepdim(1)?;
    Ok(resize_bilinear(&c, size.0, size.1)?.squeeze(1)?)
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_from_probs(yhat: &Tensor, y: &Tensor) -> Result<Tensor> {
    if yhat.dims() != y.dims() {
        return Err(Error::shape("bce target", yhat.dims(), y.dims()));
    }
    let p = yhat.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let pos = (y * p.log()?)?;
    let neg = (y.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// BCE of `sigmoid(k · (c − τ))` against the masks.
pub fn seg_train_loss(logit_map: &Tensor, masks: &[SegMask], steepness: f64, threshold: f64) -> Result<Tensor> {
    let (b, h, w) = logit_map.dims3()?;
    if masks.len() != b {
        return Err(Error::shape("segmentation masks", &[b], &[masks.len()]));
    }
    let mut ys = Vec::with_capacity(b);
    for m in masks {
        if (m.h, m.w) != (h, w) {
            return Err(Error::shape("segmentation mask", &[h, w], &[m.h, m.w]));
        }
        ys.push(m.to_tensor(logit_map.dtype(), logit_map.device())?);
    }
    let y = Tensor::stack(&ys, 0)?;
    let yhat = candle_nn::ops::sigmoid(&logit_map.affine(steepness, -steepness * threshold)?)?;
    bce_from_probs(&yhat, &y)
}

/// Default post-processing: none.
pub fn identity_post_process(m: SegMask) -> SegMask {
    m
}

/// Thresholds an `[H, W]` map at `c ≥ threshold`, then applies `post`.
pub fn predict_mask(map: &Tensor, threshold: f64, post: &dyn Fn(SegMask) -> SegMask) -> Result<SegMask> {
    let (h, w) = map.dims2()?;
    let v = map.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let data = v.into_iter().map(|c| u8::from(c >= threshold)).collect();
    Ok(post(SegMask { h, w, data }))
}
