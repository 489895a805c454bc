//! Linear classifier and softmax cross-entropy for sketch recognition.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub struct LinearClassifier {
    weight: Tensor,
    bias: Tensor,
    classes: usize,
}

impl LinearClassifier {
    pub fn new(params: &mut ParamStore, dim: usize, classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidArgument("classifier needs at least one class".into()));
        }
        let weight = params.normal("head.cls.weight", &[classes, dim], 1.0 / (dim as f64).sqrt())?;
        let bias = params.zeros("head.cls.bias", &[classes])?;
        Ok(Self { weight, bias, classes })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `[B, d] → [B, C]` logits.
    pub fn forward(&self, pooled: &Tensor) -> Result<Tensor> {
        Ok(pooled.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Batch-mean `−log softmax(logits)[label]`.
pub fn ce_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::shape("labels", &[b], &[labels.len()]));
    }
    if let Some(bad) = labels.iter().find(|l| **l >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{c}")));
    }
    let logp = candle_nn::ops::log_softmax(logits, 1)?;
    let idx: Vec<u32> = labels.iter().map(|l| *l as u32).collect();
    let idx = Tensor::new(idx.as_slice(), logits.device())?.unsqueeze(1)?;
    let picked = logp.gather(&idx, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Indices of the `k` largest logits per row, highest first, ties by index.
pub fn top_k(logits: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let rows = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows
        .into_iter()
        .map(|r| {
            let mut idx: Vec<usize> = (0..r.len()).collect();
            idx.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        })
        .collect())
}
