use candle_core::{DType, Tensor};

use crate::backbone::ImageBatch;
use crate::error::{Error, Result};
use crate::heads::{CorrespondenceAnnotation, SegMask};

/// One decoded image, `[3, S, S]` with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub class: usize,
    pub image: Tensor,
}

/// A keypoint annotation tied to sample indices.
#[derive(Clone, Debug)]
pub struct AnnotatedPair {
    pub sketch: usize,
    pub photo: usize,
    pub annotation: CorrespondenceAnnotation,
}

/// Decoded images and labels for one split, ready for training or
/// evaluation.
#[derive(Clone, Debug, Default)]
pub struct SampleSet {
    pub image_size: usize,
    pub classes: Vec<String>,
    pub photos: Vec<Sample>,
    pub sketches: Vec<Sample>,
    /// Instance-paired photo of each sketch, if any.
    pub pairs: Vec<Option<usize>>,
    /// Foreground mask of each photo, if any.
    pub masks: Vec<Option<SegMask>>,
    pub annotations: Vec<AnnotatedPair>,
}

impl SampleSet {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.pairs.len() != self.sketches.len() || self.masks.len() != self.photos.len() {
            return bad("pairing or mask table does not match the sample count".into());
        }
        let s = self.image_size;
        for x in self.photos.iter().chain(&self.sketches) {
            if x.image.dims() != [3, s, s] {
                return bad(format!("sample {} has shape {:?}, expected [3, {s}, {s}]", x.id, x.image.dims()));
            }
            if x.class >= self.classes.len() {
                return bad(format!("sample {} has class {} of {}", x.id, x.class, self.classes.len()));
            }
        }
        if self.pairs.iter().flatten().any(|p| *p >= self.photos.len()) {
            return bad("sketch paired with a missing photo".into());
        }
        for m in self.masks.iter().flatten() {
            if (m.height(), m.width()) != (s, s) {
                return bad(format!("mask is {}x{}, expected {s}x{s}", m.height(), m.width()));
            }
        }
        for a in &self.annotations {
            if a.sketch >= self.sketches.len() || a.photo >= self.photos.len() {
                return bad("annotation refers to a missing sample".into());
            }
            a.annotation.validate(s)?;
        }
        Ok(())
    }

    pub fn photo_batch(&self, idx: &[usize], dtype: DType) -> Result<ImageBatch> {
        batch(&self.photos, idx, dtype)
    }

    pub fn sketch_batch(&self, idx: &[usize], dtype: DType) -> Result<ImageBatch> {
        batch(&self.sketches, idx, dtype)
    }

    /// Key under which sketch `i` draws its noise and is cached.
    pub fn sketch_key(&self, i: usize) -> String {
        let s = &self.sketches[i];
        format!("sketch/{}/{}", self.classes[s.class], s.id)
    }

    pub fn photo_key(&self, i: usize) -> String {
        let p = &self.photos[i];
        format!("photo/{}/{}", self.classes[p.class], p.id)
    }

    /// Photos of `class`, in index order.
    pub fn photos_of(&self, class: usize) -> Vec<usize> {
        (0..self.photos.len()).filter(|&i| self.photos[i].class == class).collect()
    }
}

fn batch(samples: &[Sample], idx: &[usize], dtype: DType) -> Result<ImageBatch> {
    let images = idx
        .iter()
        .map(|&i| {
            samples
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("sample index {i} out of range")))
                .and_then(|s| Ok(s.image.to_dtype(dtype)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ImageBatch::stack(&images)
}
