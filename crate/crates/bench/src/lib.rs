//! Seeded inputs shared by the benchmarks.

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketchfeat::metrics::RankedRetrieval;
use sketchfeat::ImageBatch;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform noise image batch in `[0, 1]`.
pub fn image_batch(batch: usize, size: usize, seed: u64) -> ImageBatch {
    let mut r = rng(seed);
    let v: Vec<f32> = (0..batch * 3 * size * size).map(|_| r.random()).collect();
    let t = Tensor::from_vec(v, (batch, 3, size, size), &Device::Cpu).expect("image tensor");
    ImageBatch::new(t.to_dtype(DType::F32).expect("f32")).expect("valid batch")
}

pub fn feature_map(h: usize, w: usize, c: usize, seed: u64) -> Array3<f64> {
    let mut r = rng(seed);
    Array3::from_shape_fn((h, w, c), |_| r.random_range(-1.0..1.0))
}

/// `queries` rankings over a gallery of `gallery` items, a tenth relevant.
pub fn rankings(queries: usize, gallery: usize, seed: u64) -> Vec<RankedRetrieval> {
    let mut r = rng(seed);
    (0..queries)
        .map(|_| {
            let d: Vec<f64> = (0..gallery).map(|_| r.random()).collect();
            let rel = (0..gallery).map(|_| r.random_bool(0.1)).collect();
            RankedRetrieval::from_distances(&d, rel).expect("finite distances")
        })
        .collect()
}
