use candle_core::{DType, Tensor};

use super::cache::{extract_and_cache, CacheStats, FeatureCache};
use super::config::Task;
use super::model::SketchModel;
use super::samples::SampleSet;
use crate::aggregator::FusedFeatureMap;
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::grid::l2_normalize;
use crate::heads::recognition::top_k;
use crate::heads::{
    correlation_mask_logits, euclidean_distance, identity_post_process, pool_global, predict_mask,
    transfer_keypoints, MatchMode, SegMask,
};
use crate::metrics::{acc_at_k, map_at_k, miou_pacc, pck_at_k, precision_at_k, top_k_accuracy, MetricReport, RankedRetrieval};

/// Fused maps for every sketch and photo of `data`, in index order.
pub struct ExtractedSet {
    pub sketches: Vec<FusedFeatureMap>,
    pub photos: Vec<FusedFeatureMap>,
    pub stats: CacheStats,
}

pub fn extract_set(
    model: &SketchModel,
    backbone: &dyn Backbone,
    data: &SampleSet,
    need_photos: bool,
    cache: Option<&FeatureCache>,
) -> Result<ExtractedSet> {
    let sk: Vec<_> = (0..data.sketches.len())
        .map(|i| (&data.sketches[i], data.sketch_key(i), data.classes[data.sketches[i].class].as_str()))
        .collect();
    let (sketches, mut stats) = extract_and_cache(model, backbone, &sk, cache)?;
    let photos = if need_photos {
        let ph: Vec<_> = (0..data.photos.len())
            .map(|i| (&data.photos[i], data.photo_key(i), data.classes[data.photos[i].class].as_str()))
            .collect();
        let (maps, s) = extract_and_cache(model, backbone, &ph, cache)?;
        stats.hits += s.hits;
        stats.misses += s.misses;
        maps
    } else {
        Vec::new()
    };
    Ok(ExtractedSet { sketches, photos, stats })
}

fn pooled(maps: &[FusedFeatureMap]) -> Result<Tensor> {
    let rows = maps.iter().map(pool_global).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&rows, 0)?)
}

fn distance_rows(sketches: &[FusedFeatureMap], photos: &[FusedFeatureMap], rows: &[usize]) -> Result<Vec<Vec<f64>>> {
    let picked: Vec<FusedFeatureMap> = rows.iter().map(|&i| sketches[i].clone()).collect();
    let s = l2_normalize(&pooled(&picked)?, 1, "pooled sketch feature")?;
    let p = l2_normalize(&pooled(photos)?, 1, "pooled photo feature")?;
    let mut out = Vec::with_capacity(rows.len());
    for i in 0..rows.len() {
        let q = s.narrow(0, i, 1)?.broadcast_as(p.dims())?.contiguous()?;
        out.push(euclidean_distance(&q, &p)?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
    }
    Ok(out)
}

/// Evaluates `model` on `data` with the metrics of its task.
pub fn evaluate(model: &SketchModel, backbone: &dyn Backbone, data: &SampleSet, cache: Option<&FeatureCache>) -> Result<MetricReport> {
    let (report, _) = evaluate_with_stats(model, backbone, data, cache)?;
    Ok(report)
}

pub fn evaluate_with_stats(
    model: &SketchModel,
    backbone: &dyn Backbone,
    data: &SampleSet,
    cache: Option<&FeatureCache>,
) -> Result<(MetricReport, CacheStats)> {
    data.validate()?;
    let config = model.config();
    if data.image_size != config.image_size {
        return Err(Error::Config(format!(
            "data decoded at {} px but the config expects {}",
            data.image_size, config.image_size
        )));
    }
    let task = config.task;
    let set = extract_set(model, backbone, data, task != Task::Recognition, cache)?;
    let mut report = MetricReport::new();
    match task {
        Task::Recognition => {
            let classifier = model
                .classifier()
                .ok_or_else(|| Error::InvalidArgument("recognition model has no classifier".into()))?;
            let logits = classifier.forward(&pooled(&set.sketches)?)?;
            let preds = top_k(&logits, 5)?;
            let labels: Vec<usize> = data.sketches.iter().map(|s| s.class).collect();
            for k in [1, 5] {
                report.push("acc", Some(k), top_k_accuracy(&preds, &labels, k)?);
            }
        }
        Task::ZsSbir => {
            let rows: Vec<usize> = (0..data.sketches.len()).collect();
            let dist = distance_rows(&set.sketches, &set.photos, &rows)?;
            let rankings = dist
                .into_iter()
                .zip(&data.sketches)
                .map(|(d, s)| RankedRetrieval::from_distances(&d, data.photos.iter().map(|p| p.class == s.class).collect()))
                .collect::<Result<Vec<_>>>()?;
            report.push("map", Some(200), map_at_k(&rankings, 200)?);
            report.push("map_all", None, map_at_k(&rankings, data.photos.len())?);
            for k in [100, 200] {
                report.push("precision", Some(k), precision_at_k(&rankings, k)?);
            }
        }
        Task::FgSbir => {
            let rows: Vec<usize> = (0..data.sketches.len()).filter(|&i| data.pairs[i].is_some()).collect();
            if rows.is_empty() {
                return Err(Error::InvalidArgument("no paired sketches to evaluate".into()));
            }
            let dist = distance_rows(&set.sketches, &set.photos, &rows)?;
            let rankings = dist
                .into_iter()
                .zip(&rows)
                .map(|(d, &i)| {
                    let target = data.pairs[i];
                    RankedRetrieval::from_distances(&d, (0..data.photos.len()).map(|p| Some(p) == target).collect())
                })
                .collect::<Result<Vec<_>>>()?;
            for k in [1, 5, 10] {
                report.push("acc", Some(k), acc_at_k(&rankings, k)?);
            }
        }
        Task::Correspondence => {
            let (mut pred, mut gt) = (Vec::new(), Vec::new());
            for a in &data.annotations {
                let moved = transfer_keypoints(
                    &set.sketches[a.sketch],
                    &set.photos[a.photo],
                    &a.annotation.sketch_points(),
                    data.image_size,
                    MatchMode::Soft(config.flow_temperature),
                )?;
                pred.extend(moved);
                gt.extend(a.annotation.photo_points());
            }
            if gt.is_empty() {
                return Err(Error::InvalidArgument("no annotated keypoints to evaluate".into()));
            }
            for k in [5, 10] {
                report.push("pck", Some(k), pck_at_k(&pred, &gt, k as f64, data.image_size)?);
            }
        }
        Task::Segmentation => {
            let (mut pred, mut gt): (Vec<SegMask>, Vec<SegMask>) = (Vec::new(), Vec::new());
            let size = (data.image_size, data.image_size);
            for (i, s) in data.sketches.iter().enumerate() {
                let fs = pool_global(&set.sketches[i])?;
                for p in data.photos_of(s.class) {
                    let Some(mask) = &data.masks[p] else { continue };
                    let map = correlation_mask_logits(&fs, &set.photos[p], size)?.squeeze(0)?;
                    pred.push(predict_mask(&map, config.seg_threshold, &identity_post_process)?);
                    gt.push(mask.clone());
                }
            }
            let (miou, pacc) = miou_pacc(&pred, &gt)?;
            report.push("miou", None, miou);
            report.push("pacc", None, pacc);
        }
    }
    Ok((report, set.stats))
}
