use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::save_checkpoint;
use super::config::Task;
use super::model::{FrozenInputs, SketchModel};
use super::samples::SampleSet;
use crate::aggregator::FusedFeatureMap;
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::grid::scalar_f64;
use crate::heads::correspondence::flow_targets;
use crate::heads::{
    ce_loss, correlation_mask_logits, epe_loss, flow_at_cells, patch_contrastive_loss, pool_global, seg_train_loss,
    triplet_loss, SegMask,
};

pub const LOG_FILE: &str = "train_log.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    /// Effective branch weights after each step.
    pub alphas: Vec<Vec<f64>>,
    pub checkpoint: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Kind {
    Sketch,
    Photo,
}

/// Frozen inputs are computed once per sample and reused every step.
struct Memo<'a> {
    model: &'a SketchModel,
    backbone: &'a dyn Backbone,
    data: &'a SampleSet,
    inputs: HashMap<(Kind, usize), FrozenInputs>,
}

impl<'a> Memo<'a> {
    fn batch(&mut self, kind: Kind, idx: &[usize]) -> Result<FrozenInputs> {
        let missing: Vec<usize> = {
            let mut m: Vec<usize> = idx.iter().copied().filter(|i| !self.inputs.contains_key(&(kind, *i))).collect();
            m.sort_unstable();
            m.dedup();
            m
        };
        if !missing.is_empty() {
            let (images, keys, classes) = match kind {
                Kind::Sketch => (
                    self.data.sketch_batch(&missing, self.model.dtype())?,
                    missing.iter().map(|&i| self.data.sketch_key(i)).collect::<Vec<_>>(),
                    missing.iter().map(|&i| self.data.classes[self.data.sketches[i].class].as_str()).collect::<Vec<_>>(),
                ),
                Kind::Photo => (
                    self.data.photo_batch(&missing, self.model.dtype())?,
                    missing.iter().map(|&i| self.data.photo_key(i)).collect(),
                    missing.iter().map(|&i| self.data.classes[self.data.photos[i].class].as_str()).collect(),
                ),
            };
            let prepared = self.model.prepare(self.backbone, &images, &keys, &classes)?;
            for (j, &i) in missing.iter().enumerate() {
                let single = FrozenInputs {
                    z_t: crate::backbone::LatentBatch::new(prepared.z_t.tensor().narrow(0, j, 1)?)?,
                    f_v: crate::backbone::PatchFeatureGrid::new(prepared.f_v.grid().sample(j)?)?,
                    prompts: vec![prepared.prompts[j].clone()],
                };
                self.inputs.insert((kind, i), single);
            }
        }
        let items: Vec<&FrozenInputs> = idx.iter().map(|i| &self.inputs[&(kind, *i)]).collect();
        FrozenInputs::concat(&items)
    }

    fn forward(&mut self, kind: Kind, idx: &[usize]) -> Result<FusedFeatureMap> {
        let inputs = self.batch(kind, idx)?;
        self.model.forward(self.backbone, &inputs)
    }
}

/// Training units per task: sketch indices, or annotation indices for
/// correspondence.
fn training_units(task: Task, data: &SampleSet) -> Result<Vec<usize>> {
    let units: Vec<usize> = match task {
        Task::Recognition | Task::ZsSbir => (0..data.sketches.len()).collect(),
        Task::FgSbir => (0..data.sketches.len()).filter(|&i| data.pairs[i].is_some()).collect(),
        Task::Correspondence => (0..data.annotations.len()).collect(),
        Task::Segmentation => (0..data.sketches.len())
            .filter(|&i| !masked_photos(data, data.sketches[i].class).is_empty())
            .collect(),
    };
    if units.is_empty() {
        return Err(Error::InvalidArgument(format!("no training samples usable for {task}")));
    }
    if task == Task::ZsSbir && data.classes.len() < 2 {
        return Err(Error::InvalidArgument("category-level triplets need at least two classes".into()));
    }
    Ok(units)
}

fn masked_photos(data: &SampleSet, class: usize) -> Vec<usize> {
    data.photos_of(class).into_iter().filter(|&p| data.masks[p].is_some()).collect()
}

fn pick<R: Rng>(rng: &mut R, pool: &[usize]) -> Option<usize> {
    pool.choose(rng).copied()
}

/// Positive and negative photos for a sketch anchor.
fn triplet_photos<R: Rng>(task: Task, data: &SampleSet, sketch: usize, rng: &mut R) -> Result<(usize, usize)> {
    let class = data.sketches[sketch].class;
    let same = data.photos_of(class);
    let pos = match (task, data.pairs[sketch]) {
        (_, Some(p)) => p,
        (Task::FgSbir, None) => return Err(Error::InvalidArgument("fine-grained sketch without a paired photo".into())),
        _ => pick(rng, &same).ok_or_else(|| Error::InvalidArgument(format!("class {class} has no photos")))?,
    };
    let neg = if task == Task::FgSbir {
        let hard: Vec<usize> = same.iter().copied().filter(|&p| p != pos).collect();
        match pick(rng, &hard) {
            Some(n) => n,
            None => {
                log::debug!("class {class} has a single photo; negative drawn from other classes");
                let other: Vec<usize> = (0..data.photos.len()).filter(|&p| p != pos).collect();
                pick(rng, &other).ok_or_else(|| Error::InvalidArgument("need at least two photos".into()))?
            }
        }
    } else {
        let other: Vec<usize> = (0..data.photos.len()).filter(|&p| data.photos[p].class != class).collect();
        pick(rng, &other).ok_or_else(|| Error::InvalidArgument("no photos outside the anchor class".into()))?
    };
    Ok((pos, neg))
}

fn step_loss<R: Rng>(memo: &mut Memo<'_>, units: &[usize], rng: &mut R) -> Result<Tensor> {
    let model = memo.model;
    let config = model.config();
    let data = memo.data;
    let size = data.image_size;
    match config.task {
        Task::Recognition => {
            let fs = memo.forward(Kind::Sketch, units)?;
            let classifier = model
                .classifier()
                .ok_or_else(|| Error::InvalidArgument("recognition model has no classifier".into()))?;
            let labels: Vec<usize> = units.iter().map(|&i| data.sketches[i].class).collect();
            ce_loss(&classifier.forward(&pool_global(&fs)?)?, &labels)
        }
        Task::ZsSbir | Task::FgSbir => {
            let mut photos = Vec::with_capacity(2 * units.len());
            let mut negs = Vec::with_capacity(units.len());
            for &s in units {
                let (p, n) = triplet_photos(config.task, data, s, rng)?;
                photos.push(p);
                negs.push(n);
            }
            photos.extend(negs);
            let b = units.len();
            let fs = pool_global(&memo.forward(Kind::Sketch, units)?)?;
            let fp = pool_global(&memo.forward(Kind::Photo, &photos)?)?;
            triplet_loss(&fs, &fp.narrow(0, 0, b)?, &fp.narrow(0, b, b)?, config.margin)
        }
        Task::Correspondence => {
            let anns: Vec<_> = units.iter().map(|&u| &data.annotations[u]).collect();
            let sk: Vec<usize> = anns.iter().map(|a| a.sketch).collect();
            let ph: Vec<usize> = anns.iter().map(|a| a.photo).collect();
            let fs = memo.forward(Kind::Sketch, &sk)?;
            let fp = memo.forward(Kind::Photo, &ph)?;
            let tau = model.tau()?;
            let mut total: Option<Tensor> = None;
            for (i, a) in anns.iter().enumerate() {
                let (s, p) = (fs.sample(i)?, fp.sample(i)?);
                let cl = patch_contrastive_loss(&s, &p, &a.annotation, size, &tau)?;
                let (cells, gt) = flow_targets(&a.annotation, size, model.dtype(), model.device())?;
                let est = flow_at_cells(&s, &p, &cells, config.flow_temperature)?;
                let l = (cl + epe_loss(&est, &gt, config.epe_squared)?)?;
                total = Some(match total {
                    None => l,
                    Some(t) => (t + l)?,
                });
            }
            Ok((total.expect("non-empty batch") / anns.len() as f64)?)
        }
        Task::Segmentation => {
            let mut photos = Vec::with_capacity(units.len());
            for &s in units {
                let class = data.sketches[s].class;
                let p = match data.pairs[s] {
                    Some(p) if data.masks[p].is_some() => p,
                    _ => pick(rng, &masked_photos(data, class)).expect("units have masked photos"),
                };
                photos.push(p);
            }
            let masks: Vec<SegMask> = photos.iter().map(|&p| data.masks[p].clone().expect("masked")).collect();
            let fs = pool_global(&memo.forward(Kind::Sketch, units)?)?;
            let fp = memo.forward(Kind::Photo, &photos)?;
            let logits = correlation_mask_logits(&fs, &fp, (size, size))?;
            seg_train_loss(&logits, &masks, config.seg_steepness, config.seg_threshold)
        }
    }
}

/// Runs the optimizer over `data`. Only parameters in the model's store
/// are updated; the backbone is read-only. With `out_dir`, a per-step log
/// and an end-of-epoch checkpoint are written there.
pub fn train(model: &SketchModel, backbone: &dyn Backbone, data: &SampleSet, out_dir: Option<&Path>) -> Result<TrainReport> {
    let config = model.config().clone();
    data.validate()?;
    if data.image_size != config.image_size {
        return Err(Error::Config(format!(
            "data decoded at {} px but the config expects {}",
            data.image_size, config.image_size
        )));
    }
    let units = training_units(config.task, data)?;
    let batches_per_epoch = units.len().div_ceil(config.batch_size);
    let total = config.max_steps.unwrap_or(config.epochs * batches_per_epoch);
    let vars = model.params().vars();
    let mut opt = if vars.is_empty() {
        None
    } else {
        Some(
            AdamW::new(
                vars,
                ParamsAdamW {
                    lr: config.learning_rate,
                    weight_decay: 0.0,
                    ..ParamsAdamW::default()
                },
            )
            .map_err(Error::from)?,
        )
    };
    let mut log_text = String::from("step\tepoch\tloss\talpha_1\talpha_2\talpha_3\n");
    let log_path = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            Some(d.join(LOG_FILE))
        }
        None => None,
    };
    let mut report = TrainReport {
        log_path: log_path.clone(),
        ..TrainReport::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7a11));
    let mut memo = Memo {
        model,
        backbone,
        data,
        inputs: HashMap::new(),
    };
    let mut epoch = 0;
    while report.steps < total {
        let mut order = units.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if report.steps >= total {
                break;
            }
            let loss = step_loss(&mut memo, chunk, &mut rng)?;
            let value = scalar_f64(&loss)?;
            if !value.is_finite() {
                let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(std::env::temp_dir);
                let snapshot = dir.join(format!("nonfinite-step{}.safetensors", report.steps));
                save_checkpoint(&snapshot, model)?;
                return Err(Error::NonFiniteLoss {
                    step: report.steps,
                    snapshot,
                });
            }
            if let Some(opt) = opt.as_mut() {
                opt.backward_step(&loss)?;
            }
            let alpha = model.aggregator().alpha_values()?;
            log::debug!("step {} loss {value:.6} alpha {alpha:?}", report.steps);
            let _ = writeln!(
                log_text,
                "{}\t{epoch}\t{value:.6}\t{:.6}\t{:.6}\t{:.6}",
                report.steps, alpha[0], alpha[1], alpha[2]
            );
            report.losses.push(value);
            report.alphas.push(alpha);
            report.steps += 1;
        }
        if let Some(d) = out_dir {
            let path = d.join(CHECKPOINT_FILE);
            save_checkpoint(&path, model)?;
            report.checkpoint = Some(path);
            if let Some(p) = &log_path {
                std::fs::write(p, &log_text).map_err(|e| Error::io(p, e))?;
            }
        }
        epoch += 1;
    }
    log::info!(
        "trained {} steps over {epoch} epochs; final loss {:.6}",
        report.steps,
        report.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(report)
}
