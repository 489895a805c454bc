use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device};
use sketchfeat::analysis::{analyze_feature, format_frequency_report, FrequencyRow, DEFAULT_RADIUS_FRACTION};
use sketchfeat::backbone::{Backbone, ImageBatch, PromptTokens};
use sketchfeat::pipeline::{
    build_backbone, evaluate_with_stats, extract_set, load_checkpoint, load_dataset, restore_model, toy_problem, FeatureCache,
};
use sketchfeat::{MetricReport, SampleSet, SketchModel, TaskConfig};

use crate::RunArgs;

const DTYPE: DType = DType::F32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Unet(usize),
    Fused,
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fused" => Ok(Level::Fused),
            _ => match s.parse::<usize>() {
                Ok(n @ 1..=4) => Ok(Level::Unet(n)),
                _ => Err(format!("expected 1, 2, 3, 4 or fused, got {s:?}")),
            },
        }
    }
}

/// Resolved config plus the samples to run on.
fn setup(run: &RunArgs, base: Option<TaskConfig>, split: Option<&str>) -> Result<(TaskConfig, SampleSet)> {
    let dev = Device::Cpu;
    let from_file = match &run.config {
        Some(p) => Some(TaskConfig::load(p).with_context(|| format!("reading config {}", p.display()))?),
        None => None,
    };
    if run.toy {
        let task = run.task.or(from_file.as_ref().map(|c| c.task)).or(base.as_ref().map(|c| c.task)).unwrap_or_default();
        let (toy_config, data) = toy_problem(task, &dev)?;
        let config = run.apply(from_file.or(base).unwrap_or(toy_config))?;
        return Ok((config, data));
    }
    let Some(root) = &run.data else {
        bail!("pass --data <dir> or --toy");
    };
    let config = run.apply(from_file.or(base).unwrap_or_default())?;
    let split = split.unwrap_or(&run.split);
    let index = load_dataset(root, split, config.task)?;
    let data = index.materialize(config.image_size, &dev)?;
    log::info!(
        "{}/{split}: {} classes, {} photos, {} sketches",
        root.display(),
        data.classes.len(),
        data.photos.len(),
        data.sketches.len()
    );
    Ok((config, data))
}

fn model_for(config: &TaskConfig, backbone: &dyn Backbone, data: &SampleSet, checkpoint: Option<&Path>) -> Result<SketchModel> {
    let dev = Device::Cpu;
    match checkpoint {
        Some(p) => {
            let ckpt = load_checkpoint(p, &dev).with_context(|| format!("loading checkpoint {}", p.display()))?;
            Ok(restore_model(&ckpt, config, backbone, DTYPE, &dev)?)
        }
        None => Ok(SketchModel::new(config, backbone, data.classes.len(), DTYPE, &dev)?),
    }
}

fn checkpoint_config(path: &Path) -> Result<TaskConfig> {
    let ckpt = load_checkpoint(path, &Device::Cpu).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ckpt.config)
}

pub fn extract(run: &RunArgs, cache_dir: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let base = checkpoint.map(checkpoint_config).transpose()?;
    let (config, data) = setup(run, base, None)?;
    let bb = build_backbone(&config, DTYPE, &Device::Cpu)?;
    let model = model_for(&config, bb.as_ref(), &data, checkpoint)?;
    let cache = FeatureCache::new(cache_dir)?;
    let set = extract_set(&model, bb.as_ref(), &data, true, Some(&cache))?;
    println!(
        "extracted {} sketches and {} photos into {}: {} cached, {} computed, {} backbone calls",
        set.sketches.len(),
        set.photos.len(),
        cache_dir.display(),
        set.stats.hits,
        set.stats.misses,
        bb.call_count()
    );
    Ok(())
}

pub fn train(run: &RunArgs, out: &Path) -> Result<()> {
    let (config, data) = setup(run, None, None)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    config.save(&out.join("config.toml"))?;
    let bb = build_backbone(&config, DTYPE, &Device::Cpu)?;
    let model = SketchModel::new(&config, bb.as_ref(), data.classes.len(), DTYPE, &Device::Cpu)?;
    let report = sketchfeat::pipeline::train(&model, bb.as_ref(), &data, Some(out))?;
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    println!("trained {} for {} steps, final loss {last:.6}", config.task, report.steps);
    if let Some(alpha) = report.alphas.last() {
        println!("branch weights {alpha:?}");
    }
    if let Some(p) = &report.checkpoint {
        println!("checkpoint {}", p.display());
    }
    if let Some(p) = &report.log_path {
        println!("log {}", p.display());
    }
    Ok(())
}

pub fn eval(run: &RunArgs, checkpoint: &Path, cache: Option<&Path>, report_path: Option<&Path>) -> Result<()> {
    let base = checkpoint_config(checkpoint)?;
    let (config, data) = setup(run, Some(base), None)?;
    let bb = build_backbone(&config, DTYPE, &Device::Cpu)?;
    let model = model_for(&config, bb.as_ref(), &data, Some(checkpoint))?;
    let cache = cache.map(FeatureCache::new).transpose()?;
    let (report, stats) = evaluate_with_stats(&model, bb.as_ref(), &data, cache.as_ref())?;
    log::info!("feature cache: {} hits, {} misses", stats.hits, stats.misses);
    print!("{report}");
    if let Some(p) = report_path {
        report.write(p)?;
    }
    Ok(())
}

pub fn analyze(run: &RunArgs, out: &Path, level: Level, limit: usize, checkpoint: Option<&Path>) -> Result<()> {
    let base = checkpoint.map(checkpoint_config).transpose()?;
    let (config, data) = setup(run, base, None)?;
    let bb = build_backbone(&config, DTYPE, &Device::Cpu)?;
    let model = model_for(&config, bb.as_ref(), &data, checkpoint)?;
    let mut items = Vec::new();
    for i in 0..data.sketches.len().min(limit) {
        items.push((data.sketch_key(i), &data.sketches[i]));
    }
    for i in 0..data.photos.len().min(limit) {
        items.push((data.photo_key(i), &data.photos[i]));
    }
    if items.is_empty() {
        bail!("no samples to analyze");
    }
    let mut rows: Vec<FrequencyRow> = Vec::new();
    let mut summary = String::new();
    for (key, sample) in items {
        let images = ImageBatch::stack(&[sample.image.clone()])?;
        let class = data.classes[sample.class].as_str();
        let inputs = model.prepare(bb.as_ref(), &images, std::slice::from_ref(&key), &[class])?;
        let prompt = inputs.prompts.first().cloned().unwrap_or_else(PromptTokens::null);
        let plain = bb.extract_unet_features(&inputs.z_t, config.timestep, &prompt, None)?;
        let mut hook = model.adapters().hook(&inputs.f_v);
        let injected = bb.extract_unet_features(&inputs.z_t, config.timestep, &prompt, Some(&mut *hook))?;
        let stem = key.replace('/', "_");
        let _ = write!(summary, "{key}:");
        for (variant, taps) in [("plain", &plain), ("injected", &injected)] {
            let map = match level {
                Level::Unet(n) => taps.level(n)?.to_hwc_array(0)?,
                Level::Fused => model.aggregator().forward(taps)?.grid().to_hwc_array(0)?,
            };
            let (r, _) = analyze_feature(&format!("{stem}_{variant}"), &map, out)?;
            if let Some(d) = r.iter().find(|r| r.rho == DEFAULT_RADIUS_FRACTION) {
                let _ = write!(summary, " {variant} LF {:.4}", d.split.ratio);
            }
            rows.extend(r);
        }
        summary.push('\n');
    }
    let report = out.join("frequency.tsv");
    std::fs::write(&report, format_frequency_report(&rows)).with_context(|| format!("writing {}", report.display()))?;
    print!("{summary}");
    println!("images and {} in {}", report.file_name().unwrap_or_default().to_string_lossy(), out.display());
    Ok(())
}

/// Toggle name and the config it produces.
fn variants(base: &TaskConfig) -> Vec<(&'static str, TaskConfig)> {
    let full = TaskConfig {
        no_aggregation_net: false,
        frozen_equal_weights: false,
        no_1d_convs: false,
        ..base.clone()
    };
    vec![
        ("full", full.clone()),
        (
            "no_aggregation_net",
            TaskConfig {
                no_aggregation_net: true,
                ..full.clone()
            },
        ),
        (
            "frozen_equal_weights",
            TaskConfig {
                frozen_equal_weights: true,
                ..full.clone()
            },
        ),
        (
            "no_1d_convs",
            TaskConfig {
                no_1d_convs: true,
                no_injection: false,
                ..full
            },
        ),
    ]
}

pub fn ablate(run: &RunArgs, out: &Path, eval_split: Option<&str>) -> Result<()> {
    let (base, train_data) = setup(run, None, None)?;
    let eval_data = match eval_split {
        Some(s) if !run.toy => setup(run, None, Some(s))?.1,
        _ => train_data.clone(),
    };
    let bb = build_backbone(&base, DTYPE, &Device::Cpu)?;
    let mut table = String::new();
    let mut header_done = false;
    for (name, config) in variants(&base) {
        let dir = out.join(name);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let model = SketchModel::new(&config, bb.as_ref(), train_data.classes.len(), DTYPE, &Device::Cpu)?;
        let scalars = model.params().num_scalars();
        sketchfeat::pipeline::train(&model, bb.as_ref(), &train_data, Some(&dir)).with_context(|| format!("training {name}"))?;
        let report: MetricReport = sketchfeat::pipeline::evaluate(&model, bb.as_ref(), &eval_data, None)?;
        report.write(&dir.join("metrics.tsv"))?;
        if !header_done {
            table.push_str("variant\ttrainable");
            for (m, k, _) in report.entries() {
                match k {
                    Some(k) => write!(table, "\t{m}@{k}")?,
                    None => write!(table, "\t{m}")?,
                }
            }
            table.push('\n');
            header_done = true;
        }
        write!(table, "{name}\t{scalars}")?;
        for (_, _, v) in report.entries() {
            write!(table, "\t{v:.4}")?;
        }
        table.push('\n');
    }
    let path = out.join("ablation.tsv");
    std::fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
    print!("{table}");
    Ok(())
}
