//! Small synthetic sample sets for smoke runs and overfit checks.

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{BackboneKind, Task, TaskConfig};
use super::samples::{AnnotatedPair, Sample, SampleSet};
use crate::error::Result;
use crate::heads::{CorrespondenceAnnotation, Keypoint, SegMask};

/// Planar RGB image from a per-pixel color function.
fn render(size: usize, f: impl Fn(usize, usize) -> [f32; 3], device: &Device) -> Result<Tensor> {
    let mut v = vec![0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let c = f(y, x);
            for ch in 0..3 {
                v[ch * size * size + y * size + x] = c[ch].clamp(0.0, 1.0);
            }
        }
    }
    Ok(Tensor::from_vec(v, (3, size, size), device)?)
}

/// Smooth random field as a sum of a few plane waves, in `[0, 1]`.
struct Waves(Vec<(f32, f32, f32, [f32; 3])>);

impl Waves {
    fn random(rng: &mut ChaCha8Rng, count: usize, max_freq: f32) -> Self {
        Self(
            (0..count)
                .map(|_| {
                    let a = rng.random_range(0.0..std::f32::consts::TAU);
                    let f = rng.random_range(1.0..max_freq);
                    let phase = rng.random_range(0.0..std::f32::consts::TAU);
                    let color = [rng.random(), rng.random(), rng.random()];
                    (f * a.cos(), f * a.sin(), phase, color)
                })
                .collect(),
        )
    }

    fn at(&self, u: f32, v: f32) -> [f32; 3] {
        let mut c = [0.5f32; 3];
        let n = self.0.len() as f32;
        for (fx, fy, ph, col) in &self.0 {
            let s = (std::f32::consts::TAU * (fx * u + fy * v) + ph).sin() / n;
            for ch in 0..3 {
                c[ch] += 0.5 * s * (2.0 * col[ch] - 1.0 + 0.5);
            }
        }
        c
    }
}

fn base_config(task: Task, image_size: usize) -> TaskConfig {
    TaskConfig {
        task,
        backbone: BackboneKind::MockTiny,
        image_size,
        d_agg: 8,
        learning_rate: 1e-3,
        batch_size: 8,
        seed: 0,
        ..TaskConfig::default()
    }
}

fn sample(id: String, class: usize, image: Tensor) -> Sample {
    Sample { id, class, image }
}

/// Four classes of oriented stripes, two sketches each.
pub fn recognition_toy(device: &Device) -> Result<(TaskConfig, SampleSet)> {
    let size = 64;
    let mut config = base_config(Task::Recognition, size);
    config.max_steps = Some(100);
    let classes: Vec<String> = ["horizontal", "vertical", "diagonal", "rings"].iter().map(|s| s.to_string()).collect();
    let mut sketches = Vec::new();
    for (c, _) in classes.iter().enumerate() {
        for inst in 0..2 {
            let phase = inst as f32 * 1.3;
            let img = render(
                size,
                |y, x| {
                    let (u, v) = (x as f32 / size as f32, y as f32 / size as f32);
                    let t = match c {
                        0 => 6.0 * v,
                        1 => 6.0 * u,
                        2 => 4.0 * (u + v),
                        _ => 8.0 * ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt(),
                    };
                    let s = 0.5 + 0.5 * (std::f32::consts::TAU * t + phase).sin();
                    [s, s, s]
                },
                device,
            )?;
            sketches.push(sample(format!("s{c}{inst}"), c, img));
        }
    }
    let data = SampleSet {
        image_size: size,
        pairs: vec![None; sketches.len()],
        classes,
        photos: Vec::new(),
        sketches,
        masks: Vec::new(),
        annotations: Vec::new(),
    };
    Ok((config, data))
}

/// Six instance-paired sketch/photo textures over two classes. Sketches are
/// binarized grayscale versions of their photos.
pub fn retrieval_toy(device: &Device) -> Result<(TaskConfig, SampleSet)> {
    let size = 64;
    let mut config = base_config(Task::FgSbir, size);
    config.max_steps = Some(50);
    config.batch_size = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let classes = vec!["a".to_string(), "b".to_string()];
    let (mut photos, mut sketches, mut pairs) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..6 {
        let class = i % 2;
        let w = Waves::random(&mut rng, 4, 5.0);
        let at = |y: usize, x: usize| w.at(x as f32 / size as f32, y as f32 / size as f32);
        photos.push(sample(format!("{i}"), class, render(size, at, device)?));
        let sk = render(
            size,
            |y, x| {
                let c = at(y, x);
                let g = if (c[0] + c[1] + c[2]) / 3.0 > 0.5 { 1.0 } else { 0.0 };
                [g, g, g]
            },
            device,
        )?;
        sketches.push(sample(format!("{i}"), class, sk));
        pairs.push(Some(i));
    }
    let data = SampleSet {
        image_size: size,
        classes,
        masks: vec![None; photos.len()],
        photos,
        sketches,
        pairs,
        annotations: Vec::new(),
    };
    Ok((config, data))
}

/// Two sketch/photo pairs where the photo is the sketch texture translated
/// by a known offset; keypoints follow the translation.
pub fn correspondence_toy(device: &Device) -> Result<(TaskConfig, SampleSet)> {
    let size = 480;
    let mut config = base_config(Task::Correspondence, size);
    config.max_steps = Some(150);
    config.batch_size = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let classes = vec!["shift".to_string()];
    let (mut photos, mut sketches, mut annotations) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..2 {
        let (dx, dy) = (rng.random_range(-40.0f32..40.0), rng.random_range(-40.0f32..40.0));
        let w = Waves::random(&mut rng, 8, 9.0);
        let tex = |y: f32, x: f32| w.at(x / size as f32, y / size as f32);
        sketches.push(sample(format!("{i}"), 0, render(size, |y, x| tex(y as f32, x as f32), device)?));
        photos.push(sample(
            format!("{i}"),
            0,
            render(size, |y, x| tex(y as f32 - dy, x as f32 - dx), device)?,
        ));
        let pairs = (0..12)
            .map(|_| {
                let (x, y) = (rng.random_range(80.0..400.0), rng.random_range(80.0..400.0));
                (Keypoint::new(x, y), Keypoint::new(x + dx as f64, y + dy as f64))
            })
            .collect();
        annotations.push(AnnotatedPair {
            sketch: i,
            photo: i,
            annotation: CorrespondenceAnnotation {
                sketch_id: format!("{i}"),
                photo_id: format!("{i}"),
                pairs,
            },
        });
    }
    let data = SampleSet {
        image_size: size,
        classes,
        masks: vec![None; photos.len()],
        pairs: (0..sketches.len()).map(Some).collect(),
        photos,
        sketches,
        annotations,
    };
    Ok((config, data))
}

/// Two classes of filled shapes on textured backgrounds, with masks; the
/// sketches are outlines of the same shapes.
pub fn segmentation_toy(device: &Device) -> Result<(TaskConfig, SampleSet)> {
    let size = 128;
    let mut config = base_config(Task::Segmentation, size);
    config.max_steps = Some(150);
    config.batch_size = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let classes = vec!["disc".to_string(), "square".to_string()];
    let (mut photos, mut sketches, mut masks) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..4 {
        let class = i % 2;
        let (cx, cy) = (rng.random_range(40.0f32..88.0), rng.random_range(40.0f32..88.0));
        let r = rng.random_range(22.0f32..32.0);
        let inside = |y: usize, x: usize| {
            let (u, v) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            if class == 0 {
                u * u + v * v <= r * r
            } else {
                u.abs() <= r && v.abs() <= r
            }
        };
        let bg = Waves::random(&mut rng, 6, 12.0);
        let fg: [f32; 3] = [rng.random_range(0.7..1.0), rng.random_range(0.0..0.3), rng.random_range(0.0..0.3)];
        photos.push(sample(
            format!("{i}"),
            class,
            render(
                size,
                |y, x| {
                    if inside(y, x) {
                        fg
                    } else {
                        let c = bg.at(x as f32 / size as f32, y as f32 / size as f32);
                        [0.3 * c[0], 0.3 * c[1] + 0.2, 0.3 * c[2] + 0.4]
                    }
                },
                device,
            )?,
        ));
        let mut data = vec![0u8; size * size];
        for y in 0..size {
            for x in 0..size {
                data[y * size + x] = u8::from(inside(y, x));
            }
        }
        masks.push(Some(SegMask::new(size, size, data)?));
        let edge = |y: usize, x: usize| {
            let here = inside(y, x);
            let n = [(y.saturating_sub(2), x), ((y + 2).min(size - 1), x), (y, x.saturating_sub(2)), (y, (x + 2).min(size - 1))];
            n.iter().any(|&(a, b)| inside(a, b) != here)
        };
        sketches.push(sample(
            format!("{i}"),
            class,
            render(size, |y, x| if edge(y, x) { [0.0; 3] } else { [1.0; 3] }, device)?,
        ));
    }
    let data = SampleSet {
        image_size: size,
        classes,
        pairs: (0..sketches.len()).map(Some).collect(),
        photos,
        sketches,
        masks,
        annotations: Vec::new(),
    };
    Ok((config, data))
}

/// Toy problem for `task`; category-level retrieval reuses the paired set.
pub fn toy_problem(task: Task, device: &Device) -> Result<(TaskConfig, SampleSet)> {
    match task {
        Task::Recognition => recognition_toy(device),
        Task::FgSbir => retrieval_toy(device),
        Task::ZsSbir => {
            let (mut config, data) = retrieval_toy(device)?;
            config.task = Task::ZsSbir;
            Ok((config, data))
        }
        Task::Correspondence => correspondence_toy(device),
        Task::Segmentation => segmentation_toy(device),
    }
}
