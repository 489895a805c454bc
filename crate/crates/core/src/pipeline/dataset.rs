//! On-disk dataset layout:
//!
//! ```text
//! <root>/<split>.txt                       optional class list for the split
//! <root>/<split>/<class>/photos/<id>.png   photos (png or jpg)
//! <root>/<split>/<class>/sketches/<id>.png sketches; `<photo-id>` or `<photo-id>-<n>` pairs with a photo
//! <root>/<split>/<class>/masks/<id>.png    foreground masks, values {0, 255}
//! <root>/<split>/<class>/keypoints.csv     sketch_id,photo_id,x_s,y_s,x_p,y_p (pixels)
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use serde::Deserialize;

use super::config::Task;
use super::samples::{AnnotatedPair, Sample, SampleSet};
use crate::error::{Error, Result};
use crate::heads::{CorrespondenceAnnotation, Keypoint, SegMask};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq)]
pub struct PhotoRecord {
    pub id: String,
    pub class: usize,
    pub path: PathBuf,
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SketchRecord {
    pub id: String,
    pub class: usize,
    pub path: PathBuf,
    /// Index into `photos` of the paired photo.
    pub photo: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointRecord {
    pub sketch: usize,
    pub photo: usize,
    /// `(sketch, photo)` points in the original image pixels.
    pub pairs: Vec<(Keypoint, Keypoint)>,
}

/// File-level index of one split; decode with [`DatasetIndex::materialize`].
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: String,
    pub classes: Vec<String>,
    pub photos: Vec<PhotoRecord>,
    pub sketches: Vec<SketchRecord>,
    pub keypoints: Vec<KeypointRecord>,
}

#[derive(Deserialize)]
struct KeypointRow {
    sketch_id: String,
    photo_id: String,
    x_s: f64,
    y_s: f64,
    x_p: f64,
    y_p: f64,
}

fn dataset_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Image files in `dir` keyed by stem, sorted. A missing directory is empty.
fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn read_class_list(root: &Path, split: &str) -> Result<Vec<String>> {
    let manifest = root.join(format!("{split}.txt"));
    let split_dir = root.join(split);
    if manifest.is_file() {
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let classes: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        for c in &classes {
            if !split_dir.join(c).is_dir() {
                return Err(dataset_err(&manifest, format!("listed class {c:?} has no directory")));
            }
        }
        return Ok(classes);
    }
    if !split_dir.is_dir() {
        return Err(dataset_err(&split_dir, "split directory not found"));
    }
    let mut classes = Vec::new();
    for entry in std::fs::read_dir(&split_dir).map_err(|e| Error::io(&split_dir, e))? {
        let entry = entry.map_err(|e| Error::io(&split_dir, e))?;
        if entry.path().is_dir() {
            classes.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    classes.sort();
    Ok(classes)
}

/// The photo a sketch stem refers to: an exact id match, else the part
/// before the last `-`.
fn paired_photo(stem: &str, photos: &HashMap<String, usize>) -> Option<usize> {
    photos
        .get(stem)
        .copied()
        .or_else(|| stem.rsplit_once('-').and_then(|(base, _)| photos.get(base).copied()))
}

/// Indexes `<root>/<split>`, checking what `task` needs: instance pairing
/// for fine-grained tasks, binary masks for segmentation and parseable
/// keypoints for correspondence.
pub fn load_dataset(root: &Path, split: &str, task: Task) -> Result<DatasetIndex> {
    let classes = read_class_list(root, split)?;
    let mut photos = Vec::new();
    let mut sketches = Vec::new();
    let mut keypoints = Vec::new();
    for (ci, class) in classes.iter().enumerate() {
        let dir = root.join(split).join(class);
        let masks = image_files(&dir.join("masks"))?;
        let mut local = HashMap::new();
        for (id, path) in image_files(&dir.join("photos"))? {
            local.insert(id.clone(), photos.len());
            photos.push(PhotoRecord {
                mask: masks.get(&id).cloned(),
                id,
                class: ci,
                path,
            });
        }
        let mut local_sketch = HashMap::new();
        for (id, path) in image_files(&dir.join("sketches"))? {
            let photo = paired_photo(&id, &local);
            if photo.is_none() && matches!(task, Task::FgSbir | Task::Correspondence) {
                return Err(dataset_err(&path, "sketch has no paired photo"));
            }
            local_sketch.insert(id.clone(), sketches.len());
            sketches.push(SketchRecord { id, class: ci, path, photo });
        }
        let kp_path = dir.join("keypoints.csv");
        if kp_path.is_file() {
            keypoints.extend(read_keypoints(&kp_path, &local_sketch, &local)?);
        }
    }
    if task == Task::Segmentation {
        for p in &photos {
            if let Some(m) = &p.mask {
                check_mask_file(m)?;
            }
        }
        if photos.iter().all(|p| p.mask.is_none()) {
            return Err(dataset_err(&root.join(split), "segmentation needs at least one mask"));
        }
    }
    if task == Task::Correspondence && keypoints.is_empty() {
        return Err(dataset_err(&root.join(split), "correspondence needs keypoints.csv files"));
    }
    log::info!(
        "{split}: {} classes, {} photos, {} sketches, {} keypoint annotations",
        classes.len(),
        photos.len(),
        sketches.len(),
        keypoints.len()
    );
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        split: split.to_string(),
        classes,
        photos,
        sketches,
        keypoints,
    })
}

fn read_keypoints(
    path: &Path,
    sketches: &HashMap<String, usize>,
    photos: &HashMap<String, usize>,
) -> Result<Vec<KeypointRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| dataset_err(path, e.to_string()))?;
    let mut grouped: BTreeMap<(usize, usize), Vec<(Keypoint, Keypoint)>> = BTreeMap::new();
    for (line, row) in reader.deserialize::<KeypointRow>().enumerate() {
        let row = row.map_err(|e| dataset_err(path, format!("record {}: {e}", line + 1)))?;
        let s = *sketches
            .get(&row.sketch_id)
            .ok_or_else(|| dataset_err(path, format!("record {}: unknown sketch {}", line + 1, row.sketch_id)))?;
        let p = *photos
            .get(&row.photo_id)
            .ok_or_else(|| dataset_err(path, format!("record {}: unknown photo {}", line + 1, row.photo_id)))?;
        let coords = [row.x_s, row.y_s, row.x_p, row.y_p];
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(dataset_err(path, format!("record {}: invalid coordinate", line + 1)));
        }
        grouped
            .entry((s, p))
            .or_default()
            .push((Keypoint::new(row.x_s, row.y_s), Keypoint::new(row.x_p, row.y_p)));
    }
    Ok(grouped
        .into_iter()
        .map(|((sketch, photo), pairs)| KeypointRecord { sketch, photo, pairs })
        .collect())
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn check_mask_file(path: &Path) -> Result<image::GrayImage> {
    let mask = open_image(path)?.to_luma8();
    if let Some(v) = mask.pixels().map(|p| p.0[0]).find(|v| *v != 0 && *v != 255) {
        return Err(dataset_err(path, format!("mask pixel value {v} is neither 0 nor 255")));
    }
    Ok(mask)
}

/// Decodes an image into a `[3, size, size]` tensor in `[0, 1]`.
pub fn load_image(path: &Path, size: usize, device: &Device) -> Result<Tensor> {
    let rgb = open_image(path)?
        .resize_exact(size as u32, size as u32, FilterType::Triangle)
        .to_rgb8();
    let values: Vec<f32> = rgb.pixels().flat_map(|p| p.0).map(|v| v as f32 / 255.0).collect();
    Ok(Tensor::from_vec(values, (size, size, 3), device)?
        .permute((2, 0, 1))?
        .contiguous()?)
}

/// Loads a `{0, 255}` mask and resamples it (nearest) to `size × size`.
pub fn load_mask(path: &Path, size: usize) -> Result<SegMask> {
    let mask = check_mask_file(path)?;
    let resized = image::imageops::resize(&mask, size as u32, size as u32, FilterType::Nearest);
    SegMask::new(size, size, resized.pixels().map(|p| u8::from(p.0[0] > 127)).collect())
}

impl DatasetIndex {
    /// Decodes every image at `image_size`; keypoints are rescaled from
    /// the original pixel grid.
    pub fn materialize(&self, image_size: usize, device: &Device) -> Result<SampleSet> {
        let photos = self
            .photos
            .iter()
            .map(|r| {
                Ok(Sample {
                    id: r.id.clone(),
                    class: r.class,
                    image: load_image(&r.path, image_size, device)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let sketches = self
            .sketches
            .iter()
            .map(|r| {
                Ok(Sample {
                    id: r.id.clone(),
                    class: r.class,
                    image: load_image(&r.path, image_size, device)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let masks = self
            .photos
            .iter()
            .map(|r| r.mask.as_deref().map(|m| load_mask(m, image_size)).transpose())
            .collect::<Result<Vec<_>>>()?;
        let mut annotations = Vec::new();
        for k in &self.keypoints {
            let sp = &self.sketches[k.sketch].path;
            let pp = &self.photos[k.photo].path;
            let (sw, sh) = image::image_dimensions(sp).map_err(|source| Error::Image { path: sp.clone(), source })?;
            let (pw, ph) = image::image_dimensions(pp).map_err(|source| Error::Image { path: pp.clone(), source })?;
            let s = image_size as f64;
            let scale = |k: &Keypoint, w: u32, h: u32| Keypoint::new(k.x * s / w as f64, k.y * s / h as f64);
            for (a, b) in &k.pairs {
                if a.x >= sw as f64 || a.y >= sh as f64 || b.x >= pw as f64 || b.y >= ph as f64 {
                    return Err(dataset_err(sp, "keypoint outside the image"));
                }
            }
            annotations.push(AnnotatedPair {
                sketch: k.sketch,
                photo: k.photo,
                annotation: CorrespondenceAnnotation {
                    sketch_id: self.sketches[k.sketch].id.clone(),
                    photo_id: self.photos[k.photo].id.clone(),
                    pairs: k.pairs.iter().map(|(a, b)| (scale(a, sw, sh), scale(b, pw, ph))).collect(),
                },
            });
        }
        let set = SampleSet {
            image_size,
            classes: self.classes.clone(),
            photos,
            sketches,
            pairs: self.sketches.iter().map(|s| s.photo).collect(),
            masks,
            annotations,
        };
        set.validate()?;
        Ok(set)
    }
}
