//! Sketch-to-photo correspondence: patch contrastive loss, correlation
//! flow, end-point error and keypoint transfer.
//!
//! Flow vectors are `(x, y)` in cell units of the 60×60 grid. Cells are
//! indexed row-major, `cell = row · 60 + col`.

use std::collections::HashSet;

use candle_core::{DType, Device, Tensor};

use crate::aggregator::{FusedFeatureMap, FUSED_GRID};
use crate::error::{Error, Result};
use crate::grid::l2_normalize;

pub const DEFAULT_CONTRASTIVE_TAU: f64 = 0.07;
pub const DEFAULT_FLOW_TEMPERATURE: f64 = 0.05;

const CELLS: usize = FUSED_GRID * FUSED_GRID;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Keypoint) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Paired keypoints in pixel coordinates: `(sketch, photo)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceAnnotation {
    pub sketch_id: String,
    pub photo_id: String,
    pub pairs: Vec<(Keypoint, Keypoint)>,
}

impl CorrespondenceAnnotation {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "annotation {}/{} has no keypoints",
                self.sketch_id, self.photo_id
            )));
        }
        let limit = image_size as f64;
        for (s, p) in &self.pairs {
            for k in [s, p] {
                if !(k.x >= 0.0 && k.x < limit && k.y >= 0.0 && k.y < limit) {
                    return Err(Error::InvalidArgument(format!(
                        "keypoint ({}, {}) outside a {image_size}px image in {}/{}",
                        k.x, k.y, self.sketch_id, self.photo_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn sketch_points(&self) -> Vec<Keypoint> {
        self.pairs.iter().map(|(s, _)| *s).collect()
    }

    pub fn photo_points(&self) -> Vec<Keypoint> {
        self.pairs.iter().map(|(_, p)| *p).collect()
    }
}

/// Grid cell containing a pixel-space keypoint (`floor(coord · 60 / H)`).
pub fn keypoint_cell(k: Keypoint, image_size: usize) -> usize {
    let scale = FUSED_GRID as f64 / image_size as f64;
    let idx = |v: f64| ((v * scale).floor().max(0.0) as usize).min(FUSED_GRID - 1);
    idx(k.y) * FUSED_GRID + idx(k.x)
}

/// `(col, row)` of a cell.
pub fn cell_xy(cell: usize) -> (f64, f64) {
    ((cell % FUSED_GRID) as f64, (cell / FUSED_GRID) as f64)
}

/// Pixel position of a cell centre.
pub fn cell_center(cell: usize, image_size: usize) -> Keypoint {
    let (x, y) = cell_xy(cell);
    let w = image_size as f64 / FUSED_GRID as f64;
    Keypoint::new((x + 0.5) * w, (y + 0.5) * w)
}

/// Sketch/photo cell pairs, dropping any pair whose sketch or photo cell
/// was already used (first occurrence wins).
pub fn matched_cells(ann: &CorrespondenceAnnotation, image_size: usize) -> Vec<(usize, usize)> {
    let mut seen_s = HashSet::new();
    let mut seen_p = HashSet::new();
    let mut out = Vec::new();
    for (i, (s, p)) in ann.pairs.iter().enumerate() {
        let (cs, cp) = (keypoint_cell(*s, image_size), keypoint_cell(*p, image_size));
        if seen_s.contains(&cs) || seen_p.contains(&cp) {
            log::debug!(
                "{}/{}: keypoint pair {i} shares a cell with an earlier pair; dropped",
                ann.sketch_id,
                ann.photo_id
            );
            continue;
        }
        seen_s.insert(cs);
        seen_p.insert(cp);
        out.push((cs, cp));
    }
    out
}

/// `[d, 3600]` view of a single-sample map.
fn single(map: &FusedFeatureMap, what: &str) -> Result<Tensor> {
    if map.batch() != 1 {
        return Err(Error::InvalidArgument(format!("{what} expects a single-sample map, got batch {}", map.batch())));
    }
    Ok(map.tensor().reshape((map.dim(), CELLS))?)
}

fn index(cells: &[usize], device: &Device) -> Result<Tensor> {
    let v: Vec<u32> = cells.iter().map(|c| *c as u32).collect();
    Ok(Tensor::new(v.as_slice(), device)?)
}

/// Symmetric InfoNCE between the matched sketch and photo patch features
/// of one annotated pair; `tau` is a scalar tensor.
pub fn patch_contrastive_loss(
    fs_map: &FusedFeatureMap,
    fp_map: &FusedFeatureMap,
    ann: &CorrespondenceAnnotation,
    image_size: usize,
    tau: &Tensor,
) -> Result<Tensor> {
    let pairs = matched_cells(ann, image_size);
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no keypoint pairs for the contrastive loss".into()));
    }
    let dev = fs_map.tensor().device();
    let s_idx = index(&pairs.iter().map(|p| p.0).collect::<Vec<_>>(), dev)?;
    let p_idx = index(&pairs.iter().map(|p| p.1).collect::<Vec<_>>(), dev)?;
    let s = l2_normalize(&single(fs_map, "contrastive loss")?.index_select(&s_idx, 1)?.t()?, 1, "sketch patch")?;
    let p = l2_normalize(&single(fp_map, "contrastive loss")?.index_select(&p_idx, 1)?.t()?, 1, "photo patch")?;
    let logits = s.matmul(&p.t()?)?.broadcast_div(tau)?;
    let n = pairs.len();
    let diag = Tensor::arange(0u32, n as u32, dev)?.unsqueeze(1)?;
    let ce = |l: &Tensor| -> Result<Tensor> {
        let logp = candle_nn::ops::log_softmax(l, 1)?;
        Ok(logp.gather(&diag, 1)?.mean_all()?.neg()?)
    };
    Ok(((ce(&logits)? + ce(&logits.t()?)?)? * 0.5)?)
}

/// Cosine correlation of the given sketch cells against every photo cell:
/// `[n, 3600]`.
pub fn correlation_rows(fs_map: &FusedFeatureMap, fp_map: &FusedFeatureMap, cells: &[usize]) -> Result<Tensor> {
    let dev = fs_map.tensor().device();
    let s = single(fs_map, "correlation")?.index_select(&index(cells, dev)?, 1)?.t()?;
    let s = l2_normalize(&s, 1, "sketch patch")?;
    let p = l2_normalize(&single(fp_map, "correlation")?.t()?, 1, "photo patch")?;
    Ok(s.matmul(&p.t()?)?)
}

fn cell_coords(dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f64> = (0..CELLS)
        .flat_map(|c| {
            let (x, y) = cell_xy(c);
            [x, y]
        })
        .collect();
    Ok(Tensor::from_vec(v, (CELLS, 2), device)?.to_dtype(dtype)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MatchMode {
    /// Softmax-weighted expected position with the given temperature.
    Soft(f64),
    Hard,
}

/// Matched target `(x, y)` per correlation row: `[n, 2]`.
pub fn match_targets(corr: &Tensor, mode: MatchMode) -> Result<Tensor> {
    let coords = cell_coords(corr.dtype(), corr.device())?;
    match mode {
        MatchMode::Soft(t) => {
            if !(t > 0.0) {
                return Err(Error::InvalidArgument(format!("soft-argmax temperature {t} must be positive")));
            }
            let w = candle_nn::ops::softmax(&corr.affine(1.0 / t, 0.0)?, 1)?;
            Ok(w.matmul(&coords)?)
        }
        MatchMode::Hard => {
            let best = corr.argmax(1)?.to_dtype(DType::U32)?;
            Ok(coords.index_select(&best, 0)?)
        }
    }
}

fn source_coords(cells: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f64> = cells
        .iter()
        .flat_map(|c| {
            let (x, y) = cell_xy(*c);
            [x, y]
        })
        .collect();
    Ok(Tensor::from_vec(v, (cells.len(), 2), device)?.to_dtype(dtype)?)
}

/// Soft-argmax flow at the listed sketch cells: `[n, 2]`.
pub fn flow_at_cells(fs_map: &FusedFeatureMap, fp_map: &FusedFeatureMap, cells: &[usize], temperature: f64) -> Result<Tensor> {
    let corr = correlation_rows(fs_map, fp_map, cells)?;
    let target = match_targets(&corr, MatchMode::Soft(temperature))?;
    Ok((target - source_coords(cells, corr.dtype(), corr.device())?)?)
}

/// Hard-argmax flow at the listed sketch cells: `[n, 2]`.
pub fn hard_flow_at_cells(fs_map: &FusedFeatureMap, fp_map: &FusedFeatureMap, cells: &[usize]) -> Result<Tensor> {
    let corr = correlation_rows(fs_map, fp_map, cells)?;
    let target = match_targets(&corr, MatchMode::Hard)?;
    Ok((target - source_coords(cells, corr.dtype(), corr.device())?)?)
}

/// Dense soft-argmax flow field `[60, 60, 2]`.
pub fn flow_from_correlation(fs_map: &FusedFeatureMap, fp_map: &FusedFeatureMap, temperature: f64) -> Result<Tensor> {
    let cells: Vec<usize> = (0..CELLS).collect();
    Ok(flow_at_cells(fs_map, fp_map, &cells, temperature)?.reshape((FUSED_GRID, FUSED_GRID, 2))?)
}

/// Annotated sketch cells and their ground-truth flow `[M, 2]`.
pub fn flow_targets(ann: &CorrespondenceAnnotation, image_size: usize, dtype: DType, device: &Device) -> Result<(Vec<usize>, Tensor)> {
    let pairs = matched_cells(ann, image_size);
    let v: Vec<f64> = pairs
        .iter()
        .flat_map(|(s, p)| {
            let (sx, sy) = cell_xy(*s);
            let (px, py) = cell_xy(*p);
            [px - sx, py - sy]
        })
        .collect();
    let gt = Tensor::from_vec(v, (pairs.len(), 2), device)?.to_dtype(dtype)?;
    Ok((pairs.into_iter().map(|p| p.0).collect(), gt))
}

/// Mean over the `M` valid cells of `‖e‖²` (or `‖e‖` when `squared` is off).
pub fn epe_loss(flow_est: &Tensor, flow_gt: &Tensor, squared: bool) -> Result<Tensor> {
    if flow_est.dims() != flow_gt.dims() {
        return Err(Error::shape("flow", flow_gt.dims(), flow_est.dims()));
    }
    let (m, two) = flow_est.dims2()?;
    if two != 2 {
        return Err(Error::shape("flow", &[m, 2], flow_est.dims()));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("end-point error over zero valid cells".into()));
    }
    let sq = (flow_est - flow_gt)?.sqr()?.sum(1)?;
    let per = if squared { sq } else { sq.maximum(1e-24)?.sqrt()? };
    Ok(per.mean_all()?)
}

/// Predicted photo keypoints for the given sketch keypoints.
pub fn transfer_keypoints(
    fs_map: &FusedFeatureMap,
    fp_map: &FusedFeatureMap,
    sources: &[Keypoint],
    image_size: usize,
    mode: MatchMode,
) -> Result<Vec<Keypoint>> {
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let cells: Vec<usize> = sources.iter().map(|k| keypoint_cell(*k, image_size)).collect();
    let corr = correlation_rows(fs_map, fp_map, &cells)?;
    let target = match_targets(&corr, mode)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let w = image_size as f64 / FUSED_GRID as f64;
    Ok(target
        .into_iter()
        .map(|t| Keypoint::new((t[0] + 0.5) * w, (t[1] + 0.5) * w))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(seed: u64, d: usize) -> FusedFeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..d * CELLS).map(|_| rng.random_range(-1.0..1.0)).collect();
        FusedFeatureMap::new(Tensor::from_vec(v, (1, d, 60, 60), &Device::Cpu).unwrap()).unwrap()
    }

    fn shifted_x(map: &FusedFeatureMap) -> FusedFeatureMap {
        // photo(col) = sketch(col - 1), cyclically: sketch cell col matches photo col + 1.
        let t = map.tensor();
        let last = t.narrow(3, 59, 1).unwrap();
        let rest = t.narrow(3, 0, 59).unwrap();
        FusedFeatureMap::new(Tensor::cat(&[&last, &rest], 3).unwrap()).unwrap()
    }

    fn ann(pairs: &[((f64, f64), (f64, f64))]) -> CorrespondenceAnnotation {
        CorrespondenceAnnotation {
            sketch_id: "s".into(),
            photo_id: "p".into(),
            pairs: pairs
                .iter()
                .map(|((a, b), (c, d))| (Keypoint::new(*a, *b), Keypoint::new(*c, *d)))
                .collect(),
        }
    }

    fn scalar(t: Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn cell_mapping_uses_floor() {
        assert_eq!(keypoint_cell(Keypoint::new(0.0, 0.0), 480), 0);
        assert_eq!(keypoint_cell(Keypoint::new(7.99, 8.0), 480), 60);
        assert_eq!(keypoint_cell(Keypoint::new(479.9, 479.9), 480), CELLS - 1);
        let c = cell_center(61, 480);
        assert_eq!((c.x, c.y), (12.0, 12.0));
    }

    #[test]
    fn duplicates_keep_first() {
        let a = ann(&[((1.0, 1.0), (100.0, 100.0)), ((2.0, 2.0), (200.0, 200.0)), ((50.0, 50.0), (300.0, 300.0))]);
        assert_eq!(matched_cells(&a, 480).len(), 2);
    }

    #[test]
    fn singleton_contrastive_is_zero() {
        let m = random_map(0, 8);
        let tau = Tensor::new(0.07f64, &Device::Cpu).unwrap();
        let a = ann(&[((10.0, 10.0), (300.0, 40.0))]);
        assert!(scalar(patch_contrastive_loss(&m, &m, &a, 480, &tau).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn two_pair_contrastive_by_hand() {
        // Cells 0 and 1 of both maps; d = 2.
        let mut s = vec![0.0f64; 2 * CELLS];
        let mut p = vec![0.0f64; 2 * CELLS];
        // sketch: s0 = (1,0), s1 = (0,1); photo: p0 = (0,1), p1 = (0,1).
        s[0] = 1.0;
        s[CELLS + 1] = 1.0;
        p[CELLS] = 1.0;
        p[CELLS + 1] = 1.0;
        for c in 2..CELLS {
            s[c] = 1.0;
            p[c] = 1.0;
        }
        let sm = FusedFeatureMap::new(Tensor::from_vec(s, (1, 2, 60, 60), &Device::Cpu).unwrap()).unwrap();
        let pm = FusedFeatureMap::new(Tensor::from_vec(p, (1, 2, 60, 60), &Device::Cpu).unwrap()).unwrap();
        let a = ann(&[((0.0, 0.0), (0.0, 0.0)), ((8.0, 0.0), (8.0, 0.0))]);
        let tau = Tensor::new(1.0f64, &Device::Cpu).unwrap();
        let got = scalar(patch_contrastive_loss(&sm, &pm, &a, 480, &tau).unwrap());
        // S = [[0, 0], [1, 1]]; rows: -ln(1/2) twice; cols: col0 = [0,1] target 0, col1 = [0,1] target 1.
        let ln2 = 2f64.ln();
        let row = ln2;
        let col = 0.5 * (-(1.0 / (1.0 + 1f64.exp())).ln() + -(1f64.exp() / (1.0 + 1f64.exp())).ln());
        assert!((got - 0.5 * (row + col)).abs() < 1e-12);
    }

    #[test]
    fn saturated_contrastive_vanishes() {
        let mut s = vec![0.0f64; 2 * CELLS];
        s[0] = 1.0;
        s[1] = -1.0;
        let m = FusedFeatureMap::new(
            Tensor::from_vec(s, (1, 2, 60, 60), &Device::Cpu)
                .unwrap()
                .broadcast_add(&Tensor::new(&[0.0f64, 1e-3], &Device::Cpu).unwrap().reshape((1, 2, 1, 1)).unwrap())
                .unwrap(),
        )
        .unwrap();
        let a = ann(&[((0.0, 0.0), (0.0, 0.0)), ((8.0, 0.0), (8.0, 0.0))]);
        let tau = Tensor::new(1e-3f64, &Device::Cpu).unwrap();
        assert!(scalar(patch_contrastive_loss(&m, &m, &a, 480, &tau).unwrap()) < 1e-6);
    }

    #[test]
    fn self_flow_is_zero() {
        let m = random_map(1, 256);
        let cells: Vec<usize> = (0..CELLS).step_by(37).collect();
        let f = flow_at_cells(&m, &m, &cells, DEFAULT_FLOW_TEMPERATURE).unwrap();
        for v in f.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!(v.abs() < 1e-2, "{v}");
        }
    }

    #[test]
    fn shifted_flow_matches_hard_oracle() {
        let m = random_map(2, 256);
        let p = shifted_x(&m);
        let cells: Vec<usize> = (0..60).map(|r| r * 60 + 30).collect();
        let soft = flow_at_cells(&m, &p, &cells, DEFAULT_FLOW_TEMPERATURE).unwrap().to_vec2::<f64>().unwrap();
        let hard = hard_flow_at_cells(&m, &p, &cells).unwrap().to_vec2::<f64>().unwrap();
        // Brute-force argmax oracle in plain Rust.
        let fs = m.tensor().reshape((256, CELLS)).unwrap().t().unwrap().to_vec2::<f64>().unwrap();
        let fp = p.tensor().reshape((256, CELLS)).unwrap().t().unwrap().to_vec2::<f64>().unwrap();
        let norm = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (i, &c) in cells.iter().enumerate() {
            let mut best = (f64::NEG_INFINITY, 0);
            for (j, q) in fp.iter().enumerate() {
                let cos = fs[c].iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / (norm(&fs[c]) * norm(q));
                if cos > best.0 {
                    best = (cos, j);
                }
            }
            let (bx, by) = cell_xy(best.1);
            let (sx, sy) = cell_xy(c);
            assert_eq!(hard[i], vec![bx - sx, by - sy]);
            assert_eq!(hard[i], vec![1.0, 0.0]);
            assert!((soft[i][0] - 1.0).abs() < 1e-2 && soft[i][1].abs() < 1e-2);
        }
        let cold = flow_at_cells(&m, &p, &cells, 1e-4).unwrap().to_vec2::<f64>().unwrap();
        for (a, b) in cold.iter().zip(&hard) {
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn dense_field_shape() {
        let m = random_map(3, 4);
        assert_eq!(flow_from_correlation(&m, &m, 0.05).unwrap().dims(), &[60, 60, 2]);
    }

    #[test]
    fn epe_examples() {
        let dev = Device::Cpu;
        let z = Tensor::zeros((1, 2), DType::F64, &dev).unwrap();
        let e = Tensor::new(&[[3.0f64, 4.0]], &dev).unwrap();
        assert_eq!(scalar(epe_loss(&e, &e, true).unwrap()), 0.0);
        assert_eq!(scalar(epe_loss(&e, &z, true).unwrap()), 25.0);
        assert!((scalar(epe_loss(&e, &z, false).unwrap()) - 5.0).abs() < 1e-12);
        let two = Tensor::new(&[[1.0f64, 0.0], [0.0, 1.0]], &dev).unwrap();
        let z2 = Tensor::zeros((2, 2), DType::F64, &dev).unwrap();
        assert_eq!(scalar(epe_loss(&two, &z2, true).unwrap()), 1.0);
        let empty = Tensor::zeros((0, 2), DType::F64, &dev).unwrap();
        assert!(epe_loss(&empty, &empty, true).is_err());
    }

    #[test]
    fn transfer_self_and_uniform() {
        let m = random_map(4, 64);
        let src = vec![Keypoint::new(100.0, 37.0), Keypoint::new(3.0, 470.0)];
        let got = transfer_keypoints(&m, &m, &src, 480, MatchMode::Soft(DEFAULT_FLOW_TEMPERATURE)).unwrap();
        for (a, b) in got.iter().zip(&src) {
            assert!(a.distance(b) <= 8.0 * 2f64.sqrt());
        }
        let u = FusedFeatureMap::new(Tensor::ones((1, 3, 60, 60), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let c = transfer_keypoints(&u, &u, &src[..1], 480, MatchMode::Soft(0.05)).unwrap();
        assert!((c[0].x - 240.0).abs() < 1e-9 && (c[0].y - 240.0).abs() < 1e-9);
    }

    #[test]
    fn zero_norm_is_reported() {
        let z = FusedFeatureMap::new(Tensor::zeros((1, 3, 60, 60), DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert!(matches!(correlation_rows(&z, &z, &[0]), Err(Error::ZeroNorm(_))));
    }
}
