//! Feature diagnostics: PCA-to-RGB visualisation, centred Fourier spectra
//! and the low/high-frequency energy split.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const DEFAULT_RADIUS_FRACTION: f64 = 0.25;
pub const RADIUS_SWEEP: [f64; 3] = [0.1, 0.25, 0.5];

/// Above this channel count the top components come from subspace
/// iteration instead of a full eigendecomposition.
const DENSE_EIGEN_LIMIT: usize = 512;

/// First three principal-component scores over the `h·w` pixels, each
/// min-max scaled to `[0, 1]`. Components are signed so that their
/// largest-magnitude score is positive; missing components (rank < 3) are
/// zero.
pub fn pca_rgb(feature_map: &Array3<f64>) -> Result<Array3<f64>> {
    let (h, w, c) = feature_map.dim();
    let n = h * w;
    if c < 3 || n < 3 {
        return Err(Error::InvalidArgument(format!("PCA needs ≥3 channels and ≥3 pixels, got {h}x{w}x{c}")));
    }
    let mut x = DMatrix::from_row_iterator(n, c, feature_map.iter().copied());
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let (values, vectors) = top_components(&x, 3);
    let scale = values.iter().copied().fold(0.0, f64::max);
    let mut out = Array3::zeros((h, w, 3));
    for k in 0..3 {
        if k >= values.len() || values[k] <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            log::info!("feature map has rank < {}; component {} left at zero", k + 1, k + 1);
            continue;
        }
        let mut scores = &x * vectors.column(k);
        let pivot = scores.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            scores.neg_mut();
        }
        let (lo, hi) = scores.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        if hi - lo <= 0.0 {
            continue;
        }
        for (i, s) in scores.iter().enumerate() {
            out[[i / w, i % w, k]] = ((s - lo) / (hi - lo)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Leading eigenpairs of `xᵀx` (descending), at most `k`.
fn top_components(x: &DMatrix<f64>, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let c = x.ncols();
    if c <= DENSE_EIGEN_LIMIT {
        return sorted_eigen(x.transpose() * x, k);
    }
    let block = k + 5;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut q = DMatrix::from_fn(c, block, |_, _| StandardNormal.sample(&mut rng));
    for _ in 0..40 {
        let z = x.transpose() * (x * &q);
        q = z.qr().q();
    }
    let small = q.transpose() * (x.transpose() * (x * &q));
    let (values, v) = sorted_eigen(small, k);
    (values, q * v)
}

fn sorted_eigen(m: DMatrix<f64>, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    idx.truncate(k);
    let values = idx.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), idx.len(), |r, j| eig.eigenvectors[(r, idx[j])]);
    (values, vectors)
}

/// Centred power spectrum `|F|²` of the channel-mean map, zero frequency
/// at `(h/2, w/2)`.
pub fn power_spectrum(feature_map: &Array3<f64>) -> Array2<f64> {
    let (h, w, _) = feature_map.dim();
    let mean = feature_map.mean_axis(Axis(2)).unwrap_or_else(|| Array2::zeros((h, w)));
    let mut data: Vec<Complex<f64>> = mean.iter().map(|v| Complex::new(*v, 0.0)).collect();
    if h == 0 || w == 0 {
        return Array2::zeros((h, w));
    }
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in data.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[(y + h / 2) % h, (x + w / 2) % w]] = data[y * w + x].norm_sqr();
        }
    }
    out
}

/// `log(1 + |F|)` of the channel-mean map, zero frequency centred.
pub fn fft_log_magnitude(feature_map: &Array3<f64>) -> Array2<f64> {
    power_spectrum(feature_map).mapv(|p| p.sqrt().ln_1p())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LfHf {
    pub lf: f64,
    pub hf: f64,
    pub ratio: f64,
}

/// Splits a centred power spectrum into the energy inside the disc of
/// radius `ρ · min(h, w) / 2` (boundary included) and the rest. A spectrum
/// with no energy reports a ratio of 0.
pub fn lf_hf_ratio(power: &Array2<f64>, rho: f64) -> Result<LfHf> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidArgument(format!("radius fraction {rho} outside (0, 1)")));
    }
    let (h, w) = power.dim();
    let r = rho * h.min(w) as f64 / 2.0;
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let (mut lf, mut hf) = (0.0, 0.0);
    for ((y, x), p) in power.indexed_iter() {
        if (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r {
            lf += p;
        } else {
            hf += p;
        }
    }
    let total = lf + hf;
    Ok(LfHf {
        lf,
        hf,
        ratio: if total > 0.0 { lf / total } else { 0.0 },
    })
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an `[h, w, 3]` image in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_rgb_png(path: &Path, rgb: &Array3<f64>) -> Result<()> {
    let (h, w, _) = rgb.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([to_u8(rgb[[y, x, 0]]), to_u8(rgb[[y, x, 1]]), to_u8(rgb[[y, x, 2]])])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a real map as an 8-bit grayscale PNG after min-max scaling.
pub fn save_gray_png(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let (lo, hi) = map.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_u8((map[[y as usize, x as usize]] - lo) / span)])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// One row of the frequency report.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyRow {
    pub feature_id: String,
    pub rho: f64,
    pub split: LfHf,
}

pub fn format_frequency_report(rows: &[FrequencyRow]) -> String {
    let mut s = String::from("feature\trho\tlf\thf\tratio\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{:.2}\t{:.6e}\t{:.6e}\t{:.6}",
            r.feature_id, r.rho, r.split.lf, r.split.hf, r.split.ratio
        );
    }
    s
}

/// PCA image, spectrum image and the ρ sweep for one feature map. Images
/// land in `out_dir` as `<id>_pca.png` and `<id>_fft.png`.
pub fn analyze_feature(id: &str, feature_map: &Array3<f64>, out_dir: &Path) -> Result<(Vec<FrequencyRow>, [PathBuf; 2])> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pca_path = out_dir.join(format!("{id}_pca.png"));
    let fft_path = out_dir.join(format!("{id}_fft.png"));
    save_rgb_png(&pca_path, &pca_rgb(feature_map)?)?;
    save_gray_png(&fft_path, &fft_log_magnitude(feature_map))?;
    let power = power_spectrum(feature_map);
    let rows = RADIUS_SWEEP
        .iter()
        .map(|&rho| {
            Ok(FrequencyRow {
                feature_id: id.to_string(),
                rho,
                split: lf_hf_ratio(&power, rho)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, [pca_path, fft_path]))
}
