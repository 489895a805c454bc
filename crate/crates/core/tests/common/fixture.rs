//! On-disk dataset fixtures.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

fn write_rgb(path: &Path, size: u32, seed: u32) {
    let img = RgbImage::from_fn(size, size, |x, y| {
        let v = ((x * 7 + y * 13 + seed * 31) % 256) as u8;
        Rgb([v, v.wrapping_mul(3), 255 - v])
    });
    img.save(path).unwrap();
}

fn write_mask(path: &Path, size: u32, value_inside: u8) {
    let img = GrayImage::from_fn(size, size, |x, y| {
        let inside = x > size / 4 && x < 3 * size / 4 && y > size / 4 && y < 3 * size / 4;
        Luma([if inside { value_inside } else { 0 }])
    });
    img.save(path).unwrap();
}

/// `classes × photos` photos with `sketches_per_photo` paired sketches
/// each (`<id>-<n>`), square masks and one keypoint file per class whose
/// first sketch/photo pair carries `keypoints` points.
pub fn write_dataset(root: &Path, split: &str, classes: usize, photos: usize, sketches_per_photo: usize, keypoints: usize) {
    let size = 40;
    for c in 0..classes {
        let dir = root.join(split).join(format!("class{c}"));
        for sub in ["photos", "sketches", "masks"] {
            std::fs::create_dir_all(dir.join(sub)).unwrap();
        }
        for p in 0..photos {
            let id = format!("p{p}");
            write_rgb(&dir.join("photos").join(format!("{id}.png")), size, (c * 10 + p) as u32);
            write_mask(&dir.join("masks").join(format!("{id}.png")), size, 255);
            for s in 0..sketches_per_photo {
                write_rgb(&dir.join("sketches").join(format!("{id}-{s}.png")), size, (c * 100 + p * 10 + s) as u32);
            }
        }
        let mut csv = String::from("sketch_id,photo_id,x_s,y_s,x_p,y_p\n");
        for k in 0..keypoints {
            let v = 3.0 + 7.0 * k as f64;
            csv.push_str(&format!("p0-0,p0,{v},{},{},{v}\n", v + 1.0, v + 2.0));
        }
        std::fs::write(dir.join("keypoints.csv"), csv).unwrap();
    }
}

/// Replaces one mask with a gray (non-binary) one; returns its path.
pub fn corrupt_mask(root: &Path, split: &str) -> std::path::PathBuf {
    let path = root.join(split).join("class1").join("masks").join("p2.png");
    write_mask(&path, 40, 128);
    path
}
