//! Synthetic images: smooth random backgrounds with one bright square each.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{ImageRecord, PointAnnotation};
use crate::error::{Error, Result};
use crate::geometry::{ImageTensor, PixelLocation};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticItem {
    pub image: ImageTensor,
    /// Center pixel of the square (row, col), rounded down.
    pub square_center: PixelLocation,
    pub square_size: usize,
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Deterministic synthetic set. Values are quantized to 8 bits so that a PNG
/// round trip is lossless.
pub fn synthesize_images(count: usize, n: usize, seed: u64) -> Result<Vec<SyntheticItem>> {
    if n < 16 {
        return Err(Error::Configuration(format!("synthetic images need n >= 16, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let corners: Vec<[f64; 3]> = (0..4)
                .map(|_| [0; 3].map(|_| rng.random_range(0.05..0.6)))
                .collect();
            let noise: Vec<f64> = (0..3 * n * n).map(|_| rng.random_range(-0.08..0.08)).collect();
            let side = 2 * rng.random_range(n / 16..=n / 8);
            let top = rng.random_range(0..=n - side);
            let left = rng.random_range(0..=n - side);
            let level = rng.random_range(0.85..1.0);
            let tint: [f64; 3] = [0; 3].map(|_| rng.random_range(-0.05..0.0));
            let last = (n - 1) as f64;
            let image = ImageTensor::from_fn(n, |c, r, col| {
                if (top..top + side).contains(&r) && (left..left + side).contains(&col) {
                    return quantize(level + tint[c]);
                }
                let (y, x) = (r as f64 / last, col as f64 / last);
                let bg = corners[0][c] * (1.0 - y) * (1.0 - x)
                    + corners[1][c] * (1.0 - y) * x
                    + corners[2][c] * y * (1.0 - x)
                    + corners[3][c] * y * x;
                quantize(bg + noise[(c * n + r) * n + col])
            })?;
            Ok(SyntheticItem {
                image,
                square_center: PixelLocation::new(top + side / 2, left + side / 2),
                square_size: side,
            })
        })
        .collect()
}

/// Writes `img_XXXX.png` files plus `manifest.jsonl` into `dir` and returns the
/// manifest path. Each record carries the square center as a `square` keypoint.
pub fn write_synthetic_dataset(dir: &Path, count: usize, n: usize, seed: u64) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let items = synthesize_images(count, n, seed)?;
    let manifest = dir.join("manifest.jsonl");
    let mut out = std::fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    for (k, item) in items.iter().enumerate() {
        let name = format!("img_{k:04}.png");
        item.image.save_png(&dir.join(&name))?;
        let record = ImageRecord {
            path: name.into(),
            split: Some("train".into()),
            annotations: vec![PointAnnotation {
                part: "square".into(),
                i: item.square_center.i as f64,
                j: item.square_center.j as f64,
                visible: true,
                size: Some(item.square_size as f64),
            }],
        };
        writeln!(out, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&manifest, e))?;
    }
    Ok(manifest)
}
