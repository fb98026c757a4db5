//! PNG renders: the prompt, the prompted image and attention heatmaps.
//!
//! Heatmaps take the final-layer head-mean query row over the `t x t` token
//! grid, divide by the larger of the two maps' maxima, upsample bilinearly to
//! `n x n` and map values through a five-stop colormap:
//!
//! | value | color            |
//! |-------|------------------|
//! | 0.00  | (0, 0, 4)        |
//! | 0.25  | (87, 16, 110)    |
//! | 0.50  | (188, 55, 84)    |
//! | 0.75  | (249, 142, 9)    |
//! | 1.00  | (252, 255, 164)  |
//!
//! with linear interpolation between stops (an inferno approximation).

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Luma, Rgb, RgbImage};
use serde::Serialize;

use crate::encoder::{query_attention_mean, VisionEncoder};
use crate::error::{Error, Result};
use crate::geometry::{insert_patch, ImageTensor, PixelLocation};
use crate::prior::Prompt;

const STOPS: [(f64, [f64; 3]); 5] = [
    (0.0, [0.0, 0.0, 4.0]),
    (0.25, [87.0, 16.0, 110.0]),
    (0.5, [188.0, 55.0, 84.0]),
    (0.75, [249.0, 142.0, 9.0]),
    (1.0, [252.0, 255.0, 164.0]),
];

/// Separator columns between the two heatmaps.
const GAP: u32 = 4;

pub fn colormap(v: f64) -> Rgb<u8> {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let k = STOPS.iter().rposition(|(s, _)| *s <= v).unwrap_or(0).min(STOPS.len() - 2);
    let ((a, ca), (b, cb)) = (STOPS[k], STOPS[k + 1]);
    let w = (v - a) / (b - a);
    Rgb([0, 1, 2].map(|c| (ca[c] + w * (cb[c] - ca[c])).round() as u8))
}

/// Final-layer head-mean query attention over the token grid, row-major.
pub fn attention_grid<E: VisionEncoder + ?Sized>(encoder: &E, image: &ImageTensor) -> Result<Vec<f64>> {
    let out = encoder.forward_with_attention(image)?;
    let row = query_attention_mean(&out.trace, encoder.config().layers)?;
    Ok(row.spatial().to_vec())
}

/// Renders a `t x t` grid as an `n x n` heatmap, dividing by `scale`.
pub fn heatmap_image(grid: &[f64], t: usize, n: usize, scale: f64) -> Result<RgbImage> {
    if grid.len() != t * t || t == 0 {
        return Err(Error::Contract(format!("heatmap grid has {} cells, expected {t}x{t}", grid.len())));
    }
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let small: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_fn(t as u32, t as u32, |x, y| Luma([(grid[y as usize * t + x as usize] / scale) as f32]));
    let big = image::imageops::resize(&small, n as u32, n as u32, FilterType::Triangle);
    Ok(RgbImage::from_fn(n as u32, n as u32, |x, y| colormap(big.get_pixel(x, y)[0] as f64)))
}

/// Original (left) and prompted (right) heatmaps under a shared scale.
pub fn heatmap_pair(original: &[f64], prompted: &[f64], t: usize, n: usize) -> Result<RgbImage> {
    let scale = original.iter().chain(prompted).cloned().fold(0.0, f64::max);
    let left = heatmap_image(original, t, n, scale)?;
    let right = heatmap_image(prompted, t, n, scale)?;
    let w = n as u32;
    let mut out = RgbImage::from_pixel(2 * w + GAP, w, Rgb([255, 255, 255]));
    image::imageops::replace(&mut out, &left, 0, 0);
    image::imageops::replace(&mut out, &right, (w + GAP) as i64, 0);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RenderedFiles {
    pub prompt: PathBuf,
    pub prompted_image: PathBuf,
    pub heatmaps: PathBuf,
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::image(path, e))
}

/// Writes `prompt.png` (RGBA, mask as alpha), `prompted.png` and
/// `attention.png` into `out_dir`.
pub fn render_outputs<E: VisionEncoder + ?Sized>(
    prompt: &Prompt,
    encoder: &E,
    image: &ImageTensor,
    loc: PixelLocation,
    out_dir: &Path,
) -> Result<RenderedFiles> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg = encoder.config();
    let prompted = insert_patch(image, &prompt.rgb, &prompt.mask, loc)?;
    let t = cfg.tokens_per_side();
    let pair = heatmap_pair(
        &attention_grid(encoder, image)?,
        &attention_grid(encoder, &prompted)?,
        t,
        cfg.image_size,
    )?;
    let files = RenderedFiles {
        prompt: out_dir.join("prompt.png"),
        prompted_image: out_dir.join("prompted.png"),
        heatmaps: out_dir.join("attention.png"),
    };
    prompt.save_png(&files.prompt)?;
    prompted.save_png(&files.prompted_image)?;
    save(&pair, &files.heatmaps)?;
    Ok(files)
}
