//! Images, patch shapes, insertion windows and the pixel-replacement insertion.
//!
//! Pixel coordinates follow the `(row, column)` convention. A patch of even
//! size `m` centered at `(i, j)` covers rows `[i - m/2, i + m/2)` and columns
//! `[j - m/2, j + m/2)`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A square RGB image stored channel-major (`3 x n x n`) with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    n: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Contract("image size must be positive".into()));
        }
        if data.len() != 3 * n * n {
            return Err(Error::Contract(format!(
                "image buffer has {} values, expected 3*{n}*{n}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { n, data })
    }

    pub fn filled(n: usize, value: f64) -> Result<Self> {
        Self::new(n, vec![value; 3 * n * n])
    }

    /// Builds an image from a per-pixel function `(channel, row, col) -> value`.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * n * n);
        for c in 0..3 {
            for r in 0..n {
                for col in 0..n {
                    data.push(f(c, r, col));
                }
            }
        }
        Self::new(n, data)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, r: usize, col: usize) -> f64 {
        self.data[(c * self.n + r) * self.n + col]
    }

    #[inline]
    pub(crate) fn set(&mut self, c: usize, r: usize, col: usize, v: f64) {
        let n = self.n;
        self.data[(c * n + r) * n + col] = v;
    }

    /// Converts to an 8-bit RGB raster (values rounded to the nearest level).
    pub fn to_rgb8(&self) -> image::RgbImage {
        let n = self.n as u32;
        image::RgbImage::from_fn(n, n, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::image(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    FilledSquare,
    HollowSquare,
    HollowCircle,
}

impl std::fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShapeKind::FilledSquare => "filled_square",
            ShapeKind::HollowSquare => "hollow_square",
            ShapeKind::HollowCircle => "hollow_circle",
        })
    }
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "filled_square" => Ok(ShapeKind::FilledSquare),
            "hollow_square" => Ok(ShapeKind::HollowSquare),
            "hollow_circle" => Ok(ShapeKind::HollowCircle),
            other => Err(Error::InvalidSpec(format!("unknown shape '{other}'"))),
        }
    }
}

/// Patch geometry: size `m`, shape family and thickness ratio
/// `lambda = inner diameter / outer diameter`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub size: usize,
    pub shape: ShapeKind,
    #[serde(default)]
    pub thickness_ratio: f64,
}

impl PatchSpec {
    pub fn new(size: usize, shape: ShapeKind, thickness_ratio: f64) -> Result<Self> {
        let spec = Self {
            size,
            shape,
            thickness_ratio,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 2 != 0 {
            return Err(Error::InvalidSpec(format!(
                "patch size must be a positive even integer, got {}",
                self.size
            )));
        }
        if !(0.0..1.0).contains(&self.thickness_ratio) {
            return Err(Error::InvalidSpec(format!(
                "thickness ratio must lie in [0, 1), got {}",
                self.thickness_ratio
            )));
        }
        Ok(())
    }

    pub fn validate_for_image(&self, n: usize) -> Result<()> {
        self.validate()?;
        if self.size > n {
            return Err(Error::InvalidSpec(format!(
                "patch size {} exceeds image size {n}",
                self.size
            )));
        }
        Ok(())
    }
}

/// Binary `m x m` stencil gating which prompt pixels replace image pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeMask {
    m: usize,
    bits: Vec<u8>,
}

impl ShapeMask {
    pub fn from_bits(m: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != m * m {
            return Err(Error::Contract(format!(
                "mask has {} cells, expected {m}x{m}",
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Contract("mask values must be 0 or 1".into()));
        }
        Ok(Self { m, bits })
    }

    pub fn ones(m: usize) -> Self {
        Self {
            m,
            bits: vec![1; m * m],
        }
    }

    pub fn zeros(m: usize) -> Self {
        Self {
            m,
            bits: vec![0; m * m],
        }
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn is_set(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.m + c] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        let m = self.m as u32;
        image::GrayImage::from_fn(m, m, |x, y| {
            image::Luma([if self.is_set(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Writes the mask as a lossless single-channel PNG (0 or 255).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_luma8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::image(path, e))
    }
}

/// Rasterizes the shape mask for `spec`.
///
/// Pixel centers sit at integer coordinates and the grid center is at
/// `((m-1)/2, (m-1)/2)`. A hollow shape keeps the pixels whose distance from
/// the center lies in `[lambda*m/2, m/2)`: Chebyshev distance for squares,
/// Euclidean distance for circles.
pub fn make_shape_mask(spec: &PatchSpec) -> Result<ShapeMask> {
    spec.validate()?;
    let m = spec.size;
    if spec.shape == ShapeKind::FilledSquare {
        return Ok(ShapeMask::ones(m));
    }
    Ok(ring_mask(m, spec.shape, spec.thickness_ratio))
}

pub(crate) fn ring_mask(m: usize, shape: ShapeKind, lambda: f64) -> ShapeMask {
    let center = (m as f64 - 1.0) / 2.0;
    let outer = m as f64 / 2.0;
    let inner = lambda * m as f64 / 2.0;
    let mut bits = vec![0u8; m * m];
    for r in 0..m {
        for c in 0..m {
            let dr = r as f64 - center;
            let dc = c as f64 - center;
            let d = match shape {
                ShapeKind::FilledSquare => 0.0,
                ShapeKind::HollowSquare => dr.abs().max(dc.abs()),
                ShapeKind::HollowCircle => (dr * dr + dc * dc).sqrt(),
            };
            if d >= inner && d < outer {
                bits[r * m + c] = 1;
            }
        }
    }
    ShapeMask { m, bits }
}

/// Center pixel `(row, column)` of a patch placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelLocation {
    pub i: usize,
    pub j: usize,
}

impl PixelLocation {
    pub fn new(i: usize, j: usize) -> Self {
        Self { i, j }
    }

    /// Strict interior test: `0 < i - m/2` and `i + m/2 < n`, same for `j`.
    pub fn is_valid(&self, n: usize, m: usize) -> bool {
        let half = m / 2;
        let ok = |v: usize| v > half && v + half < n;
        ok(self.i) && ok(self.j)
    }

    pub fn check(&self, n: usize, m: usize) -> Result<()> {
        if self.is_valid(n, m) {
            Ok(())
        } else {
            Err(Error::Boundary {
                i: self.i,
                j: self.j,
                m,
                n,
            })
        }
    }

    /// Top-left pixel of the patch window.
    pub fn origin(&self, m: usize) -> (usize, usize) {
        (self.i - m / 2, self.j - m / 2)
    }
}

/// Inclusive range of valid center coordinates along one axis.
pub fn valid_center_range(n: usize, m: usize) -> Result<(usize, usize)> {
    let half = m / 2;
    let lo = half + 1;
    // i + m/2 < n  <=>  i <= n - m/2 - 1
    let hi = n.checked_sub(half + 1);
    match hi {
        Some(hi) if hi >= lo => Ok((lo, hi)),
        _ => Err(Error::Configuration(format!(
            "a {m}px patch has no valid interior placement in a {n}px image"
        ))),
    }
}

/// Draws a placement uniformly over the valid integer box.
pub fn sample_valid_location<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<PixelLocation> {
    let (lo, hi) = valid_center_range(n, m)?;
    let i = rng.random_range(lo..=hi);
    let j = rng.random_range(lo..=hi);
    Ok(PixelLocation { i, j })
}

/// Replaces image pixels with prompt pixels wherever the mask is set inside
/// the window centered at `loc`. `prompt_rgb` is channel-major `3 x m x m`.
pub fn insert_patch(
    image: &ImageTensor,
    prompt_rgb: &[f64],
    mask: &ShapeMask,
    loc: PixelLocation,
) -> Result<ImageTensor> {
    let n = image.size();
    let m = mask.size();
    if prompt_rgb.len() != 3 * m * m {
        return Err(Error::Contract(format!(
            "prompt has {} values, expected 3*{m}*{m}",
            prompt_rgb.len()
        )));
    }
    if m > n {
        return Err(Error::InvalidSpec(format!("patch size {m} exceeds image size {n}")));
    }
    loc.check(n, m)?;
    let (r0, c0) = loc.origin(m);
    let mut out = image.clone();
    for c in 0..3 {
        for r in 0..m {
            for col in 0..m {
                if mask.is_set(r, col) {
                    let v = prompt_rgb[(c * m + r) * m + col];
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::Contract(format!("prompt value {v} outside [0, 1]")));
                    }
                    out.set(c, r0 + r, c0 + col, v);
                }
            }
        }
    }
    Ok(out)
}

/// Token tiles `(row, col)` whose pixel footprint intersects the patch window,
/// in row-major order.
pub fn overlaid_token_set(loc: PixelLocation, m: usize, tile: usize, tokens_per_side: usize) -> Vec<(usize, usize)> {
    let (r0, c0) = loc.origin(m);
    let last = tokens_per_side.saturating_sub(1);
    let span = |start: usize| {
        let first = (start / tile).min(last);
        let end = ((start + m - 1) / tile).min(last);
        first..=end
    };
    let mut out = Vec::new();
    for u in span(r0) {
        for v in span(c0) {
            out.push((u, v));
        }
    }
    out
}

/// Row-major flat indices of [`overlaid_token_set`].
pub fn overlaid_token_indices(loc: PixelLocation, m: usize, tile: usize, tokens_per_side: usize) -> Vec<usize> {
    overlaid_token_set(loc, m, tile, tokens_per_side)
        .into_iter()
        .map(|(u, v)| u * tokens_per_side + v)
        .collect()
}

impl ImageTensor {
    /// `(3, n, n)` f64 tensor.
    pub fn to_tensor(&self) -> Result<candle_core::Tensor> {
        Ok(candle_core::Tensor::from_slice(&self.data, (3, self.n, self.n), &crate::nn::device())?)
    }
}

/// Stacks images into a `(b, 3, n, n)` tensor.
pub fn stack_images(images: &[&ImageTensor]) -> Result<candle_core::Tensor> {
    let n = images
        .first()
        .map(|im| im.size())
        .ok_or_else(|| Error::Contract("empty image batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * 3 * n * n);
    for im in images {
        if im.size() != n {
            return Err(Error::Contract("images in a batch must share one size".into()));
        }
        data.extend_from_slice(im.data());
    }
    Ok(candle_core::Tensor::from_vec(data, (images.len(), 3, n, n), &crate::nn::device())?)
}

/// Differentiable counterpart of [`insert_patch`] over a batch.
///
/// `images` is `(b, 3, n, n)`, `prompt` is `(3, m, m)` and `locs` holds one
/// placement per batch row. The result is `images * (1 - gate) + canvas * gate`
/// where `gate` is the mask pasted at each placement, which reproduces the
/// replacement bit-exactly and carries gradients to `prompt` only.
pub fn insert_patch_batch(
    images: &candle_core::Tensor,
    prompt: &candle_core::Tensor,
    mask: &ShapeMask,
    locs: &[PixelLocation],
) -> Result<candle_core::Tensor> {
    let (b, c, n, w) = images.dims4()?;
    let m = mask.size();
    if c != 3 || n != w || b != locs.len() {
        return Err(Error::Contract(format!(
            "batch insertion expects (b, 3, n, n) images and b placements, got {:?} and {}",
            images.dims(),
            locs.len()
        )));
    }
    if prompt.dims() != [3, m, m] {
        return Err(Error::Contract(format!(
            "prompt tensor must be (3, {m}, {m}), got {:?}",
            prompt.dims()
        )));
    }
    let mut canvases = Vec::with_capacity(b);
    let mut gates = vec![0f64; b * n * n];
    for (k, loc) in locs.iter().enumerate() {
        loc.check(n, m)?;
        let (r0, c0) = loc.origin(m);
        let canvas = prompt
            .pad_with_zeros(1, r0, n - r0 - m)?
            .pad_with_zeros(2, c0, n - c0 - m)?;
        canvases.push(canvas);
        for r in 0..m {
            for col in 0..m {
                if mask.is_set(r, col) {
                    gates[(k * n + r0 + r) * n + c0 + col] = 1.0;
                }
            }
        }
    }
    let canvas = candle_core::Tensor::stack(&canvases, 0)?;
    let gate = candle_core::Tensor::from_vec(gates, (b, 1, n, n), &crate::nn::device())?;
    let keep = gate.affine(-1.0, 1.0)?;
    Ok((images.broadcast_mul(&keep)? + canvas.broadcast_mul(&gate)?)?)
}
