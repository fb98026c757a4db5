//! Gaussian attention targets over the token grid.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PixelLocation;

/// Token layout of an encoder: `t x t` tiles of `n_t` pixels each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub tokens_per_side: usize,
    pub tile: usize,
}

impl TokenGrid {
    pub fn new(tokens_per_side: usize, tile: usize) -> Result<Self> {
        if tokens_per_side < 2 || tile == 0 {
            return Err(Error::Configuration(format!(
                "token grid needs t >= 2 and a positive tile size, got t={tokens_per_side}, n_t={tile}"
            )));
        }
        Ok(Self { tokens_per_side, tile })
    }

    pub fn for_image(n: usize, tile: usize) -> Result<Self> {
        if tile == 0 || n % tile != 0 {
            return Err(Error::Configuration(format!(
                "image size {n} is not divisible by tile size {tile}"
            )));
        }
        Self::new(n / tile, tile)
    }

    pub fn image_size(&self) -> usize {
        self.tokens_per_side * self.tile
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens_per_side * self.tokens_per_side
    }
}

/// A normalized distribution over the `t x t` token grid (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMap {
    pub tokens_per_side: usize,
    pub grid: Vec<f64>,
    /// Center in token units, `(row, col)`.
    pub center: (f64, f64),
    pub sigma: f64,
}

impl TargetMap {
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.grid[u * self.tokens_per_side + v]
    }

    /// Lossless 8-bit grayscale rendering scaled so the peak is white.
    pub fn to_luma8(&self) -> image::GrayImage {
        let t = self.tokens_per_side as u32;
        let peak = self.grid.iter().cloned().fold(0.0, f64::max);
        image::GrayImage::from_fn(t, t, |x, y| {
            let v = self.at(y as usize, x as usize);
            let level = if peak > 0.0 { v / peak } else { 0.0 };
            image::Luma([(level * 255.0).round() as u8])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_luma8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::image(path, e))
    }
}

/// `sigma = (m / n_t) / (2 sqrt(2 ln 2))`: the FWHM equals the patch size in token units.
pub fn sigma_from_patch(m: f64, tile: f64) -> Result<f64> {
    if !(m > 0.0) || !(tile > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "patch size and tile size must be positive, got m={m}, n_t={tile}"
        )));
    }
    Ok((m / tile) / fwhm_factor())
}

pub(crate) fn fwhm_factor() -> f64 {
    2.0 * (2.0 * std::f64::consts::LN_2).sqrt()
}

/// Isotropic Gaussian centered at `(i / n_t, j / n_t)`, evaluated at token
/// centers `(u + 0.5, v + 0.5)` and normalized to sum to one.
pub fn gaussian_target_map(loc: PixelLocation, grid: TokenGrid, sigma: f64) -> Result<TargetMap> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidSpec(format!("sigma must be positive, got {sigma}")));
    }
    let t = grid.tokens_per_side;
    let x = loc.i as f64 / grid.tile as f64;
    let y = loc.j as f64 / grid.tile as f64;
    let sq: Vec<f64> = (0..t * t)
        .map(|p| {
            let du = (p / t) as f64 + 0.5 - x;
            let dv = (p % t) as f64 + 0.5 - y;
            du * du + dv * dv
        })
        .collect();
    // Shift by the nearest distance so far-off centers do not underflow.
    let nearest = sq.iter().cloned().fold(f64::INFINITY, f64::min);
    let denom = 2.0 * sigma * sigma;
    let mut weights: Vec<f64> = sq.iter().map(|d| (-(d - nearest) / denom).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(TargetMap {
        tokens_per_side: t,
        grid: weights,
        center: (x, y),
        sigma,
    })
}

/// Aligns a target map with an encoder's query row: a zero-mass slot is
/// prepended for the class token when one exists.
pub fn target_query_row(map: &TargetMap, has_query_slot: bool) -> Vec<f64> {
    let mut row = Vec::with_capacity(map.grid.len() + usize::from(has_query_slot));
    if has_query_slot {
        row.push(0.0);
    }
    row.extend_from_slice(&map.grid);
    row
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn sigma_examples() {
        assert_abs_diff_eq!(sigma_from_patch(32.0, 32.0).unwrap(), 0.424661, epsilon = 1e-6);
        assert_abs_diff_eq!(sigma_from_patch(42.0, 14.0).unwrap(), 1.273983, epsilon = 1e-6);
        let m = 14.0 * fwhm_factor();
        assert_abs_diff_eq!(sigma_from_patch(m, 14.0).unwrap(), 1.0, epsilon = 1e-15);
        assert!(sigma_from_patch(0.0, 14.0).is_err());
        assert!(sigma_from_patch(8.0, -1.0).is_err());
    }

    #[test]
    fn centered_three_by_three_map() {
        // t = 3, tile 8: pixel (12, 12) is token coordinate (1.5, 1.5)
        let grid = TokenGrid::new(3, 8).unwrap();
        let map = gaussian_target_map(PixelLocation::new(12, 12), grid, 0.424661).unwrap();
        // weights are 2^(-4 d^2) = {1, 1/16, 1/256}, total 1.265625
        let norm = 1.265625;
        for u in 0..3 {
            for v in 0..3 {
                let d2 = (u as i32 - 1).pow(2) + (v as i32 - 1).pow(2);
                let expected = 2f64.powi(-4 * d2) / norm;
                assert_abs_diff_eq!(map.at(u, v), expected, epsilon = 1e-5);
            }
        }
        assert_abs_diff_eq!(map.at(1, 1), 0.790123, epsilon = 1e-6);
        assert_abs_diff_eq!(map.at(0, 1), 0.049383, epsilon = 1e-6);
        assert_abs_diff_eq!(map.at(2, 2), 0.003086, epsilon = 1e-6);
    }

    #[test]
    fn wide_sigma_is_uniform() {
        let grid = TokenGrid::new(8, 8).unwrap();
        let map = gaussian_target_map(PixelLocation::new(13, 40), grid, 1e6).unwrap();
        for v in &map.grid {
            assert_abs_diff_eq!(*v, 1.0 / 64.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn tiny_sigma_far_center_stays_finite() {
        let grid = TokenGrid::new(8, 8).unwrap();
        let map = gaussian_target_map(PixelLocation::new(12, 12), grid, 1e-3).unwrap();
        let total: f64 = map.grid.iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        assert!(map.grid.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn query_row_layout() {
        let map = TargetMap {
            tokens_per_side: 2,
            grid: vec![0.7, 0.1, 0.1, 0.1],
            center: (1.0, 1.0),
            sigma: 1.0,
        };
        assert_eq!(target_query_row(&map, true), vec![0.0, 0.7, 0.1, 0.1, 0.1]);
        assert_eq!(target_query_row(&map, false), vec![0.7, 0.1, 0.1, 0.1]);
    }

    #[test]
    fn grid_validation() {
        assert!(TokenGrid::for_image(64, 8).is_ok());
        assert!(TokenGrid::for_image(65, 8).is_err());
        assert!(TokenGrid::new(1, 8).is_err());
    }

    proptest! {
        #[test]
        fn maps_are_normalized(t in 3usize..=24, sigma in 0.3f64..=5.0, fi in 0.0f64..1.0, fj in 0.0f64..1.0) {
            let grid = TokenGrid::new(t, 8).unwrap();
            let n = t * 8;
            let i = (fi * n as f64) as usize;
            let j = (fj * n as f64) as usize;
            let map = gaussian_target_map(PixelLocation::new(i, j), grid, sigma).unwrap();
            let total: f64 = map.grid.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(map.grid.iter().all(|&v| v >= 0.0));
            let row = target_query_row(&map, true);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert_eq!(row.len(), t * t + 1);
        }

        #[test]
        fn centered_map_is_symmetric(half in 1usize..=12, sigma in 0.3f64..=5.0) {
            let t = half * 2;
            let grid = TokenGrid::new(t, 4).unwrap();
            let mid = t * 4 / 2;
            let map = gaussian_target_map(PixelLocation::new(mid, mid), grid, sigma).unwrap();
            for u in 0..t {
                for v in 0..t {
                    let a = map.at(u, v);
                    prop_assert!((a - map.at(v, t - 1 - u)).abs() < 1e-12);
                    prop_assert!((a - map.at(t - 1 - u, v)).abs() < 1e-12);
                    prop_assert!((a - map.at(u, t - 1 - v)).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn values_fall_off_with_distance(t in 3usize..=12, sigma in 0.3f64..=3.0, i in 0usize..96, j in 0usize..96) {
            let grid = TokenGrid::new(t, 8).unwrap();
            let (i, j) = (i % (t * 8), j % (t * 8));
            let map = gaussian_target_map(PixelLocation::new(i, j), grid, sigma).unwrap();
            let (x, y) = map.center;
            let mut cells: Vec<(f64, f64)> = (0..t * t)
                .map(|p| {
                    let du = (p / t) as f64 + 0.5 - x;
                    let dv = (p % t) as f64 + 0.5 - y;
                    (du * du + dv * dv, map.grid[p])
                })
                .collect();
            cells.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for w in cells.windows(2) {
                if w[1].0 - w[0].0 > 1e-9 && w[0].1 > 1e-300 {
                    prop_assert!(w[0].1 > w[1].1);
                }
            }
        }

        #[test]
        fn shifting_by_a_tile_shifts_the_map(sigma in 0.3f64..=2.0, i in 8usize..48, j in 8usize..48) {
            let grid = TokenGrid::new(8, 8).unwrap();
            let a = gaussian_target_map(PixelLocation::new(i, j), grid, sigma).unwrap();
            let b = gaussian_target_map(PixelLocation::new(i + 8, j), grid, sigma).unwrap();
            // unnormalized Gaussians shift exactly; compare ratios between interior cells
            let ratio = |m: &TargetMap, u: usize, v: usize, u2: usize, v2: usize| m.at(u, v) / m.at(u2, v2);
            let (cu, cv) = (i / 8, j / 8);
            for du in 0..2usize {
                for dv in 0..2usize {
                    let (u, v) = ((cu + du).min(6), (cv + dv).min(7));
                    let ra = ratio(&a, u, v, cu, cv);
                    let rb = ratio(&b, u + 1, v, cu + 1, cv);
                    prop_assert!((ra - rb).abs() <= 1e-9 * ra.abs().max(1.0));
                }
            }
        }
    }
}
