//! The convolutional prior that generates prompt pixels from frozen noise.
//!
//! A small U-Net: three stride-2 downsampling stages, three nearest-neighbour
//! upsampling stages with skip connections, SiLU activations and a sigmoid
//! output. The prior's parameters are the only trainable values in the system.

use std::path::Path;

use candle_core::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PatchSpec, ShapeMask};
use crate::nn;

/// `(name, in_channels, out_channels, kernel, stride)` for every convolution.
const LAYERS: &[(&str, usize, usize, usize, usize)] = &[
    ("enc0.conv_a", 3, 16, 3, 1),
    ("enc0.conv_b", 16, 16, 3, 1),
    ("down1", 16, 32, 3, 2),
    ("enc1", 32, 32, 3, 1),
    ("down2", 32, 64, 3, 2),
    ("enc2", 64, 64, 3, 1),
    ("down3", 64, 64, 3, 2),
    ("bottleneck", 64, 64, 3, 1),
    ("up3", 128, 64, 3, 1),
    ("up2", 96, 32, 3, 1),
    ("up1", 48, 16, 3, 1),
    ("head", 16, 3, 1, 1),
];

const NOISE_STREAM: u64 = 1;

/// Fixed noise input `eta`, shape `(1, 3, size, size)`, uniform in `[0, 1)`.
#[derive(Debug, Clone)]
pub struct PriorNoise {
    pub seed: u64,
    tensor: Tensor,
}

impl PriorNoise {
    pub fn sample(seed: u64, size: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(NOISE_STREAM);
        let tensor = nn::uniform_tensor(&mut rng, &[1, 3, size, size], 0.0, 1.0)?;
        Ok(Self { seed, tensor })
    }

    pub fn from_tensor(seed: u64, tensor: Tensor) -> Result<Self> {
        let (b, c, h, w) = tensor.dims4()?;
        if b != 1 || c != 3 || h != w {
            return Err(Error::Contract(format!(
                "prior noise must be (1, 3, s, s), got {:?}",
                tensor.dims()
            )));
        }
        Ok(Self {
            seed,
            tensor: tensor.to_dtype(nn::DTYPE)?,
        })
    }

    pub fn size(&self) -> usize {
        self.tensor.dims()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }
}

#[derive(Debug, Clone)]
pub struct PriorNetwork {
    patch_size: usize,
    padded_size: usize,
    params: Vec<(String, Var)>,
}

/// Strict initializer: `m` must be a positive multiple of 8.
pub fn init_prior(seed: u64, m: usize) -> Result<(PriorNetwork, PriorNoise)> {
    if m < 8 || m % 8 != 0 {
        return Err(Error::InvalidSpec(format!(
            "prior needs a patch size divisible by 8 (three halvings), got {m}"
        )));
    }
    init_prior_for_patch(seed, m)
}

/// Initializer for any even `m`: the network runs at the next multiple of 8
/// and its output is center-cropped back to `m`.
pub fn init_prior_for_patch(seed: u64, m: usize) -> Result<(PriorNetwork, PriorNoise)> {
    if m == 0 {
        return Err(Error::InvalidSpec("patch size must be positive".into()));
    }
    let padded = m.div_ceil(8) * 8;
    if (padded - m) % 2 != 0 {
        return Err(Error::InvalidSpec(format!("patch size {m} must be even")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(LAYERS.len() * 2);
    for &(name, cin, cout, k, _) in LAYERS {
        // PyTorch's default conv init: U(-1/sqrt(fan_in), 1/sqrt(fan_in))
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let w = nn::uniform_tensor(&mut rng, &[cout, cin, k, k], -bound, bound)?;
        let b = nn::uniform_tensor(&mut rng, &[cout], -bound, bound)?;
        params.push((format!("{name}.weight"), Var::from_tensor(&w)?));
        params.push((format!("{name}.bias"), Var::from_tensor(&b)?));
    }
    let noise = PriorNoise::sample(seed, padded)?;
    Ok((
        PriorNetwork {
            patch_size: m,
            padded_size: padded,
            params,
        },
        noise,
    ))
}

impl PriorNetwork {
    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn padded_size(&self) -> usize {
        self.padded_size
    }

    pub fn parameters(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn param(&self, name: &str) -> &Tensor {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_tensor())
            .expect("layer table and parameter list agree")
    }

    fn conv(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        let stride = LAYERS.iter().find(|l| l.0 == name).map(|l| l.4).unwrap_or(1);
        nn::conv2d(
            x,
            self.param(&format!("{name}.weight")),
            self.param(&format!("{name}.bias")),
            stride,
        )
    }

    fn block(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        Ok(self.conv(name, x)?.silu()?)
    }

    /// Differentiable forward pass; returns the prompt as `(3, m, m)` in `[0, 1]`.
    pub fn forward_tensor(&self, noise: &PriorNoise) -> Result<Tensor> {
        if noise.size() != self.padded_size {
            return Err(Error::Contract(format!(
                "noise is {}px but the prior runs at {}px",
                noise.size(),
                self.padded_size
            )));
        }
        let x = noise.tensor();
        let s0 = self.block("enc0.conv_b", &self.block("enc0.conv_a", x)?)?;
        let s1 = self.block("enc1", &self.block("down1", &s0)?)?;
        let s2 = self.block("enc2", &self.block("down2", &s1)?)?;
        let b = self.block("bottleneck", &self.block("down3", &s2)?)?;
        let u3 = self.block("up3", &Tensor::cat(&[&nn::upsample2x(&b)?, &s2], 1)?)?;
        let u2 = self.block("up2", &Tensor::cat(&[&nn::upsample2x(&u3)?, &s1], 1)?)?;
        let u1 = self.block("up1", &Tensor::cat(&[&nn::upsample2x(&u2)?, &s0], 1)?)?;
        let out = nn::sigmoid(&self.conv("head", &u1)?)?;
        let off = (self.padded_size - self.patch_size) / 2;
        let out = out
            .narrow(2, off, self.patch_size)?
            .narrow(3, off, self.patch_size)?
            .squeeze(0)?;
        Ok(out.contiguous()?)
    }

    /// Replaces parameter values in place (used when restoring a checkpoint).
    pub fn load_parameters(&self, values: &[(String, Tensor)]) -> Result<()> {
        let mut missing = Vec::new();
        for (name, var) in &self.params {
            match values.iter().find(|(n, _)| n == name) {
                Some((_, t)) => {
                    let t = t.to_dtype(nn::DTYPE)?.reshape(var.shape())?;
                    var.set(&t)?;
                }
                None => missing.push(name.clone()),
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Contract(format!("missing prior parameters: {}", missing.join(", "))))
        }
    }

    pub fn checksum(&self) -> Result<String> {
        nn::tensor_checksum(self.params.iter().map(|(n, v)| (n.as_str(), v.as_tensor())))
    }
}

/// Generates channel-major `3 x m x m` prompt values.
pub fn prior_forward(net: &PriorNetwork, noise: &PriorNoise) -> Result<Vec<f64>> {
    Ok(net.forward_tensor(noise)?.flatten_all()?.to_vec1::<f64>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PromptMeta {
    pub encoder_id: String,
    pub seed: u64,
    pub config_digest: String,
}

/// The learned artifact: RGB values plus the shape mask that gates insertion.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    /// Channel-major `3 x m x m`.
    pub rgb: Vec<f64>,
    pub mask: ShapeMask,
    pub spec: PatchSpec,
    pub meta: PromptMeta,
}

impl Prompt {
    pub fn size(&self) -> usize {
        self.spec.size
    }

    /// RGBA raster with alpha taken from the mask.
    pub fn to_rgba8(&self) -> image::RgbaImage {
        let m = self.spec.size;
        image::RgbaImage::from_fn(m as u32, m as u32, |x, y| {
            let (r, c) = (y as usize, x as usize);
            let px = |ch: usize| (self.rgb[(ch * m + r) * m + c] * 255.0).round() as u8;
            let alpha = if self.mask.is_set(r, c) { 255 } else { 0 };
            image::Rgba([px(0), px(1), px(2), alpha])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgba8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::image(path, e))
    }
}

pub fn compose_prompt(rgb: Vec<f64>, mask: ShapeMask, spec: PatchSpec) -> Result<Prompt> {
    spec.validate()?;
    let m = spec.size;
    if mask.size() != m {
        return Err(Error::Contract(format!(
            "mask is {s}x{s} but the patch is {m}x{m}",
            s = mask.size()
        )));
    }
    if rgb.len() != 3 * m * m {
        return Err(Error::Contract(format!(
            "prompt has {} values, expected 3*{m}*{m}",
            rgb.len()
        )));
    }
    if let Some(v) = rgb.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Contract(format!("prompt value {v} outside [0, 1]")));
    }
    Ok(Prompt {
        rgb,
        mask,
        spec,
        meta: PromptMeta::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{insert_patch, make_shape_mask, ImageTensor, PixelLocation, ShapeKind};

    #[test]
    fn init_is_deterministic() {
        let (a, na) = init_prior(0, 32).unwrap();
        let (b, nb) = init_prior(0, 32).unwrap();
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
        let flat = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(flat(na.tensor()), flat(nb.tensor()));
        let (c, _) = init_prior(1, 32).unwrap();
        assert_ne!(a.checksum().unwrap(), c.checksum().unwrap());
    }

    #[test]
    fn strict_init_rejects_non_multiples_of_eight() {
        assert!(matches!(init_prior(0, 12), Err(Error::InvalidSpec(_))));
        assert!(matches!(init_prior(0, 4), Err(Error::InvalidSpec(_))));
        let (net, noise) = init_prior_for_patch(0, 42).unwrap();
        assert_eq!(net.padded_size(), 48);
        assert_eq!(prior_forward(&net, &noise).unwrap().len(), 3 * 42 * 42);
    }

    #[test]
    fn forward_stays_in_unit_range_and_is_pure() {
        for m in [8usize, 16, 32] {
            let (net, noise) = init_prior(3, m).unwrap();
            let a = prior_forward(&net, &noise).unwrap();
            let b = prior_forward(&net, &noise).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 3 * m * m);
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        // drive the head bias far out: the sigmoid must still clamp to [0, 1]
        let (net, noise) = init_prior(3, 16).unwrap();
        let (_, bias) = net.parameters().iter().find(|(n, _)| n == "head.bias").unwrap();
        bias.set(&Tensor::from_vec(vec![80.0, -80.0, 0.0], 3, &nn::device()).unwrap()).unwrap();
        let out = prior_forward(&net, &noise).unwrap();
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn noise_size_mismatch_is_contract_error() {
        let (net, _) = init_prior(0, 16).unwrap();
        let other = PriorNoise::sample(0, 32).unwrap();
        assert!(matches!(net.forward_tensor(&other), Err(Error::Contract(_))));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let (net, noise) = init_prior(5, 16).unwrap();
        let probe: Vec<f64> = (0..3 * 16 * 16).map(|k| ((k * 37 % 101) as f64 / 50.0) - 1.0).collect();
        let probe_t = Tensor::from_vec(probe.clone(), (3, 16, 16), &nn::device()).unwrap();
        let objective = |net: &PriorNetwork| -> f64 {
            let out = net.forward_tensor(&noise).unwrap();
            (out * &probe_t).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let loss = (net.forward_tensor(&noise).unwrap() * &probe_t).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let eps = 1e-4;
        for (pi, (name, var)) in net.parameters().iter().enumerate().step_by(3) {
            let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let k = (pi * 7919) % g.len();
            let orig = var.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let bump = |delta: f64| {
                let mut v = orig.clone();
                v[k] += delta;
                var.set(&Tensor::from_vec(v, var.shape(), &nn::device()).unwrap()).unwrap();
                let f = objective(&net);
                var.set(&Tensor::from_vec(orig.clone(), var.shape(), &nn::device()).unwrap()).unwrap();
                f
            };
            let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
            let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-8);
            assert!(rel < 1e-3, "{name}[{k}]: fd {fd} analytic {}", g[k]);
        }
    }

    #[test]
    fn composed_prompt_gates_insertion() {
        let spec = PatchSpec::new(8, ShapeKind::HollowCircle, 0.5).unwrap();
        let mask = make_shape_mask(&spec).unwrap();
        let rgb = vec![1.0; 3 * 64];
        let prompt = compose_prompt(rgb.clone(), mask.clone(), spec).unwrap();
        let img = ImageTensor::filled(32, 0.0).unwrap();
        let loc = PixelLocation::new(16, 16);
        let out = insert_patch(&img, &prompt.rgb, &prompt.mask, loc).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                let in_win = (12..20).contains(&r) && (12..20).contains(&c);
                let gated = in_win && mask.is_set(r - 12, c - 12);
                assert_eq!(out.get(1, r, c), if gated { 1.0 } else { 0.0 });
            }
        }
        let blank = compose_prompt(rgb.clone(), ShapeMask::zeros(8), spec).unwrap();
        assert_eq!(insert_patch(&img, &blank.rgb, &blank.mask, loc).unwrap(), img);
        assert!(compose_prompt(rgb, ShapeMask::ones(4), spec).is_err());
    }
}
