//! Small differentiable building blocks composed from primitive tensor ops,
//! so every piece has a backward pass.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;

pub(crate) const DTYPE: DType = DType::F64;

pub(crate) fn device() -> Device {
    Device::Cpu
}

/// Logistic function via `tanh`, which stays finite under backprop for large inputs.
pub(crate) fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

pub(crate) fn quick_gelu(x: &Tensor) -> Result<Tensor> {
    Ok((x * sigmoid(&(x * 1.702)?)?)?)
}

/// Softmax over the last dimension; the shift is detached since it cancels.
pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let shift = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&shift)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub(crate) fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(weight)?.broadcast_add(bias)?)
}

/// `x @ w^T + b` for `x` of shape `(.., in)` and `w` of shape `(out, in)`.
pub(crate) fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let inner = *dims.last().expect("linear input has a last dim");
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let flat = x.reshape((rows, inner))?;
    let mut y = flat.matmul(&weight.t()?)?;
    if let Some(b) = bias {
        y = y.broadcast_add(b)?;
    }
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = weight.dim(0)?;
    Ok(y.reshape(out_dims)?)
}

pub(crate) fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let k = weight.dim(2)?;
    let y = x.conv2d(weight, k / 2, stride, 1, 1)?;
    Ok(y.broadcast_add(&bias.reshape((1, bias.dim(0)?, 1, 1))?)?)
}

/// Nearest-neighbour 2x upsampling of `(b, c, h, w)` written as a broadcast.
pub(crate) fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

pub(crate) fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    let count: usize = shape.iter().product();
    let dist = Uniform::new(lo, hi).expect("valid uniform range");
    let data: Vec<f64> = (0..count).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, &device())?)
}

pub(crate) fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Result<Tensor> {
    let count: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("valid normal std");
    let data: Vec<f64> = (0..count).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, &device())?)
}

/// Hex SHA-256 over named tensors in the given order (name, shape and f64 bytes).
pub(crate) fn tensor_checksum<'a>(items: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for (name, t) in items {
        hasher.update(name.as_bytes());
        for d in t.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in t.flatten_all()?.to_dtype(DTYPE)?.to_vec1::<f64>()? {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;

    fn fd_check(f: impl Fn(&Tensor) -> Result<Tensor>, x0: Vec<f64>) {
        let n = x0.len();
        let var = Var::from_vec(x0.clone(), n, &device()).unwrap();
        let y = f(var.as_tensor()).unwrap().sum_all().unwrap();
        let grads = y.backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        let eps = 1e-6;
        for k in 0..n {
            let eval = |delta: f64| {
                let mut x = x0.clone();
                x[k] += delta;
                let t = Tensor::from_vec(x, n, &device()).unwrap();
                f(&t).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            assert!((fd - g[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "k {k}: fd {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn primitives_have_correct_gradients() {
        let x = vec![-30.0, -1.5, -0.2, 0.0, 0.4, 2.0, 40.0];
        fd_check(|t| sigmoid(t), x.clone());
        fd_check(|t| quick_gelu(t), x.clone());
        let weights = Tensor::from_vec((0..7).map(|v| v as f64).collect::<Vec<_>>(), 7, &device()).unwrap();
        fd_check(|t| Ok((softmax_last(&t.reshape((1, 7))?)?.reshape(7)? * &weights)?), x.clone());
        let w = Tensor::from_vec(vec![0.5, -1.0, 2.0, 1.5, 0.3, -0.7, 1.1], 7, &device()).unwrap();
        let b = Tensor::zeros(7, DTYPE, &device()).unwrap();
        fd_check(|t| Ok((layer_norm(&t.reshape((1, 7))?, &w, &b, 1e-5)?.reshape(7)? * &weights)?), vec![0.1, -0.3, 0.8, 1.2, -2.0, 0.05, 0.7]);
    }

    #[test]
    fn conv_and_upsample_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        use rand::SeedableRng;
        let w = normal_tensor(&mut rng, &[2, 1, 3, 3], 0.5).unwrap();
        let b = normal_tensor(&mut rng, &[2], 0.5).unwrap();
        let probe = normal_tensor(&mut rng, &[1, 2, 4, 4], 1.0).unwrap();
        let x0: Vec<f64> = normal_tensor(&mut rng, &[64], 1.0).unwrap().to_vec1().unwrap();
        let probe_up = normal_tensor(&mut rng, &[1, 2, 8, 8], 1.0).unwrap();
        fd_check(
            |t| {
                let img = t.reshape((1, 1, 8, 8))?;
                let y = conv2d(&img, &w, &b, 2)?;
                let z = (y.silu()? * &probe)?;
                Ok(z.flatten_all()?)
            },
            x0.clone(),
        );
        fd_check(
            |t| {
                let img = t.reshape((1, 1, 8, 8))?.narrow(2, 0, 4)?.narrow(3, 0, 4)?.contiguous()?;
                let y = upsample2x(&conv2d(&img, &w, &b, 1)?)?;
                Ok((y * &probe_up)?.flatten_all()?)
            },
            x0,
        );
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], (1, 1, 2, 2), &device()).unwrap();
        let y = upsample2x(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(
            y,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }
}
