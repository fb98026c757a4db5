//! Prompt checkpoints in the safetensors container.
//!
//! Keys: `prompt_rgb` (m, m, 3) f32, `mask` (m, m) u8, `prior_noise` f64,
//! `prior_params.<name>` f64 per prior tensor, and one metadata entry holding
//! a JSON record. The prompt is rebuilt from the stored prior on load, so a
//! restored prompt is bit-identical to the trained one; `prompt_rgb` is the
//! portable copy for other tools.

use std::collections::HashMap;
use std::path::Path;

use candle_core::Tensor;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{make_shape_mask, PatchSpec, ShapeKind, ShapeMask};
use crate::nn;
use crate::prior::{init_prior_for_patch, prior_forward, PriorNetwork, PriorNoise, Prompt, PromptMeta};

const META_KEY: &str = "promptsteer";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub encoder_id: String,
    pub patch_size: usize,
    pub shape: ShapeKind,
    pub thickness_ratio: f64,
    pub seed: u64,
    pub config_digest: String,
}

/// A restored checkpoint with the prior ready to resume from.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub prompt: Prompt,
    pub prior: PriorNetwork,
    pub noise: PriorNoise,
    pub digest: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn f64_bytes(t: &Tensor) -> Result<Vec<u8>> {
    Ok(t.flatten_all()?
        .to_dtype(nn::DTYPE)?
        .to_vec1::<f64>()?
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect())
}

/// Serializes a prompt with the prior and noise that generated it.
pub fn checkpoint_bytes(prompt: &Prompt, prior: &PriorNetwork, noise: &PriorNoise) -> Result<Vec<u8>> {
    let m = prompt.size();
    let hwc: Vec<u8> = (0..m * m)
        .flat_map(|p| (0..3).map(move |c| (c, p)))
        .flat_map(|(c, p)| (prompt.rgb[c * m * m + p] as f32).to_le_bytes())
        .collect();
    let mut blobs: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = vec![
        ("prompt_rgb".into(), Dtype::F32, vec![m, m, 3], hwc),
        ("mask".into(), Dtype::U8, vec![m, m], prompt.mask.bits().to_vec()),
        ("prior_noise".into(), Dtype::F64, noise.tensor().dims().to_vec(), f64_bytes(noise.tensor())?),
    ];
    for (name, var) in prior.parameters() {
        blobs.push((
            format!("prior_params.{name}"),
            Dtype::F64,
            var.dims().to_vec(),
            f64_bytes(var.as_tensor())?,
        ));
    }
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        encoder_id: prompt.meta.encoder_id.clone(),
        patch_size: m,
        shape: prompt.spec.shape,
        thickness_ratio: prompt.spec.thickness_ratio,
        seed: prompt.meta.seed,
        config_digest: prompt.meta.config_digest.clone(),
    };
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta)?)]);
    let views = blobs
        .iter()
        .map(|(k, dt, shape, bytes)| TensorView::new(*dt, shape.clone(), bytes).map(|v| (k.clone(), v)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(safetensors::serialize(views, Some(info))?)
}

/// Writes a checkpoint and returns the SHA-256 of the file contents.
pub fn save_checkpoint(path: &Path, prompt: &Prompt, prior: &PriorNetwork, noise: &PriorNoise) -> Result<String> {
    let bytes = checkpoint_bytes(prompt, prior, noise)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn load_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn tensor_f64(path: &Path, view: &TensorView<'_>) -> Result<Tensor> {
    if view.dtype() != Dtype::F64 {
        return Err(load_error(path, format!("expected f64 tensor, found {:?}", view.dtype())));
    }
    let values: Vec<f64> = view
        .data()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(values, view.shape().to_vec(), &nn::device())?)
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes)?;
    let (_, header) = SafeTensors::read_metadata(&bytes)?;
    let meta: CheckpointMeta = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| load_error(path, "metadata record missing"))
        .and_then(|s| Ok(serde_json::from_str(s)?))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(load_error(path, format!("unsupported format version {}", meta.format_version)));
    }
    let spec = PatchSpec::new(meta.patch_size, meta.shape, meta.thickness_ratio)?;

    let names: Vec<String> = st.names().into_iter().map(String::from).collect();
    let mut missing: Vec<String> = ["prompt_rgb", "mask", "prior_noise"]
        .iter()
        .filter(|k| !names.iter().any(|n| n == *k))
        .map(|k| k.to_string())
        .collect();
    let (prior, _) = init_prior_for_patch(meta.seed, meta.patch_size)?;
    for (name, _) in prior.parameters() {
        let key = format!("prior_params.{name}");
        if !names.contains(&key) {
            missing.push(key);
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingTensors {
            path: path.to_path_buf(),
            missing,
        });
    }

    let mask_view = st.tensor("mask")?;
    let mask = ShapeMask::from_bits(meta.patch_size, mask_view.data().to_vec())?;
    if mask != make_shape_mask(&spec)? {
        return Err(load_error(path, "stored mask does not match the recorded patch spec"));
    }
    let noise = PriorNoise::from_tensor(meta.seed, tensor_f64(path, &st.tensor("prior_noise")?)?)?;
    let values = prior
        .parameters()
        .iter()
        .map(|(name, _)| Ok((name.clone(), tensor_f64(path, &st.tensor(&format!("prior_params.{name}"))?)?)))
        .collect::<Result<Vec<_>>>()?;
    prior.load_parameters(&values)?;
    let rgb = prior_forward(&prior, &noise)?;

    let stored = st.tensor("prompt_rgb")?;
    let m = meta.patch_size;
    if stored.dtype() != Dtype::F32 || stored.shape() != [m, m, 3] {
        return Err(load_error(path, "prompt_rgb must be an (m, m, 3) f32 tensor"));
    }
    let hwc: Vec<f32> = stored
        .data()
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    for p in 0..m * m {
        for c in 0..3 {
            if (hwc[p * 3 + c] as f64 - rgb[c * m * m + p]).abs() > 1e-6 {
                return Err(load_error(path, "prompt_rgb disagrees with the stored prior"));
            }
        }
    }
    let prompt = Prompt {
        rgb,
        mask,
        spec,
        meta: PromptMeta {
            encoder_id: meta.encoder_id,
            seed: meta.seed,
            config_digest: meta.config_digest,
        },
    };
    Ok(LoadedCheckpoint {
        prompt,
        prior,
        noise,
        digest: sha256_hex(&bytes),
    })
}
