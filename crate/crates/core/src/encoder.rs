//! Frozen vision transformers that expose full attention traces.
//!
//! One table-driven ViT implementation serves every supported weight layout:
//! the bundled toy model plus CLIP-style, DINOv2-style and SigLIP-style
//! (attention-pooling head, no class token) checkpoints. Weights are plain
//! tensors, never variables, so gradients can flow *through* an encoder but
//! never *into* it.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{stack_images, ImageTensor, PixelLocation};
use crate::nn;
use crate::target::{gaussian_target_map, target_query_row, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderFamily {
    Toy,
    Clip,
    Dinov2,
    Siglip,
}

impl std::str::FromStr for EncoderFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "clip" => Ok(Self::Clip),
            "dinov2" => Ok(Self::Dinov2),
            "siglip" => Ok(Self::Siglip),
            other => Err(Error::Configuration(format!(
                "unknown encoder adapter '{other}' (expected toy, clip, dinov2 or siglip)"
            ))),
        }
    }
}

impl std::fmt::Display for EncoderFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Toy => "toy",
            Self::Clip => "clip",
            Self::Dinov2 => "dinov2",
            Self::Siglip => "siglip",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub tile: usize,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub mlp_hidden: usize,
    pub has_query_slot: bool,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// 64px input, 8px tiles, 4 layers, 4 heads, width 64, class token.
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            tile: 8,
            layers: 4,
            heads: 4,
            width: 64,
            mlp_hidden: 256,
            has_query_slot: true,
            // pixel statistics of the bundled synthetic images
            mean: [0.35; 3],
            std: [0.16; 3],
            layer_norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile == 0 || self.image_size % self.tile != 0 {
            return Err(Error::Configuration(format!(
                "image size {} is not divisible by tile size {}",
                self.image_size, self.tile
            )));
        }
        if self.image_size / self.tile < 2 {
            return Err(Error::Configuration("encoder needs at least 2 tokens per side".into()));
        }
        if self.layers == 0 || self.heads == 0 || self.width == 0 || self.mlp_hidden == 0 {
            return Err(Error::Configuration(
                "layers, heads, width and mlp_hidden must all be at least 1".into(),
            ));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Configuration(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Configuration("normalization std must be positive".into()));
        }
        Ok(())
    }

    pub fn tokens_per_side(&self) -> usize {
        self.image_size / self.tile
    }

    pub fn num_patches(&self) -> usize {
        self.tokens_per_side().pow(2)
    }

    /// Query offset: 1 when a class token leads the sequence.
    pub fn query_offset(&self) -> usize {
        usize::from(self.has_query_slot)
    }

    pub fn sequence_len(&self) -> usize {
        self.num_patches() + self.query_offset()
    }

    pub fn grid(&self) -> Result<TokenGrid> {
        TokenGrid::for_image(self.image_size, self.tile)
    }
}

/// Post-softmax attention of every head in every layer for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    layers: usize,
    heads: usize,
    seq_len: usize,
    has_query_slot: bool,
    data: Vec<f64>,
    /// Attention-pooling weights `(heads, num_patches)` for pooling-head encoders.
    pooling: Option<Vec<f64>>,
}

impl AttentionTrace {
    pub fn new(
        layers: usize,
        heads: usize,
        seq_len: usize,
        has_query_slot: bool,
        data: Vec<f64>,
        pooling: Option<Vec<f64>>,
    ) -> Result<Self> {
        if data.len() != layers * heads * seq_len * seq_len {
            return Err(Error::Contract(format!(
                "trace buffer has {} values, expected {layers}x{heads}x{seq_len}x{seq_len}",
                data.len()
            )));
        }
        if let Some(p) = &pooling {
            let patches = seq_len - usize::from(has_query_slot);
            if p.len() != heads * patches {
                return Err(Error::Contract("pooling attention has the wrong size".into()));
            }
        }
        Ok(Self {
            layers,
            heads,
            seq_len,
            has_query_slot,
            data,
            pooling,
        })
    }

    /// `(layers, heads, seq_len, seq_len)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.layers, self.heads, self.seq_len, self.seq_len)
    }

    pub fn has_query_slot(&self) -> bool {
        self.has_query_slot
    }

    /// Attention row `row` of head `head` in 1-based layer `layer`.
    pub fn row(&self, layer: usize, head: usize, row: usize) -> &[f64] {
        let s = self.seq_len;
        let start = (((layer - 1) * self.heads + head) * s + row) * s;
        &self.data[start..start + s]
    }

    pub fn pooling_row(&self, head: usize) -> Option<&[f64]> {
        let patches = self.seq_len - usize::from(self.has_query_slot);
        self.pooling
            .as_ref()
            .map(|p| &p[head * patches..(head + 1) * patches])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Head-averaged query attention at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryAttentionRow {
    pub layer: usize,
    pub row: Vec<f64>,
    /// Number of leading non-spatial slots (the class token).
    pub query_offset: usize,
}

impl QueryAttentionRow {
    pub fn spatial(&self) -> &[f64] {
        &self.row[self.query_offset..]
    }
}

/// Mean over heads of the query row at 1-based `layer`.
///
/// With a class token the query row is the token's own row. Pooling-head
/// encoders use their pooling weights at the last layer and, for earlier
/// layers that have no query, the mean of all rows.
pub fn query_attention_mean(trace: &AttentionTrace, layer: usize) -> Result<QueryAttentionRow> {
    if layer == 0 || layer > trace.layers {
        return Err(Error::Contract(format!(
            "layer {layer} outside 1..={}",
            trace.layers
        )));
    }
    let h = trace.heads as f64;
    let row = if trace.has_query_slot {
        let mut acc = vec![0.0; trace.seq_len];
        for head in 0..trace.heads {
            for (a, v) in acc.iter_mut().zip(trace.row(layer, head, 0)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= h);
        acc
    } else if layer == trace.layers && trace.pooling.is_some() {
        let patches = trace.seq_len;
        let mut acc = vec![0.0; patches];
        for head in 0..trace.heads {
            for (a, v) in acc.iter_mut().zip(trace.pooling_row(head).unwrap()) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= h);
        acc
    } else {
        let s = trace.seq_len;
        let mut acc = vec![0.0; s];
        for head in 0..trace.heads {
            for r in 0..s {
                for (a, v) in acc.iter_mut().zip(trace.row(layer, head, r)) {
                    *a += v;
                }
            }
        }
        let denom = h * s as f64;
        acc.iter_mut().for_each(|a| *a /= denom);
        acc
    };
    Ok(QueryAttentionRow {
        layer,
        row,
        query_offset: usize::from(trace.has_query_slot),
    })
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub embedding: Vec<f64>,
    pub trace: AttentionTrace,
}

pub trait VisionEncoder: Send + Sync {
    fn id(&self) -> &str;

    fn config(&self) -> &EncoderConfig;

    /// Embeds a display-space image (values in `[0, 1]`); the encoder applies
    /// its own channel normalization.
    fn forward_with_attention(&self, image: &ImageTensor) -> Result<EncoderOutput>;

    fn forward_batch(&self, images: &[&ImageTensor]) -> Result<Vec<EncoderOutput>> {
        images.iter().map(|im| self.forward_with_attention(im)).collect()
    }

    /// Hex digest of every parameter; constant for a frozen encoder.
    fn parameter_checksum(&self) -> Result<String>;
}

pub trait DifferentiableEncoder: VisionEncoder {
    /// Head-averaged query rows `(b, seq)` at 1-based `layer` for display-space
    /// pixels `(b, 3, n, n)`, differentiable with respect to the pixels.
    fn query_attention(&self, pixels: &Tensor, layer: usize) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activation {
    GeluTanh,
    GeluErf,
    QuickGelu,
}

impl Activation {
    fn apply(self, x: &Tensor) -> Result<Tensor> {
        match self {
            Activation::GeluTanh => Ok(x.gelu()?),
            Activation::GeluErf => Ok(x.gelu_erf()?),
            Activation::QuickGelu => nn::quick_gelu(x),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum AttnNames {
    Separate {
        q: &'static str,
        k: &'static str,
        v: &'static str,
        out: &'static str,
    },
    Fused {
        qkv: &'static str,
        out: &'static str,
    },
}

/// Tensor names of one family. `{}` in block names is the layer index; names
/// without a suffix get `.weight` / `.bias` appended.
#[derive(Debug, Clone, Copy)]
struct Layout {
    patch: &'static str,
    patch_bias: bool,
    cls: Option<&'static str>,
    pos: &'static str,
    pre_norm: Option<&'static str>,
    block: &'static str,
    norm1: &'static str,
    attn: AttnNames,
    norm2: &'static str,
    fc1: &'static str,
    fc2: &'static str,
    layer_scale: Option<(&'static str, &'static str)>,
    final_norm: Option<&'static str>,
    cls_norm: Option<&'static str>,
    projection: Option<&'static str>,
    pool: Option<PoolNames>,
    activation: Activation,
    eps: f64,
    mean: [f64; 3],
    std: [f64; 3],
}

#[derive(Debug, Clone, Copy)]
struct PoolNames {
    probe: &'static str,
    in_proj_weight: &'static str,
    in_proj_bias: &'static str,
    out_proj: &'static str,
    norm: &'static str,
    fc1: &'static str,
    fc2: &'static str,
}

const CLIP_MEAN: [f64; 3] = [0.48145466, 0.4578275, 0.40821073];
const CLIP_STD: [f64; 3] = [0.26862954, 0.26130258, 0.27577711];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

fn layout(family: EncoderFamily) -> Layout {
    match family {
        EncoderFamily::Toy => Layout {
            patch: "patch_embed",
            patch_bias: true,
            cls: Some("cls_token"),
            pos: "pos_embed",
            pre_norm: None,
            block: "blocks.{}.",
            norm1: "norm1",
            attn: AttnNames::Separate {
                q: "attn.q",
                k: "attn.k",
                v: "attn.v",
                out: "attn.proj",
            },
            norm2: "norm2",
            fc1: "mlp.fc1",
            fc2: "mlp.fc2",
            layer_scale: None,
            final_norm: Some("norm"),
            cls_norm: None,
            projection: None,
            pool: None,
            activation: Activation::GeluTanh,
            eps: 1e-5,
            mean: [0.35; 3],
            std: [0.16; 3],
        },
        EncoderFamily::Clip => Layout {
            patch: "vision_model.embeddings.patch_embedding",
            patch_bias: false,
            cls: Some("vision_model.embeddings.class_embedding"),
            pos: "vision_model.embeddings.position_embedding.weight",
            pre_norm: Some("vision_model.pre_layrnorm"),
            block: "vision_model.encoder.layers.{}.",
            norm1: "layer_norm1",
            attn: AttnNames::Separate {
                q: "self_attn.q_proj",
                k: "self_attn.k_proj",
                v: "self_attn.v_proj",
                out: "self_attn.out_proj",
            },
            norm2: "layer_norm2",
            fc1: "mlp.fc1",
            fc2: "mlp.fc2",
            layer_scale: None,
            final_norm: None,
            cls_norm: Some("vision_model.post_layernorm"),
            projection: Some("visual_projection.weight"),
            pool: None,
            activation: Activation::QuickGelu,
            eps: 1e-5,
            mean: CLIP_MEAN,
            std: CLIP_STD,
        },
        EncoderFamily::Dinov2 => Layout {
            patch: "patch_embed.proj",
            patch_bias: true,
            cls: Some("cls_token"),
            pos: "pos_embed",
            pre_norm: None,
            block: "blocks.{}.",
            norm1: "norm1",
            attn: AttnNames::Fused {
                qkv: "attn.qkv",
                out: "attn.proj",
            },
            norm2: "norm2",
            fc1: "mlp.fc1",
            fc2: "mlp.fc2",
            layer_scale: Some(("ls1.gamma", "ls2.gamma")),
            final_norm: Some("norm"),
            cls_norm: None,
            projection: None,
            pool: None,
            activation: Activation::GeluErf,
            eps: 1e-6,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        },
        EncoderFamily::Siglip => Layout {
            patch: "vision_model.embeddings.patch_embedding",
            patch_bias: true,
            cls: None,
            pos: "vision_model.embeddings.position_embedding.weight",
            pre_norm: None,
            block: "vision_model.encoder.layers.{}.",
            norm1: "layer_norm1",
            attn: AttnNames::Separate {
                q: "self_attn.q_proj",
                k: "self_attn.k_proj",
                v: "self_attn.v_proj",
                out: "self_attn.out_proj",
            },
            norm2: "layer_norm2",
            fc1: "mlp.fc1",
            fc2: "mlp.fc2",
            layer_scale: None,
            final_norm: Some("vision_model.post_layernorm"),
            cls_norm: None,
            projection: None,
            pool: Some(PoolNames {
                probe: "vision_model.head.probe",
                in_proj_weight: "vision_model.head.attention.in_proj_weight",
                in_proj_bias: "vision_model.head.attention.in_proj_bias",
                out_proj: "vision_model.head.attention.out_proj",
                norm: "vision_model.head.layernorm",
                fc1: "vision_model.head.mlp.fc1",
                fc2: "vision_model.head.mlp.fc2",
            }),
            activation: Activation::GeluTanh,
            eps: 1e-6,
            mean: [0.5; 3],
            std: [0.5; 3],
        },
    }
}

/// Every tensor name `family` requires for an `layers`-deep model, paired with its role.
pub fn adapter_layout(family: EncoderFamily, layers: usize) -> Vec<(String, &'static str)> {
    let lay = layout(family);
    let mut out = Vec::new();
    let wb = |base: String, role: &'static str, bias: bool, out: &mut Vec<(String, &'static str)>| {
        out.push((format!("{base}.weight"), role));
        if bias {
            out.push((format!("{base}.bias"), role));
        }
    };
    if lay.patch.ends_with(".weight") {
        out.push((lay.patch.to_string(), "patch embedding"));
    } else {
        wb(lay.patch.to_string(), "patch embedding", lay.patch_bias, &mut out);
    }
    if let Some(cls) = lay.cls {
        out.push((cls.to_string(), "class token"));
    }
    out.push((lay.pos.to_string(), "position embedding"));
    if let Some(p) = lay.pre_norm {
        wb(p.to_string(), "pre-encoder layer norm", true, &mut out);
    }
    for l in 0..layers {
        let pre = lay.block.replace("{}", &l.to_string());
        wb(format!("{pre}{}", lay.norm1), "attention layer norm", true, &mut out);
        match lay.attn {
            AttnNames::Separate { q, k, v, out: o } => {
                wb(format!("{pre}{q}"), "query projection", true, &mut out);
                wb(format!("{pre}{k}"), "key projection", true, &mut out);
                wb(format!("{pre}{v}"), "value projection", true, &mut out);
                wb(format!("{pre}{o}"), "attention output projection", true, &mut out);
            }
            AttnNames::Fused { qkv, out: o } => {
                wb(format!("{pre}{qkv}"), "fused query/key/value projection", true, &mut out);
                wb(format!("{pre}{o}"), "attention output projection", true, &mut out);
            }
        }
        wb(format!("{pre}{}", lay.norm2), "mlp layer norm", true, &mut out);
        wb(format!("{pre}{}", lay.fc1), "mlp input", true, &mut out);
        wb(format!("{pre}{}", lay.fc2), "mlp output", true, &mut out);
        if let Some((a, b)) = lay.layer_scale {
            out.push((format!("{pre}{a}"), "attention layer scale"));
            out.push((format!("{pre}{b}"), "mlp layer scale"));
        }
    }
    if let Some(f) = lay.final_norm {
        wb(f.to_string(), "final layer norm", true, &mut out);
    }
    if let Some(f) = lay.cls_norm {
        wb(f.to_string(), "class token layer norm", true, &mut out);
    }
    if let Some(p) = lay.pool {
        out.push((p.probe.to_string(), "pooling probe"));
        out.push((p.in_proj_weight.to_string(), "pooling query/key/value projection"));
        out.push((p.in_proj_bias.to_string(), "pooling query/key/value projection"));
        wb(p.out_proj.to_string(), "pooling output projection", true, &mut out);
        wb(p.norm.to_string(), "pooling layer norm", true, &mut out);
        wb(p.fc1.to_string(), "pooling mlp input", true, &mut out);
        wb(p.fc2.to_string(), "pooling mlp output", true, &mut out);
    }
    out
}

#[derive(Debug, Clone)]
struct Norm {
    weight: Tensor,
    bias: Tensor,
}

#[derive(Debug, Clone)]
struct Proj {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Proj {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        nn::linear(x, &self.weight, self.bias.as_ref())
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: Norm,
    q: Proj,
    k: Proj,
    v: Proj,
    out: Proj,
    norm2: Norm,
    fc1: Proj,
    fc2: Proj,
    layer_scale: Option<(Tensor, Tensor)>,
}

#[derive(Debug, Clone)]
struct PoolHead {
    probe: Tensor,
    q: Proj,
    k: Proj,
    v: Proj,
    out: Proj,
    norm: Norm,
    fc1: Proj,
    fc2: Proj,
}

/// Vision transformer with frozen weights.
#[derive(Debug, Clone)]
pub struct VitEncoder {
    id: String,
    family: EncoderFamily,
    config: EncoderConfig,
    activation: Activation,
    named: BTreeMap<String, Tensor>,
    mean: Tensor,
    std: Tensor,
    patch: Proj,
    /// Patch kernel side: the tile, or twice the tile for overlapping windows.
    kernel: usize,
    cls: Option<Tensor>,
    pos: Tensor,
    pre_norm: Option<Norm>,
    blocks: Vec<Block>,
    final_norm: Option<Norm>,
    cls_norm: Option<Norm>,
    projection: Option<Tensor>,
    pool: Option<PoolHead>,
}

struct Fetch<'a> {
    tensors: &'a HashMap<String, Tensor>,
    missing: Vec<String>,
    used: BTreeMap<String, Tensor>,
}

impl<'a> Fetch<'a> {
    fn get(&mut self, name: &str) -> Option<Tensor> {
        match self.tensors.get(name) {
            Some(t) => {
                self.used.insert(name.to_string(), t.clone());
                Some(t.clone())
            }
            None => {
                self.missing.push(name.to_string());
                None
            }
        }
    }

    fn norm(&mut self, base: &str) -> Option<Norm> {
        let w = self.get(&format!("{base}.weight"));
        let b = self.get(&format!("{base}.bias"));
        Some(Norm {
            weight: w?,
            bias: b?,
        })
    }

    fn proj(&mut self, base: &str, bias: bool) -> Option<Proj> {
        let w = self.get(&format!("{base}.weight"));
        let b = if bias {
            Some(self.get(&format!("{base}.bias")))
        } else {
            None
        };
        Some(Proj {
            weight: w?,
            bias: match b {
                Some(b) => Some(b?),
                None => None,
            },
        })
    }
}

fn split_rows(name: &str, t: &Tensor, width: usize) -> Result<[Tensor; 3]> {
    if t.dim(0)? != 3 * width {
        return Err(Error::Contract(format!(
            "{name} has {} rows, expected 3*{width}",
            t.dim(0)?
        )));
    }
    Ok([
        t.narrow(0, 0, width)?,
        t.narrow(0, width, width)?,
        t.narrow(0, 2 * width, width)?,
    ])
}

fn expect_shape(name: &str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.dims() != shape {
        return Err(Error::Contract(format!(
            "{name} has shape {:?}, expected {shape:?}",
            t.dims()
        )));
    }
    Ok(())
}

fn count_layers(lay: &Layout, tensors: &HashMap<String, Tensor>) -> usize {
    let mut l = 0;
    loop {
        let pre = lay.block.replace("{}", &l.to_string());
        if !tensors.keys().any(|k| k.starts_with(&pre)) {
            return l;
        }
        l += 1;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredEncoderMeta {
    family: EncoderFamily,
    heads: usize,
    #[serde(default)]
    config: Option<EncoderConfig>,
}

const ENCODER_META_KEY: &str = "promptsteer.encoder";

impl VitEncoder {
    /// Assembles an encoder from named tensors in `family`'s layout.
    fn assemble(
        family: EncoderFamily,
        tensors: &HashMap<String, Tensor>,
        heads: usize,
        overrides: Option<&EncoderConfig>,
        origin: &Path,
    ) -> Result<Self> {
        let lay = layout(family);
        let layers = count_layers(&lay, tensors).max(1);
        let mut f = Fetch {
            tensors,
            missing: Vec::new(),
            used: BTreeMap::new(),
        };
        let patch_w = if lay.patch.ends_with(".weight") {
            f.get(lay.patch)
        } else {
            f.get(&format!("{}.weight", lay.patch))
        };
        let patch_b = if lay.patch_bias {
            f.get(&format!("{}.bias", lay.patch))
        } else {
            None
        };
        let cls = lay.cls.map(|c| f.get(c));
        let pos = f.get(lay.pos);
        let pre_norm = lay.pre_norm.map(|p| f.norm(p));
        let mut raw_blocks = Vec::with_capacity(layers);
        for l in 0..layers {
            let pre = lay.block.replace("{}", &l.to_string());
            let norm1 = f.norm(&format!("{pre}{}", lay.norm1));
            let attn = match lay.attn {
                AttnNames::Separate { q, k, v, out } => (
                    None,
                    [
                        f.proj(&format!("{pre}{q}"), true),
                        f.proj(&format!("{pre}{k}"), true),
                        f.proj(&format!("{pre}{v}"), true),
                    ],
                    f.proj(&format!("{pre}{out}"), true),
                ),
                AttnNames::Fused { qkv, out } => (
                    Some((format!("{pre}{qkv}"), f.proj(&format!("{pre}{qkv}"), true))),
                    [None, None, None],
                    f.proj(&format!("{pre}{out}"), true),
                ),
            };
            let norm2 = f.norm(&format!("{pre}{}", lay.norm2));
            let fc1 = f.proj(&format!("{pre}{}", lay.fc1), true);
            let fc2 = f.proj(&format!("{pre}{}", lay.fc2), true);
            let ls = lay
                .layer_scale
                .map(|(a, b)| (f.get(&format!("{pre}{a}")), f.get(&format!("{pre}{b}"))));
            raw_blocks.push((norm1, attn, norm2, fc1, fc2, ls));
        }
        let final_norm = lay.final_norm.map(|n| f.norm(n));
        let cls_norm = lay.cls_norm.map(|n| f.norm(n));
        let projection = lay
            .projection
            .and_then(|p| tensors.get(p).cloned())
            .inspect(|t| {
                f.used.insert(lay.projection.unwrap().to_string(), t.clone());
            });
        let pool_raw = lay.pool.map(|p| {
            (
                f.get(p.probe),
                f.get(p.in_proj_weight),
                f.get(p.in_proj_bias),
                f.proj(p.out_proj, true),
                f.norm(p.norm),
                f.proj(p.fc1, true),
                f.proj(p.fc2, true),
            )
        });

        if !f.missing.is_empty() {
            return Err(Error::MissingTensors {
                path: origin.to_path_buf(),
                missing: f.missing,
            });
        }
        let named = f.used;

        let patch_w = patch_w.unwrap();
        let (width, in_ch, kernel, kernel_w) = patch_w.dims4()?;
        let tile = overrides.map_or(kernel, |o| o.tile);
        if in_ch != 3 || kernel != kernel_w || (kernel != tile && kernel != 2 * tile) || tile % 2 != 0 && kernel != tile {
            return Err(Error::Contract(format!(
                "patch embedding must be (d, 3, k, k) with k = p or k = 2p, got {:?} for p = {tile}",
                patch_w.dims()
            )));
        }
        let pos = pos.unwrap();
        let pos = pos.reshape(((), width))?;
        let seq = pos.dim(0)?;
        let has_cls = lay.cls.is_some();
        let patches = seq - usize::from(has_cls);
        let t = (patches as f64).sqrt().round() as usize;
        if t * t != patches {
            return Err(Error::Contract(format!(
                "{} holds {patches} patch positions, which is not a square grid",
                lay.pos
            )));
        }
        let mlp_hidden = match &raw_blocks[0].3 {
            Some(p) => p.weight.dim(0)?,
            None => unreachable!(),
        };
        let mut config = EncoderConfig {
            image_size: t * tile,
            tile,
            layers,
            heads,
            width,
            mlp_hidden,
            has_query_slot: has_cls,
            mean: lay.mean,
            std: lay.std,
            layer_norm_eps: lay.eps,
        };
        if let Some(o) = overrides {
            config.mean = o.mean;
            config.std = o.std;
            config.layer_norm_eps = o.layer_norm_eps;
        }
        config.validate()?;

        let dev = nn::device();
        let to64 = |t: Tensor| -> Result<Tensor> { Ok(t.to_dtype(nn::DTYPE)?) };
        let patch = Proj {
            weight: to64(patch_w.reshape((width, 3 * kernel * kernel))?)?,
            bias: patch_b.map(to64).transpose()?,
        };
        let cls = match cls {
            Some(c) => Some(to64(c.unwrap().reshape(width)?)?),
            None => None,
        };
        let norm64 = |n: Norm| -> Result<Norm> {
            expect_shape("layer norm", &n.weight, &[width])?;
            Ok(Norm {
                weight: to64(n.weight)?,
                bias: to64(n.bias)?,
            })
        };
        let proj64 = |name: &str, p: Proj, rows: usize, cols: usize| -> Result<Proj> {
            expect_shape(name, &p.weight, &[rows, cols])?;
            Ok(Proj {
                weight: to64(p.weight)?,
                bias: p.bias.map(to64).transpose()?,
            })
        };
        let mut blocks = Vec::with_capacity(layers);
        for (norm1, attn, norm2, fc1, fc2, ls) in raw_blocks {
            let (fused, sep, out) = attn;
            let [q, k, v] = match fused {
                Some((name, p)) => {
                    let p = p.unwrap();
                    let [qw, kw, vw] = split_rows(&name, &p.weight, width)?;
                    let [qb, kb, vb] = split_rows(&name, p.bias.as_ref().unwrap(), width)?;
                    [
                        Proj { weight: qw, bias: Some(qb) },
                        Proj { weight: kw, bias: Some(kb) },
                        Proj { weight: vw, bias: Some(vb) },
                    ]
                }
                None => sep.map(|p| p.unwrap()),
            };
            blocks.push(Block {
                norm1: norm64(norm1.unwrap())?,
                q: proj64("query projection", q, width, width)?,
                k: proj64("key projection", k, width, width)?,
                v: proj64("value projection", v, width, width)?,
                out: proj64("attention output", out.unwrap(), width, width)?,
                norm2: norm64(norm2.unwrap())?,
                fc1: proj64("mlp input", fc1.unwrap(), mlp_hidden, width)?,
                fc2: proj64("mlp output", fc2.unwrap(), width, mlp_hidden)?,
                layer_scale: match ls {
                    Some((a, b)) => Some((to64(a.unwrap().reshape(width)?)?, to64(b.unwrap().reshape(width)?)?)),
                    None => None,
                },
            });
        }
        let pool = match pool_raw {
            Some((probe, in_w, in_b, out, norm, fc1, fc2)) => {
                let in_w = in_w.unwrap();
                let in_b = in_b.unwrap();
                let [qw, kw, vw] = split_rows("pooling in_proj_weight", &in_w, width)?;
                let [qb, kb, vb] = split_rows("pooling in_proj_bias", &in_b, width)?;
                let fc1 = fc1.unwrap();
                let hidden = fc1.weight.dim(0)?;
                Some(PoolHead {
                    probe: to64(probe.unwrap().reshape((1, 1, width))?)?,
                    q: Proj { weight: to64(qw)?, bias: Some(to64(qb)?) },
                    k: Proj { weight: to64(kw)?, bias: Some(to64(kb)?) },
                    v: Proj { weight: to64(vw)?, bias: Some(to64(vb)?) },
                    out: proj64("pooling output", out.unwrap(), width, width)?,
                    norm: norm64(norm.unwrap())?,
                    fc1: proj64("pooling mlp input", fc1, hidden, width)?,
                    fc2: proj64("pooling mlp output", fc2.unwrap(), width, hidden)?,
                })
            }
            None => None,
        };
        let mean = Tensor::from_slice(&config.mean, (1, 3, 1, 1), &dev)?;
        let std = Tensor::from_slice(&config.std, (1, 3, 1, 1), &dev)?;
        let id_digest = nn::tensor_checksum(named.iter().map(|(k, v)| (k.as_str(), v)))?;
        Ok(Self {
            id: format!("{family}:{}", &id_digest[..12]),
            family,
            activation: lay.activation,
            named,
            mean,
            std,
            patch,
            kernel,
            cls,
            pos: to64(pos)?,
            pre_norm: pre_norm.map(|n| norm64(n.unwrap())).transpose()?,
            blocks,
            final_norm: final_norm.map(|n| norm64(n.unwrap())).transpose()?,
            cls_norm: cls_norm.map(|n| norm64(n.unwrap())).transpose()?,
            projection: projection.map(to64).transpose()?,
            pool,
            config,
        })
    }

    pub fn family(&self) -> EncoderFamily {
        self.family
    }

    /// Parameters under their layout names.
    pub fn named_parameters(&self) -> &BTreeMap<String, Tensor> {
        &self.named
    }

    /// Writes the weights in their own layout, with enough metadata to reload them.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let meta = StoredEncoderMeta {
            family: self.family,
            heads: self.config.heads,
            config: Some(self.config.clone()),
        };
        let mut info = HashMap::new();
        info.insert(ENCODER_META_KEY.to_string(), serde_json::to_string(&meta)?);
        let blobs: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .named
            .iter()
            .map(|(k, t)| -> Result<_> {
                let vals = t.flatten_all()?.to_dtype(nn::DTYPE)?.to_vec1::<f64>()?;
                let bytes = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
                Ok((k.clone(), t.dims().to_vec(), bytes))
            })
            .collect::<Result<_>>()?;
        let views = blobs
            .iter()
            .map(|(k, shape, bytes)| {
                safetensors::tensor::TensorView::new(safetensors::Dtype::F64, shape.clone(), bytes)
                    .map(|v| (k.clone(), v))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let buf = safetensors::serialize(views, Some(info))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    fn embed_tokens(&self, pixels: &Tensor) -> Result<Tensor> {
        let (b, c, n, w) = pixels.dims4()?;
        let cfg = &self.config;
        if c != 3 || n != cfg.image_size || w != cfg.image_size {
            return Err(Error::Contract(format!(
                "encoder expects (b, 3, {n}, {n}) input, got {:?}",
                pixels.dims(),
                n = cfg.image_size
            )));
        }
        let (t, p) = (cfg.tokens_per_side(), cfg.tile);
        let x = pixels.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        let x = if self.kernel == p {
            x.reshape((b, 3, t, p, t, p))?
        } else {
            // windows of 2x2 tiles over an image padded by half a tile, so
            // each window is centered on its own tile
            let x = x.pad_with_zeros(2, p / 2, p / 2)?.pad_with_zeros(3, p / 2, p / 2)?;
            let x = x.reshape((b, 3, t + 1, p, t + 1, p))?;
            let x = Tensor::cat(&[x.narrow(2, 0, t)?, x.narrow(2, 1, t)?], 3)?;
            Tensor::cat(&[x.narrow(4, 0, t)?, x.narrow(4, 1, t)?], 5)?
        };
        let k = self.kernel;
        let x = x
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, t * t, 3 * k * k))?;
        let mut x = self.patch.apply(&x)?;
        if let Some(cls) = &self.cls {
            let d = cfg.width;
            let cls = cls.reshape((1, 1, d))?.broadcast_as((b, 1, d))?;
            x = Tensor::cat(&[&cls, &x], 1)?;
        }
        let mut x = x.broadcast_add(&self.pos.unsqueeze(0)?)?;
        if let Some(n) = &self.pre_norm {
            x = nn::layer_norm(&x, &n.weight, &n.bias, cfg.layer_norm_eps)?;
        }
        Ok(x)
    }

    fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
        let heads = self.config.heads;
        let split = |x: &Tensor| -> Result<Tensor> {
            let (b, s, d) = x.dims3()?;
            Ok(x.reshape((b, s, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
        };
        let (q, k, v) = (split(q)?, split(k)?, split(v)?);
        let dh = q.dim(3)?;
        let logits = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        let probs = nn::softmax_last(&logits)?;
        let out = probs.matmul(&v)?.transpose(1, 2)?.contiguous()?;
        let (b, s, _, _) = out.dims4()?;
        Ok((out.reshape((b, s, self.config.width))?, probs))
    }

    fn block_forward(&self, block: &Block, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let eps = self.config.layer_norm_eps;
        let h = nn::layer_norm(x, &block.norm1.weight, &block.norm1.bias, eps)?;
        let (a, probs) = self.attend(&block.q.apply(&h)?, &block.k.apply(&h)?, &block.v.apply(&h)?)?;
        let mut a = block.out.apply(&a)?;
        if let Some((ls1, _)) = &block.layer_scale {
            a = a.broadcast_mul(ls1)?;
        }
        let x = (x + a)?;
        let h = nn::layer_norm(&x, &block.norm2.weight, &block.norm2.bias, eps)?;
        let mut m = block.fc2.apply(&self.activation.apply(&block.fc1.apply(&h)?)?)?;
        if let Some((_, ls2)) = &block.layer_scale {
            m = m.broadcast_mul(ls2)?;
        }
        Ok(((x + m)?, probs))
    }

    /// Runs the network. Attention probabilities `(b, h, s, s)` are collected
    /// for layers `1..=keep_until`; the head runs only when `with_head` is set.
    fn run(&self, pixels: &Tensor, keep_until: usize, with_head: bool) -> Result<RunOutput> {
        let mut x = self.embed_tokens(pixels)?;
        let mut attn = Vec::with_capacity(keep_until);
        for (l, block) in self.blocks.iter().enumerate() {
            if !with_head && l >= keep_until {
                break;
            }
            let (next, probs) = self.block_forward(block, &x)?;
            if l < keep_until {
                attn.push(probs);
            }
            x = next;
        }
        if !with_head {
            return Ok(RunOutput {
                attn,
                pooling: None,
                embedding: None,
            });
        }
        let eps = self.config.layer_norm_eps;
        if let Some(n) = &self.final_norm {
            x = nn::layer_norm(&x, &n.weight, &n.bias, eps)?;
        }
        let (embedding, pooling) = match &self.pool {
            Some(head) => {
                let b = x.dim(0)?;
                let probe = head.probe.broadcast_as((b, 1, self.config.width))?;
                let (h, probs) = self.attend(&head.q.apply(&probe)?, &head.k.apply(&x)?, &head.v.apply(&x)?)?;
                let h = head.out.apply(&h)?;
                let normed = nn::layer_norm(&h, &head.norm.weight, &head.norm.bias, eps)?;
                let m = head.fc2.apply(&self.activation.apply(&head.fc1.apply(&normed)?)?)?;
                let pooled = (h + m)?.squeeze(1)?;
                (pooled, Some(probs.squeeze(2)?))
            }
            None => {
                let mut cls = x.narrow(1, 0, 1)?.squeeze(1)?;
                if let Some(n) = &self.cls_norm {
                    cls = nn::layer_norm(&cls, &n.weight, &n.bias, eps)?;
                }
                if let Some(p) = &self.projection {
                    cls = nn::linear(&cls, p, None)?;
                }
                (cls, None)
            }
        };
        Ok(RunOutput {
            attn,
            pooling,
            embedding: Some(embedding),
        })
    }

    fn outputs_from(&self, run: RunOutput) -> Result<Vec<EncoderOutput>> {
        let cfg = &self.config;
        let b = run.attn[0].dim(0)?;
        let s = cfg.sequence_len();
        let embedding = run.embedding.expect("head ran").to_vec2::<f64>()?;
        let layers: Vec<Vec<f64>> = run
            .attn
            .iter()
            .map(|a| a.flatten_all().and_then(|t| t.to_vec1::<f64>()))
            .collect::<std::result::Result<_, _>>()?;
        let pooling = run
            .pooling
            .map(|p| p.flatten_all().and_then(|t| t.to_vec1::<f64>()))
            .transpose()?;
        let per_layer = cfg.heads * s * s;
        let per_pool = cfg.heads * cfg.num_patches();
        (0..b)
            .map(|k| {
                let mut data = Vec::with_capacity(cfg.layers * per_layer);
                for l in &layers {
                    data.extend_from_slice(&l[k * per_layer..(k + 1) * per_layer]);
                }
                let pool = pooling.as_ref().map(|p| p[k * per_pool..(k + 1) * per_pool].to_vec());
                Ok(EncoderOutput {
                    embedding: embedding[k].clone(),
                    trace: AttentionTrace::new(cfg.layers, cfg.heads, s, cfg.has_query_slot, data, pool)?,
                })
            })
            .collect()
    }

    /// Copy of this encoder with its weights briefly trained so the last-layer
    /// query attention lands on a known object (bright squares in the bundled
    /// synthetic data). `self` is left untouched.
    pub fn warm_up_localization(
        &self,
        images: &[ImageTensor],
        centers: &[(PixelLocation, usize)],
        steps: usize,
        batch_size: usize,
        learning_rate: f64,
        seed: u64,
    ) -> Result<VitEncoder> {
        use candle_nn::Optimizer;
        if images.is_empty() || images.len() != centers.len() {
            return Err(Error::Configuration("warm-up needs one center per image".into()));
        }
        let vars: BTreeMap<String, Var> = self
            .named
            .iter()
            .map(|(k, t)| Ok((k.clone(), Var::from_tensor(t)?)))
            .collect::<Result<_>>()?;
        let live: HashMap<String, Tensor> = vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
        let model = VitEncoder::assemble(self.family, &live, self.config.heads, Some(&self.config), Path::new("<warm-up>"))?;
        let mut opt = candle_nn::AdamW::new(
            vars.values().cloned().collect(),
            candle_nn::ParamsAdamW {
                lr: learning_rate,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let grid = self.config.grid()?;
        let layer = self.config.layers;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut cursor = order.len();
        for _ in 0..steps {
            let mut picks = Vec::with_capacity(batch_size);
            while picks.len() < batch_size.min(images.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                picks.push(order[cursor]);
                cursor += 1;
            }
            let batch = stack_images(&picks.iter().map(|&k| &images[k]).collect::<Vec<_>>())?;
            let mut targets = Vec::new();
            for &k in &picks {
                let (loc, side) = centers[k];
                let sigma = crate::target::sigma_from_patch(side as f64, grid.tile as f64)?;
                let map = gaussian_target_map(loc, grid, sigma)?;
                targets.extend(target_query_row(&map, self.config.has_query_slot));
            }
            let s = targets.len() / picks.len();
            let target = Tensor::from_vec(targets, (picks.len(), s), &nn::device())?;
            let pred = model.query_attention(&batch, layer)?;
            let log_pred = pred.maximum(1e-12)?.log()?;
            let loss = (target * log_pred)?.sum_all()?.neg()?.affine(1.0 / picks.len() as f64, 0.0)?;
            opt.backward_step(&loss)?;
        }
        let frozen: HashMap<String, Tensor> = vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect::<Result<_>>()?;
        VitEncoder::assemble(self.family, &frozen, self.config.heads, Some(&self.config), Path::new("<warm-up>"))
    }
}

struct RunOutput {
    attn: Vec<Tensor>,
    pooling: Option<Tensor>,
    embedding: Option<Tensor>,
}

impl VisionEncoder for VitEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn forward_with_attention(&self, image: &ImageTensor) -> Result<EncoderOutput> {
        let mut out = self.forward_batch(&[image])?;
        Ok(out.remove(0))
    }

    fn forward_batch(&self, images: &[&ImageTensor]) -> Result<Vec<EncoderOutput>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let pixels = stack_images(images)?;
        let run = self.run(&pixels, self.config.layers, true)?;
        self.outputs_from(run)
    }

    fn parameter_checksum(&self) -> Result<String> {
        nn::tensor_checksum(self.named.iter().map(|(k, v)| (k.as_str(), v)))
    }
}

impl DifferentiableEncoder for VitEncoder {
    fn query_attention(&self, pixels: &Tensor, layer: usize) -> Result<Tensor> {
        let cfg = &self.config;
        if layer == 0 || layer > cfg.layers {
            return Err(Error::Contract(format!("layer {layer} outside 1..={}", cfg.layers)));
        }
        if cfg.has_query_slot {
            let run = self.run(pixels, layer, false)?;
            let probs = &run.attn[layer - 1];
            return Ok(probs.narrow(2, 0, 1)?.squeeze(2)?.mean(1)?);
        }
        if layer == cfg.layers && self.pool.is_some() {
            let run = self.run(pixels, layer, true)?;
            return Ok(run.pooling.expect("pool head ran").mean(1)?);
        }
        let run = self.run(pixels, layer, false)?;
        Ok(run.attn[layer - 1].mean(2)?.mean(1)?)
    }
}

/// Low-frequency cosine terms per axis in the toy patch filters.
const TOY_FREQS: usize = 2;
/// Gain on the patch filters, so image content dominates the position embedding.
const TOY_PATCH_GAIN: f64 = 5.0;
/// Gain on the query and key projections.
const TOY_QK_GAIN: f64 = 1.75;
/// Gain on the residual branch outputs (attention and MLP projections).
const TOY_RESIDUAL_GAIN: f64 = 0.1;
const TOY_POS_STD: f64 = 0.1;

/// Random patch filters over a `2p x 2p` window: Gaussian combinations of the
/// lowest separable cosine terms under a Hann window. Neighbouring tokens
/// share pixels and respond smoothly to shifts, as pretrained patch filters do.
fn toy_patch_filters(rng: &mut ChaCha8Rng, d: usize, p: usize) -> Result<Tensor> {
    use std::f64::consts::PI;
    let k = 2 * p;
    let nf = TOY_FREQS;
    let coef = nn::normal_tensor(rng, &[d, 3, nf * nf], 1.0)?.to_vec3::<f64>()?;
    let axis = |f: usize, u: usize| {
        let x = (u as f64 + 0.5) / k as f64;
        (PI * f as f64 * x).cos() * (PI * x).sin().powi(2)
    };
    let scale = TOY_PATCH_GAIN / ((3 * k * k * nf * nf) as f64).sqrt();
    let mut w = Vec::with_capacity(d * 3 * k * k);
    for o in 0..d {
        for c in 0..3 {
            for y in 0..k {
                for x in 0..k {
                    let mut acc = 0.0;
                    for fy in 0..nf {
                        for fx in 0..nf {
                            acc += coef[o][c][fy * nf + fx] * axis(fy, y) * axis(fx, x);
                        }
                    }
                    w.push(acc * scale);
                }
            }
        }
    }
    Ok(Tensor::from_vec(w, (d, 3, k, k), &nn::device())?)
}

/// Randomly initialized toy ViT in the `toy` layout: overlapping patch
/// windows, fan-in scaled projections, zero biases and unit norms.
pub fn build_toy_vit(config: &EncoderConfig, seed: u64) -> Result<VitEncoder> {
    config.validate()?;
    if !config.has_query_slot {
        return Err(Error::Configuration("the toy ViT always has a class token".into()));
    }
    if config.tile % 2 != 0 {
        return Err(Error::Configuration("the toy ViT needs an even tile size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.width;
    let hidden = config.mlp_hidden;
    let dev = nn::device();
    let mut t: HashMap<String, Tensor> = HashMap::new();
    let fan = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    t.insert("patch_embed.weight".into(), toy_patch_filters(&mut rng, d, config.tile)?);
    t.insert("patch_embed.bias".into(), Tensor::zeros(d, nn::DTYPE, &dev)?);
    t.insert("cls_token".into(), nn::normal_tensor(&mut rng, &[d], 1.0)?);
    t.insert("pos_embed".into(), nn::normal_tensor(&mut rng, &[config.sequence_len(), d], TOY_POS_STD)?);
    let ones = Tensor::ones(d, nn::DTYPE, &dev)?;
    let zeros = Tensor::zeros(d, nn::DTYPE, &dev)?;
    for l in 0..config.layers {
        let pre = format!("blocks.{l}.");
        for norm in ["norm1", "norm2"] {
            t.insert(format!("{pre}{norm}.weight"), ones.clone());
            t.insert(format!("{pre}{norm}.bias"), zeros.clone());
        }
        for (proj, gain) in [
            ("attn.q", TOY_QK_GAIN),
            ("attn.k", TOY_QK_GAIN),
            ("attn.v", 1.0),
            ("attn.proj", TOY_RESIDUAL_GAIN),
        ] {
            t.insert(format!("{pre}{proj}.weight"), nn::normal_tensor(&mut rng, &[d, d], gain * fan(d))?);
            t.insert(format!("{pre}{proj}.bias"), zeros.clone());
        }
        t.insert(format!("{pre}mlp.fc1.weight"), nn::normal_tensor(&mut rng, &[hidden, d], fan(d))?);
        t.insert(format!("{pre}mlp.fc1.bias"), Tensor::zeros(hidden, nn::DTYPE, &dev)?);
        t.insert(
            format!("{pre}mlp.fc2.weight"),
            nn::normal_tensor(&mut rng, &[d, hidden], TOY_RESIDUAL_GAIN * fan(hidden))?,
        );
        t.insert(format!("{pre}mlp.fc2.bias"), zeros.clone());
    }
    t.insert("norm.weight".into(), ones);
    t.insert("norm.bias".into(), zeros);
    VitEncoder::assemble(EncoderFamily::Toy, &t, config.heads, Some(config), Path::new("<toy>"))
}

/// Where to find external weights and how to read them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderDescriptor {
    pub path: PathBuf,
    pub adapter: EncoderFamily,
    /// Required unless the file's metadata records the head count.
    #[serde(default)]
    pub heads: Option<usize>,
}

fn read_tensors(path: &Path, bytes: &[u8]) -> Result<(HashMap<String, Tensor>, Option<HashMap<String, String>>)> {
    let st = safetensors::SafeTensors::deserialize(bytes)?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)?;
    let dev = nn::device();
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        let shape = view.shape().to_vec();
        let data = view.data();
        let values: Vec<f64> = match view.dtype() {
            safetensors::Dtype::F64 => data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            safetensors::Dtype::F32 => data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            other => {
                return Err(Error::Load {
                    path: path.to_path_buf(),
                    reason: format!("tensor {name} has unsupported dtype {other:?}"),
                })
            }
        };
        out.insert(name, Tensor::from_vec(values, shape, &dev)?);
    }
    Ok((out, meta.metadata().clone()))
}

/// Loads a frozen encoder from a safetensors file in the adapter's layout.
pub fn load_external_encoder(descriptor: &EncoderDescriptor) -> Result<VitEncoder> {
    let path = &descriptor.path;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tensors, meta) = read_tensors(path, &bytes)?;
    let stored: Option<StoredEncoderMeta> = meta
        .as_ref()
        .and_then(|m| m.get(ENCODER_META_KEY))
        .map(|s| serde_json::from_str(s))
        .transpose()?;
    let heads = descriptor
        .heads
        .or(stored.as_ref().map(|s| s.heads))
        .or_else(|| meta.as_ref()?.get("num_heads")?.parse().ok())
        .ok_or_else(|| Error::Load {
            path: path.clone(),
            reason: "head count unknown: set `heads` in the encoder descriptor".into(),
        })?;
    let overrides = stored.as_ref().and_then(|s| {
        if s.family == descriptor.adapter {
            s.config.clone()
        } else {
            None
        }
    });
    VitEncoder::assemble(descriptor.adapter, &tensors, heads, overrides.as_ref(), path)
}
