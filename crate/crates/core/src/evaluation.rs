//! Prompt effectiveness metrics and the baseline image transforms.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{query_attention_mean, AttentionTrace, VisionEncoder};
use crate::error::{Error, Result};
use crate::geometry::{insert_patch, overlaid_token_indices, ring_mask, sample_valid_location, valid_center_range, ImageTensor, PixelLocation, ShapeKind};
use crate::prior::Prompt;

/// Images per encoder call when sweeping many placements.
const EVAL_BATCH: usize = 32;

/// Relative attention gain per layer (index 0 is layer 1). `None` marks an
/// undefined gain: the original attention on the overlaid tokens was zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainProfile {
    pub loc: PixelLocation,
    pub tokens: Vec<usize>,
    pub original: Vec<f64>,
    pub prompted: Vec<f64>,
    pub gains: Vec<Option<f64>>,
}

impl GainProfile {
    pub fn final_gain(&self) -> Option<f64> {
        self.gains.last().copied().flatten()
    }
}

/// `(prompted - original) / original`, undefined when `original` is not positive.
pub fn relative_gain(original: f64, prompted: f64) -> Option<f64> {
    (original > 0.0).then(|| (prompted - original) / original)
}

/// Mean query attention over the given spatial token indices at 1-based `layer`.
pub fn overlaid_attention(trace: &AttentionTrace, layer: usize, tokens: &[usize]) -> Result<f64> {
    let row = query_attention_mean(trace, layer)?;
    let spatial = row.spatial();
    if tokens.is_empty() || tokens.iter().any(|&t| t >= spatial.len()) {
        return Err(Error::Contract("overlaid token set is empty or out of range".into()));
    }
    Ok(tokens.iter().map(|&t| spatial[t]).sum::<f64>() / tokens.len() as f64)
}

pub fn gain_profile_from_traces(
    original: &AttentionTrace,
    prompted: &AttentionTrace,
    loc: PixelLocation,
    tokens: &[usize],
) -> Result<GainProfile> {
    let layers = original.shape().0;
    if prompted.shape() != original.shape() {
        return Err(Error::Contract("traces differ in shape".into()));
    }
    let mut o = Vec::with_capacity(layers);
    let mut p = Vec::with_capacity(layers);
    for l in 1..=layers {
        o.push(overlaid_attention(original, l, tokens)?);
        p.push(overlaid_attention(prompted, l, tokens)?);
    }
    let gains = o.iter().zip(&p).map(|(a, b)| relative_gain(*a, *b)).collect();
    Ok(GainProfile {
        loc,
        tokens: tokens.to_vec(),
        original: o,
        prompted: p,
        gains,
    })
}

fn tokens_for<E: VisionEncoder + ?Sized>(encoder: &E, loc: PixelLocation, m: usize) -> Vec<usize> {
    let cfg = encoder.config();
    overlaid_token_indices(loc, m, cfg.tile, cfg.tokens_per_side())
}

pub fn attention_gain_profile<E: VisionEncoder + ?Sized>(
    encoder: &E,
    image: &ImageTensor,
    prompt: &Prompt,
    loc: PixelLocation,
) -> Result<GainProfile> {
    let prompted = insert_patch(image, &prompt.rgb, &prompt.mask, loc)?;
    let out = encoder.forward_batch(&[image, &prompted])?;
    gain_profile_from_traces(&out[0].trace, &out[1].trace, loc, &tokens_for(encoder, loc, prompt.size()))
}

/// Gain profiles for many placements, batched through the encoder.
pub fn gain_profiles_at<E: VisionEncoder + ?Sized>(
    encoder: &E,
    prompt: &Prompt,
    images: &[ImageTensor],
    placements: &[Placement],
) -> Result<Vec<GainProfile>> {
    let mut out = Vec::with_capacity(placements.len());
    for chunk in placements.chunks(EVAL_BATCH / 2) {
        let prompted = prompted_images(prompt, images, chunk)?;
        let mut batch: Vec<&ImageTensor> = chunk.iter().map(|p| &images[p.image_index]).collect();
        batch.extend(prompted.iter());
        let res = encoder.forward_batch(&batch)?;
        let (orig, prom) = res.split_at(chunk.len());
        for ((pl, a), b) in chunk.iter().zip(orig).zip(prom) {
            let tokens = tokens_for(encoder, pl.loc, prompt.size());
            out.push(gain_profile_from_traces(&a.trace, &b.trace, pl.loc, &tokens)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub image_index: usize,
    pub loc: PixelLocation,
}

/// `trials` placements: a uniformly chosen image and a uniformly valid location each.
pub fn sample_placements<R: Rng + ?Sized>(
    num_images: usize,
    n: usize,
    m: usize,
    trials: usize,
    rng: &mut R,
) -> Result<Vec<Placement>> {
    if num_images == 0 {
        return Err(Error::Configuration("no images to place prompts on".into()));
    }
    valid_center_range(n, m)?;
    (0..trials)
        .map(|_| {
            let image_index = rng.random_range(0..num_images);
            Ok(Placement {
                image_index,
                loc: sample_valid_location(n, m, rng)?,
            })
        })
        .collect()
}

fn prompted_images(prompt: &Prompt, images: &[ImageTensor], placements: &[Placement]) -> Result<Vec<ImageTensor>> {
    placements
        .iter()
        .map(|p| {
            let img = images
                .get(p.image_index)
                .ok_or_else(|| Error::Contract(format!("placement refers to missing image {}", p.image_index)))?;
            insert_patch(img, &prompt.rgb, &prompt.mask, p.loc)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitRate {
    pub rate: f64,
    /// Same statistic on the unprompted images at the same placements.
    pub base_rate: f64,
    pub trials: usize,
}

fn spatial_argmax(trace: &AttentionTrace) -> Result<usize> {
    let row = query_attention_mean(trace, trace.shape().0)?;
    let mut best = 0;
    for (k, v) in row.spatial().iter().enumerate() {
        if *v > row.spatial()[best] {
            best = k;
        }
    }
    Ok(best)
}

/// Fraction of placements where the final-layer query attention peaks on a
/// token under the prompt.
pub fn argmax_hit_rate<E: VisionEncoder + ?Sized, R: Rng + ?Sized>(
    encoder: &E,
    prompt: &Prompt,
    images: &[ImageTensor],
    trials: usize,
    rng: &mut R,
) -> Result<HitRate> {
    if trials == 0 {
        return Err(Error::Configuration("hit rate needs at least one trial".into()));
    }
    let placements = sample_placements(images.len(), encoder.config().image_size, prompt.size(), trials, rng)?;
    argmax_hit_rate_at(encoder, prompt, images, &placements)
}

pub fn argmax_hit_rate_at<E: VisionEncoder + ?Sized>(
    encoder: &E,
    prompt: &Prompt,
    images: &[ImageTensor],
    placements: &[Placement],
) -> Result<HitRate> {
    if placements.is_empty() {
        return Err(Error::Configuration("hit rate needs at least one trial".into()));
    }
    let (mut hits, mut base_hits) = (0usize, 0usize);
    for chunk in placements.chunks(EVAL_BATCH / 2) {
        let prompted = prompted_images(prompt, images, chunk)?;
        let mut batch: Vec<&ImageTensor> = chunk.iter().map(|p| &images[p.image_index]).collect();
        batch.extend(prompted.iter());
        let res = encoder.forward_batch(&batch)?;
        let (orig, prom) = res.split_at(chunk.len());
        for ((pl, a), b) in chunk.iter().zip(orig).zip(prom) {
            let tokens = tokens_for(encoder, pl.loc, prompt.size());
            base_hits += usize::from(tokens.contains(&spatial_argmax(&a.trace)?));
            hits += usize::from(tokens.contains(&spatial_argmax(&b.trace)?));
        }
    }
    let t = placements.len() as f64;
    Ok(HitRate {
        rate: hits as f64 / t,
        base_rate: base_hits as f64 / t,
        trials: placements.len(),
    })
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn full(n: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height: n,
            width: n,
        }
    }

    pub fn check(&self, n: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.top + self.height > n || self.left + self.width > n {
            return Err(Error::Contract(format!("region {self:?} does not fit a {n}px image")));
        }
        Ok(())
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.top..self.top + self.height).contains(&r) && (self.left..self.left + self.width).contains(&c)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Zero out everything outside the region.
    Crop,
    /// 5x5 box blur outside the region.
    Blur,
    /// Circle outline drawn inside the region.
    RedCircle,
    /// Move the region to a uniformly random position, then apply `inner`.
    RandomLoc(Box<BaselineKind>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    pub color: [f64; 3],
    /// Outline diameter; defaults to the region's shorter side.
    pub diameter: Option<usize>,
    pub thickness_ratio: f64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            color: [1.0, 0.0, 0.0],
            diameter: None,
            thickness_ratio: 0.75,
        }
    }
}

const BLUR_RADIUS: usize = 2;

fn box_blur_at(image: &ImageTensor, c: usize, r: usize, col: usize) -> f64 {
    let n = image.size() as isize;
    let clamp = |v: isize| v.clamp(0, n - 1) as usize;
    let k = BLUR_RADIUS as isize;
    // averaging offsets from the center value keeps flat regions bit-exact
    let center = image.get(c, r, col);
    let mut acc = 0.0;
    for dr in -k..=k {
        for dc in -k..=k {
            acc += image.get(c, clamp(r as isize + dr), clamp(col as isize + dc)) - center;
        }
    }
    center + acc / ((2 * k + 1) * (2 * k + 1)) as f64
}

/// Circle outline over `image`, sharing the hollow-circle mask rasterization.
pub fn red_circle_prompt(image: &ImageTensor, region: Region, params: &BaselineParams) -> Result<ImageTensor> {
    let n = image.size();
    region.check(n)?;
    let d = params.diameter.unwrap_or(region.height.min(region.width));
    if d == 0 || d > region.height || d > region.width {
        return Err(Error::Contract(format!("circle diameter {d} does not fit region {region:?}")));
    }
    if !(0.0..1.0).contains(&params.thickness_ratio) || params.color.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Contract("circle thickness must lie in [0, 1) and color in [0, 1]".into()));
    }
    let ring = ring_mask(d, ShapeKind::HollowCircle, params.thickness_ratio);
    let r0 = region.top + (region.height - d) / 2;
    let c0 = region.left + (region.width - d) / 2;
    let mut data = image.data().to_vec();
    for r in 0..d {
        for c in 0..d {
            if ring.is_set(r, c) {
                for (ch, v) in params.color.iter().enumerate() {
                    data[(ch * n + r0 + r) * n + c0 + c] = *v;
                }
            }
        }
    }
    ImageTensor::new(n, data)
}

pub fn baseline_transform<R: Rng + ?Sized>(
    image: &ImageTensor,
    kind: &BaselineKind,
    region: Region,
    params: &BaselineParams,
    rng: &mut R,
) -> Result<ImageTensor> {
    let n = image.size();
    region.check(n)?;
    match kind {
        BaselineKind::Crop => ImageTensor::from_fn(n, |c, r, col| {
            if region.contains(r, col) {
                image.get(c, r, col)
            } else {
                0.0
            }
        }),
        BaselineKind::Blur => ImageTensor::from_fn(n, |c, r, col| {
            if region.contains(r, col) {
                image.get(c, r, col)
            } else {
                box_blur_at(image, c, r, col)
            }
        }),
        BaselineKind::RedCircle => red_circle_prompt(image, region, params),
        BaselineKind::RandomLoc(inner) => {
            let moved = Region {
                top: rng.random_range(0..=n - region.height),
                left: rng.random_range(0..=n - region.width),
                ..region
            };
            baseline_transform(image, inner, moved, params, rng)
        }
    }
}

/// Applies a baseline over the `m x m` window at each placement and reports
/// the same gain and hit statistics as for a learned prompt.
pub fn baseline_effect_at<E: VisionEncoder + ?Sized, R: Rng + ?Sized>(
    encoder: &E,
    images: &[ImageTensor],
    placements: &[Placement],
    m: usize,
    kind: &BaselineKind,
    params: &BaselineParams,
    rng: &mut R,
) -> Result<(Vec<GainProfile>, HitRate)> {
    if placements.is_empty() {
        return Err(Error::Configuration("baseline evaluation needs at least one trial".into()));
    }
    let n = encoder.config().image_size;
    let (mut profiles, mut hits, mut base_hits) = (Vec::with_capacity(placements.len()), 0usize, 0usize);
    for chunk in placements.chunks(EVAL_BATCH / 2) {
        let mut originals = Vec::with_capacity(chunk.len());
        let mut altered = Vec::with_capacity(chunk.len());
        for p in chunk {
            let img = images
                .get(p.image_index)
                .ok_or_else(|| Error::Contract(format!("placement refers to missing image {}", p.image_index)))?;
            p.loc.check(n, m)?;
            let (top, left) = p.loc.origin(m);
            let region = Region {
                top,
                left,
                height: m,
                width: m,
            };
            originals.push(img);
            altered.push(baseline_transform(img, kind, region, params, rng)?);
        }
        let mut batch = originals;
        batch.extend(altered.iter());
        let res = encoder.forward_batch(&batch)?;
        let (orig, alt) = res.split_at(chunk.len());
        for ((pl, a), b) in chunk.iter().zip(orig).zip(alt) {
            let tokens = tokens_for(encoder, pl.loc, m);
            base_hits += usize::from(tokens.contains(&spatial_argmax(&a.trace)?));
            hits += usize::from(tokens.contains(&spatial_argmax(&b.trace)?));
            profiles.push(gain_profile_from_traces(&a.trace, &b.trace, pl.loc, &tokens)?);
        }
    }
    let t = placements.len() as f64;
    Ok((
        profiles,
        HitRate {
            rate: hits as f64 / t,
            base_rate: base_hits as f64 / t,
            trials: placements.len(),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointAnnotation {
    pub image_id: String,
    pub part: String,
    pub loc: PixelLocation,
    pub visible: bool,
}

/// Label name to unit-norm embedding, names kept sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbeddingTable {
    names: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl LabelEmbeddingTable {
    pub fn new(entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut dim = None;
        for (name, v) in entries {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::Contract(format!("label '{name}' has norm {norm}, expected 1")));
            }
            if *dim.get_or_insert(v.len()) != v.len() {
                return Err(Error::Contract(format!("label '{name}' has a different dimension")));
            }
            if map.insert(name.clone(), v).is_some() {
                return Err(Error::Contract(format!("label '{name}' appears twice")));
            }
        }
        if map.is_empty() {
            return Err(Error::Contract("label table is empty".into()));
        }
        let (names, vectors) = map.into_iter().unzip();
        Ok(Self { names, vectors })
    }

    /// Reads a safetensors file holding one 1-D tensor per label name.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = safetensors::SafeTensors::deserialize(&bytes)?;
        let mut entries = Vec::new();
        for (name, view) in st.tensors() {
            let v: Vec<f64> = match view.dtype() {
                safetensors::Dtype::F32 => view
                    .data()
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                safetensors::Dtype::F64 => view
                    .data()
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                other => {
                    return Err(Error::Load {
                        path: path.to_path_buf(),
                        reason: format!("label '{name}' has unsupported dtype {other:?}"),
                    })
                }
            };
            entries.push((name, v));
        }
        Self::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let blobs: Vec<(String, Vec<u8>)> = self
            .names
            .iter()
            .zip(&self.vectors)
            .map(|(k, v)| (k.clone(), v.iter().flat_map(|x| x.to_le_bytes()).collect()))
            .collect();
        let views = blobs
            .iter()
            .map(|(k, b)| {
                safetensors::tensor::TensorView::new(safetensors::Dtype::F64, vec![b.len() / 8], b).map(|v| (k.clone(), v))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        std::fs::write(path, safetensors::serialize(views, None)?).map_err(|e| Error::io(path, e))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.names
            .binary_search_by(|n| n.as_str().cmp(name))
            .ok()
            .map(|k| self.vectors[k].as_slice())
    }

    /// Label with the highest inner product; ties go to the first name.
    pub fn best_match(&self, unit: &[f64]) -> &str {
        let mut best = (f64::NEG_INFINITY, 0);
        for (k, v) in self.vectors.iter().enumerate() {
            let s: f64 = v.iter().zip(unit).map(|(a, b)| a * b).sum();
            if s > best.0 {
                best = (s, k);
            }
        }
        &self.names[best.1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointAccuracy {
    pub accuracy: f64,
    pub correct: usize,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Top-1 part naming: insert the prompt at each keypoint, embed, and pick the
/// closest label by cosine similarity.
pub fn keypoint_naming_accuracy<E: VisionEncoder + ?Sized>(
    encoder: &E,
    prompt: &Prompt,
    images: &HashMap<String, ImageTensor>,
    annotations: &[KeypointAnnotation],
    labels: &LabelEmbeddingTable,
) -> Result<KeypointAccuracy> {
    let n = encoder.config().image_size;
    let m = prompt.size();
    let mut jobs = Vec::new();
    let mut skipped = 0;
    for a in annotations {
        if labels.get(&a.part).is_none() {
            return Err(Error::Contract(format!("part '{}' has no label embedding", a.part)));
        }
        match images.get(&a.image_id) {
            Some(img) if a.visible && a.loc.is_valid(n, m) => jobs.push((img, a)),
            Some(_) => skipped += 1,
            None => return Err(Error::Contract(format!("annotation refers to unknown image '{}'", a.image_id))),
        }
    }
    if skipped > 0 {
        log::info!("skipped {skipped} keypoints that are hidden or too close to the border");
    }
    if jobs.is_empty() {
        return Err(Error::Dataset("no evaluable keypoint annotations".into()));
    }
    let mut correct = 0;
    for chunk in jobs.chunks(EVAL_BATCH) {
        let prompted = chunk
            .iter()
            .map(|(img, a)| insert_patch(img, &prompt.rgb, &prompt.mask, a.loc))
            .collect::<Result<Vec<_>>>()?;
        let outs = encoder.forward_batch(&prompted.iter().collect::<Vec<_>>())?;
        for ((_, a), out) in chunk.iter().zip(outs) {
            if out.embedding.len() != labels.dim() {
                return Err(Error::Contract(format!(
                    "encoder embeds into {} dims but labels have {}",
                    out.embedding.len(),
                    labels.dim()
                )));
            }
            let norm = out.embedding.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let unit: Vec<f64> = out.embedding.iter().map(|x| x / norm).collect();
            correct += usize::from(labels.best_match(&unit) == a.part);
        }
    }
    Ok(KeypointAccuracy {
        accuracy: correct as f64 / jobs.len() as f64,
        correct,
        evaluated: jobs.len(),
        skipped,
    })
}

/// One line of an annotation file: a keypoint `(i, j)` or a box `x0,y0,x1,y1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_path: PathBuf,
    pub part_or_expression: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y1: Option<f64>,
    #[serde(default = "default_visible")]
    pub visible: bool,
}

fn default_visible() -> bool {
    true
}

impl AnnotationRecord {
    /// Source-pixel `(row, col)` anchor: the keypoint, or the box center.
    pub fn anchor(&self) -> Result<(f64, f64)> {
        match (self.i, self.j, self.x0, self.y0, self.x1, self.y1) {
            (Some(i), Some(j), _, _, _, _) => Ok((i, j)),
            (None, None, Some(x0), Some(y0), Some(x1), Some(y1)) => Ok(((y0 + y1) / 2.0, (x0 + x1) / 2.0)),
            _ => Err(Error::Dataset(format!(
                "annotation for {} needs either i, j or x0, y0, x1, y1",
                self.image_path.display()
            ))),
        }
    }

    pub fn is_box(&self) -> bool {
        self.i.is_none() && self.x0.is_some()
    }

    /// Placement in an `n`px image resized by `scale`. Boxes are clipped to the
    /// valid interior; keypoints are kept as-is (validity checked later).
    pub fn placement(&self, scale: (f64, f64), n: usize, m: usize) -> Result<PixelLocation> {
        let (r, c) = self.anchor()?;
        let (r, c) = ((r * scale.0).round().max(0.0) as usize, (c * scale.1).round().max(0.0) as usize);
        if self.is_box() {
            let (lo, hi) = valid_center_range(n, m)?;
            return Ok(PixelLocation::new(r.clamp(lo, hi), c.clamp(lo, hi)));
        }
        Ok(PixelLocation::new(r, c))
    }
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), k + 1)))?;
        rec.anchor()?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub key: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(metric: &str, key: impl ToString, value: f64) -> Self {
        Self {
            metric: metric.to_string(),
            key: key.to_string(),
            value,
        }
    }
}

/// CSV with header `metric,layer_or_label,value`; undefined values are written as `nan`.
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("metric,layer_or_label,value\n");
    for r in rows {
        text.push_str(&format!("{},{},{}\n", r.metric, r.key, r.value));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
