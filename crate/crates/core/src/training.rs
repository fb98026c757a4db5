//! The self-supervised loop: optimize the prior so that its prompt, pasted at
//! random places, pulls the frozen encoder's query attention onto itself.

use std::time::Instant;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_bytes, sha256_hex};
use crate::encoder::DifferentiableEncoder;
use crate::error::{Error, Result};
use crate::geometry::{insert_patch_batch, make_shape_mask, sample_valid_location, stack_images, ImageTensor, PatchSpec, PixelLocation, ShapeMask};
use crate::nn;
use crate::prior::{compose_prompt, init_prior_for_patch, prior_forward, PriorNetwork, PriorNoise, Prompt, PromptMeta};
use crate::target::{gaussian_target_map, sigma_from_patch, target_query_row, TokenGrid};

/// Stream of the training rng (shuffles and placements), distinct from the
/// prior's init and noise streams.
const TRAIN_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(target || predicted)`.
    #[default]
    TargetFirst,
    /// `KL(predicted || target)`, for ablation.
    PredictedFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub k_locations_per_image: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// 1-based; `None` means the last layer.
    pub loss_layer: Option<usize>,
    pub epsilon_clamp: f64,
    pub kl_direction: KlDirection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 10,
            k_locations_per_image: 1,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            adam_eps: 1e-8,
            seed: 0,
            loss_layer: None,
            epsilon_clamp: 1e-12,
            kl_direction: KlDirection::TargetFirst,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Configuration(format!("train.{what}")));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.k_locations_per_image == 0 {
            return bad("k_locations_per_image must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) || !(self.epsilon_clamp > 0.0) {
            return bad("weight_decay must be nonnegative and adam_eps, epsilon_clamp positive");
        }
        if self.loss_layer == Some(0) {
            return bad("loss_layer is 1-based");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

/// `KL(target || predicted)` in nats with `max(predicted, 1e-12)` inside the log.
pub fn kl_loss(target: &[f64], predicted: &[f64]) -> Result<f64> {
    kl_loss_with(target, predicted, 1e-12, KlDirection::TargetFirst)
}

pub fn kl_loss_with(target: &[f64], predicted: &[f64], eps: f64, direction: KlDirection) -> Result<f64> {
    if target.len() != predicted.len() {
        return Err(Error::Contract(format!(
            "distributions differ in length: {} vs {}",
            target.len(),
            predicted.len()
        )));
    }
    let (p, q) = match direction {
        KlDirection::TargetFirst => (target, predicted),
        KlDirection::PredictedFirst => (predicted, target),
    };
    Ok(p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b.max(eps)).ln())
        .sum())
}

/// Row-wise KL between constant targets and predictions, both `(rows, s)`.
fn kl_rows(target: &[f64], predicted: &Tensor, eps: f64, direction: KlDirection) -> Result<Tensor> {
    let (rows, s) = predicted.dims2()?;
    let dev = nn::device();
    let target_t = Tensor::from_slice(target, (rows, s), &dev)?;
    match direction {
        KlDirection::TargetFirst => {
            let entropy_term: Vec<f64> = target.iter().map(|&t| if t > 0.0 { t * t.ln() } else { 0.0 }).collect();
            let entropy_term = Tensor::from_vec(entropy_term, (rows, s), &dev)?;
            let cross = (&target_t * predicted.maximum(eps)?.log()?)?;
            Ok((entropy_term - cross)?.sum(1)?)
        }
        KlDirection::PredictedFirst => {
            let log_t: Vec<f64> = target.iter().map(|&t| t.max(eps).ln()).collect();
            let log_t = Tensor::from_vec(log_t, (rows, s), &dev)?;
            let diff = predicted.maximum(eps)?.log()?.broadcast_sub(&log_t)?;
            Ok((predicted * diff)?.sum(1)?)
        }
    }
}

/// Owns the prior and its optimizer for one training run.
pub struct PromptTrainer<'a, E: DifferentiableEncoder + ?Sized> {
    encoder: &'a E,
    spec: PatchSpec,
    mask: ShapeMask,
    config: TrainConfig,
    prior: PriorNetwork,
    noise: PriorNoise,
    optimizer: AdamW,
    layer: usize,
    grid: TokenGrid,
    sigma: f64,
}

impl<'a, E: DifferentiableEncoder + ?Sized> PromptTrainer<'a, E> {
    pub fn new(encoder: &'a E, spec: PatchSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let cfg = encoder.config();
        spec.validate_for_image(cfg.image_size)?;
        let layer = config.loss_layer.unwrap_or(cfg.layers);
        if layer > cfg.layers {
            return Err(Error::Configuration(format!(
                "train.loss_layer {layer} exceeds the encoder's {} layers",
                cfg.layers
            )));
        }
        let mask = make_shape_mask(&spec)?;
        let (prior, noise) = init_prior_for_patch(config.seed, spec.size)?;
        let optimizer = AdamW::new(
            prior.vars(),
            ParamsAdamW {
                lr: config.learning_rate,
                beta1: config.beta1,
                beta2: config.beta2,
                eps: config.adam_eps,
                weight_decay: config.weight_decay,
            },
        )?;
        let grid = cfg.grid()?;
        let sigma = sigma_from_patch(spec.size as f64, grid.tile as f64)?;
        Ok(Self {
            encoder,
            spec,
            mask,
            config,
            prior,
            noise,
            optimizer,
            layer,
            grid,
            sigma,
        })
    }

    pub fn prior(&self) -> &PriorNetwork {
        &self.prior
    }

    pub fn noise(&self) -> &PriorNoise {
        &self.noise
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Differentiable mean loss over every (image, location) pair.
    pub fn batch_loss(&self, images: &[&ImageTensor], locations: &[Vec<PixelLocation>]) -> Result<Tensor> {
        if images.is_empty() || images.len() != locations.len() {
            return Err(Error::Contract("need one location list per image".into()));
        }
        let mut rows = Vec::new();
        let mut locs = Vec::new();
        let mut targets = Vec::new();
        let has_slot = self.encoder.config().has_query_slot;
        for (img, ls) in images.iter().zip(locations) {
            for loc in ls {
                rows.push(*img);
                locs.push(*loc);
                let map = gaussian_target_map(*loc, self.grid, self.sigma)?;
                targets.extend(target_query_row(&map, has_slot));
            }
        }
        if rows.is_empty() {
            return Err(Error::Contract("batch has no locations".into()));
        }
        let prompt = self.prior.forward_tensor(&self.noise)?;
        let pixels = insert_patch_batch(&stack_images(&rows)?, &prompt, &self.mask, &locs)?;
        let predicted = self.encoder.query_attention(&pixels, self.layer)?;
        let per_row = kl_rows(&targets, &predicted, self.config.epsilon_clamp, self.config.kl_direction)?;
        Ok(per_row.mean_all()?)
    }

    /// One AdamW update of the prior; returns the pre-update loss.
    pub fn train_step(&mut self, images: &[&ImageTensor], locations: &[Vec<PixelLocation>]) -> Result<f64> {
        let loss = self.batch_loss(images, locations)?;
        self.optimizer.backward_step(&loss)?;
        Ok(loss.to_scalar::<f64>()?)
    }

    pub fn prompt(&self) -> Result<Prompt> {
        let mut prompt = compose_prompt(prior_forward(&self.prior, &self.noise)?, self.mask.clone(), self.spec)?;
        prompt.meta = PromptMeta {
            encoder_id: self.encoder.id().to_string(),
            seed: self.config.seed,
            config_digest: self.config.digest()?,
        };
        Ok(prompt)
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        checkpoint_bytes(&self.prompt()?, &self.prior, &self.noise)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub step_losses: Vec<StepLoss>,
    /// Image-weighted mean of the step losses in each epoch.
    pub epoch_means: Vec<f64>,
    pub wall_clock_secs: f64,
    pub checkpoint_digest: String,
}

impl TrainReport {
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,epoch,loss\n");
        for s in &self.step_losses {
            out.push_str(&format!("{},{},{}\n", s.step, s.epoch, s.loss));
        }
        out
    }
}

pub fn train_prompt<E: DifferentiableEncoder + ?Sized>(
    dataset: &[ImageTensor],
    encoder: &E,
    spec: PatchSpec,
    config: &TrainConfig,
) -> Result<(Prompt, TrainReport)> {
    train_prompt_with(dataset, encoder, spec, config, |_, _| Ok(()))
}

/// [`train_prompt`] with a hook called after every epoch with the epoch index
/// (0-based) and the trainer, e.g. to write per-epoch checkpoints.
pub fn train_prompt_with<E, F>(
    dataset: &[ImageTensor],
    encoder: &E,
    spec: PatchSpec,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<(Prompt, TrainReport)>
where
    E: DifferentiableEncoder + ?Sized,
    F: FnMut(usize, &PromptTrainer<'_, E>) -> Result<()>,
{
    if dataset.is_empty() {
        return Err(Error::Configuration("training dataset is empty".into()));
    }
    let n = encoder.config().image_size;
    if let Some(bad) = dataset.iter().position(|im| im.size() != n) {
        return Err(Error::Configuration(format!(
            "dataset image {bad} is {}px but the encoder expects {n}px",
            dataset[bad].size()
        )));
    }
    let start = Instant::now();
    let mut trainer = PromptTrainer::new(encoder, spec, config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(TRAIN_STREAM);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step_losses = Vec::new();
    let mut epoch_means = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let images: Vec<&ImageTensor> = chunk.iter().map(|&k| &dataset[k]).collect();
            let locations = chunk
                .iter()
                .map(|_| {
                    (0..config.k_locations_per_image)
                        .map(|_| sample_valid_location(n, spec.size, &mut rng))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let loss = trainer.train_step(&images, &locations)?;
            log::debug!("epoch {epoch} step {} loss {loss:.6}", step_losses.len());
            weighted += loss * chunk.len() as f64;
            step_losses.push(StepLoss {
                step: step_losses.len(),
                epoch,
                loss,
            });
        }
        let mean = weighted / dataset.len() as f64;
        log::info!("epoch {epoch}: mean loss {mean:.6}");
        epoch_means.push(mean);
        on_epoch(epoch, &trainer)?;
    }
    let prompt = trainer.prompt()?;
    let digest = sha256_hex(&trainer.checkpoint_bytes()?);
    Ok((
        prompt,
        TrainReport {
            step_losses,
            epoch_means,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            checkpoint_digest: digest,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{build_toy_vit, EncoderConfig, VisionEncoder};
    use crate::geometry::ShapeKind;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn kl_examples() {
        assert_abs_diff_eq!(kl_loss(&[0.75, 0.25], &[0.5, 0.5]).unwrap(), 0.130812, epsilon = 1e-5);
        assert_abs_diff_eq!(kl_loss(&[0.0, 1.0], &[0.5, 0.5]).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
        assert_eq!(kl_loss(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]).unwrap(), 0.0);
        assert!(matches!(kl_loss(&[1.0], &[0.5, 0.5]), Err(Error::Contract(_))));
        // reverse direction swaps the arguments
        let r = kl_loss_with(&[0.75, 0.25], &[0.5, 0.5], 1e-12, KlDirection::PredictedFirst).unwrap();
        assert_abs_diff_eq!(r, 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln(), epsilon = 1e-12);
        // clamped zero prediction stays finite
        assert!(kl_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap().is_finite());
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(a in proptest::collection::vec(0.0f64..1.0, 2..20), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.random::<f64>() + 1e-3).collect();
            let (sa, sb): (f64, f64) = (a.iter().sum::<f64>() + 1e-9, b.iter().sum());
            let p: Vec<f64> = a.iter().map(|v| (v + 1e-9 / a.len() as f64) / sa).collect();
            let q: Vec<f64> = b.iter().map(|v| v / sb).collect();
            prop_assert!(kl_loss(&p, &q).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn tensor_kl_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut targets = Vec::new();
        let mut preds = Vec::new();
        for _ in 0..3 {
            let mut t: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
            t[0] = 0.0;
            let st: f64 = t.iter().sum();
            let p: Vec<f64> = (0..6).map(|_| rng.random::<f64>() + 0.01).collect();
            let sp: f64 = p.iter().sum();
            targets.push(t.iter().map(|v| v / st).collect::<Vec<_>>());
            preds.push(p.iter().map(|v| v / sp).collect::<Vec<_>>());
        }
        let flat_t: Vec<f64> = targets.concat();
        let pt = Tensor::from_vec(preds.concat(), (3, 6), &nn::device()).unwrap();
        for dir in [KlDirection::TargetFirst, KlDirection::PredictedFirst] {
            let rows = kl_rows(&flat_t, &pt, 1e-12, dir).unwrap().to_vec1::<f64>().unwrap();
            for k in 0..3 {
                let expected = kl_loss_with(&targets[k], &preds[k], 1e-12, dir).unwrap();
                assert_abs_diff_eq!(rows[k], expected, epsilon = 1e-12);
            }
        }
    }

    fn tiny_setup() -> (crate::encoder::VitEncoder, Vec<ImageTensor>) {
        let cfg = EncoderConfig {
            image_size: 32,
            tile: 8,
            layers: 2,
            heads: 2,
            width: 16,
            mlp_hidden: 32,
            ..EncoderConfig::toy()
        };
        let enc = build_toy_vit(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let images = (0..5)
            .map(|_| ImageTensor::from_fn(32, |_, _, _| rng.random::<f64>()).unwrap())
            .collect();
        (enc, images)
    }

    fn spec8() -> PatchSpec {
        PatchSpec::new(8, ShapeKind::HollowSquare, 0.5).unwrap()
    }

    #[test]
    fn k_locations_average() {
        let (enc, images) = tiny_setup();
        let trainer = PromptTrainer::new(&enc, spec8(), TrainConfig::default()).unwrap();
        let a = PixelLocation::new(10, 12);
        let b = PixelLocation::new(20, 17);
        let both = trainer.batch_loss(&[&images[0]], &[vec![a, b]]).unwrap().to_scalar::<f64>().unwrap();
        let la = trainer.batch_loss(&[&images[0]], &[vec![a]]).unwrap().to_scalar::<f64>().unwrap();
        let lb = trainer.batch_loss(&[&images[0]], &[vec![b]]).unwrap().to_scalar::<f64>().unwrap();
        assert_abs_diff_eq!(both, (la + lb) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn batch_loss_matches_per_pair_oracle() {
        let (enc, images) = tiny_setup();
        let trainer = PromptTrainer::new(&enc, spec8(), TrainConfig::default()).unwrap();
        let loc = PixelLocation::new(13, 19);
        let loss = trainer.batch_loss(&[&images[1]], &[vec![loc]]).unwrap().to_scalar::<f64>().unwrap();
        let prompt = trainer.prompt().unwrap();
        let prompted = crate::geometry::insert_patch(&images[1], &prompt.rgb, &prompt.mask, loc).unwrap();
        let trace = enc.forward_with_attention(&prompted).unwrap().trace;
        let pred = crate::encoder::query_attention_mean(&trace, 2).unwrap().row;
        let grid = enc.config().grid().unwrap();
        let map = gaussian_target_map(loc, grid, sigma_from_patch(8.0, 8.0).unwrap()).unwrap();
        let expected = kl_loss(&target_query_row(&map, true), &pred).unwrap();
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-10);
    }

    #[test]
    fn step_leaves_encoder_frozen_and_moves_prior() {
        let (enc, images) = tiny_setup();
        let before = enc.parameter_checksum().unwrap();
        let mut trainer = PromptTrainer::new(&enc, spec8(), TrainConfig::default()).unwrap();
        let prior_before = trainer.prior().checksum().unwrap();
        let loss = trainer
            .train_step(&[&images[0], &images[1]], &[vec![PixelLocation::new(12, 12)], vec![PixelLocation::new(18, 14)]])
            .unwrap();
        assert!(loss >= 0.0);
        assert_eq!(enc.parameter_checksum().unwrap(), before);
        assert_ne!(trainer.prior().checksum().unwrap(), prior_before);
    }

    #[test]
    fn training_is_reproducible_and_degenerate_cases() {
        let (enc, images) = tiny_setup();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 2,
            seed: 4,
            ..TrainConfig::default()
        };
        let (pa, ra) = train_prompt(&images, &enc, spec8(), &config).unwrap();
        let (pb, rb) = train_prompt(&images, &enc, spec8(), &config).unwrap();
        assert_eq!(ra.step_losses, rb.step_losses);
        assert_eq!(ra.checkpoint_digest, rb.checkpoint_digest);
        assert_eq!(pa, pb);
        assert_eq!(ra.step_losses.len(), 6);
        assert_eq!(ra.epoch_means.len(), 2);
        assert!(ra.step_losses.iter().all(|s| s.loss >= 0.0));

        let zero = TrainConfig { epochs: 0, ..config.clone() };
        let (p0, r0) = train_prompt(&images, &enc, spec8(), &zero).unwrap();
        assert!(r0.step_losses.is_empty());
        let initial = PromptTrainer::new(&enc, spec8(), zero.clone()).unwrap().prompt().unwrap();
        assert_eq!(p0, initial);

        assert!(matches!(train_prompt(&[], &enc, spec8(), &config), Err(Error::Configuration(_))));
    }
}
