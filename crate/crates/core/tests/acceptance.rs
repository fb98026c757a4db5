//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.

use std::collections::HashMap;
use std::time::Instant;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use promptsteer::checkpoint::sha256_hex;
use promptsteer::encoder::{
    build_toy_vit, AttentionTrace, EncoderConfig, EncoderOutput, VisionEncoder, VitEncoder,
};
use promptsteer::evaluation::{
    argmax_hit_rate_at, baseline_transform, gain_profiles_at, keypoint_naming_accuracy, sample_placements,
    BaselineKind, BaselineParams, KeypointAnnotation, LabelEmbeddingTable, Region,
};
use promptsteer::geometry::{
    insert_patch, sample_valid_location, ImageTensor, PatchSpec, PixelLocation, ShapeKind, ShapeMask,
};
use promptsteer::prior::{compose_prompt, Prompt};
use promptsteer::target::{gaussian_target_map, sigma_from_patch, TokenGrid};
use promptsteer::training::{kl_loss, train_prompt, PromptTrainer, TrainConfig, TrainReport};
use promptsteer::workbench::synth::synthesize_images;

type Outcome = (bool, String);

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn criterion_1() -> Outcome {
    let fwhm = 2.0 * (2.0 * 2f64.ln()).sqrt();
    let a = sigma_from_patch(42.0, 14.0).unwrap();
    let b = sigma_from_patch(32.0, 32.0).unwrap();
    let ok = close(a, 1.273983, 1e-6) && close(b, 0.424661, 1e-6) && close(a, 3.0 / fwhm, 1e-12);
    (ok, format!("sigma(42,14)={a:.7} sigma(32,32)={b:.7}"))
}

fn criterion_2() -> Outcome {
    let grid = TokenGrid::new(3, 32).unwrap();
    let map = gaussian_target_map(PixelLocation::new(48, 48), grid, 0.424661).unwrap();
    let mut worst = 0f64;
    for u in 0..3 {
        for v in 0..3 {
            let expect = match (u == 1) as u8 + (v == 1) as u8 {
                2 => 0.790123,
                1 => 0.049383,
                _ => 0.003086,
            };
            worst = worst.max((map.at(u, v) - expect).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_sum = 0f64;
    for _ in 0..500 {
        let t = rng.random_range(2..=24);
        let tile = rng.random_range(1..=32);
        let loc = PixelLocation::new(rng.random_range(0..t * tile), rng.random_range(0..t * tile));
        let sigma = 10f64.powf(rng.random_range(-2.0..1.5));
        let m = gaussian_target_map(loc, TokenGrid::new(t, tile).unwrap(), sigma).unwrap();
        let s: f64 = (0..t).flat_map(|u| (0..t).map(move |v| (u, v))).map(|(u, v)| m.at(u, v)).sum();
        worst_sum = worst_sum.max((s - 1.0).abs());
    }
    (worst <= 1e-5 && worst_sum <= 1e-6, format!("3x3 max err {worst:.2e}, 500 maps max |sum-1| {worst_sum:.2e}"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 64;
    let mut mismatches = 0usize;
    for _ in 0..1000 {
        let m = 2 * rng.random_range(1..=31);
        let image = ImageTensor::from_fn(n, |_, _, _| rng.random::<f64>()).unwrap();
        let prompt: Vec<f64> = (0..3 * m * m).map(|_| rng.random::<f64>()).collect();
        let bits: Vec<u8> = (0..m * m).map(|_| rng.random_range(0..2)).collect();
        let mask = ShapeMask::from_bits(m, bits.clone()).unwrap();
        let loc = sample_valid_location(n, m, &mut rng).unwrap();
        let out = insert_patch(&image, &prompt, &mask, loc).unwrap();
        let (r0, c0) = (loc.i - m / 2, loc.j - m / 2);
        for c in 0..3 {
            for r in 0..n {
                for col in 0..n {
                    let in_win = (r0..r0 + m).contains(&r) && (c0..c0 + m).contains(&col);
                    let expect = if in_win && bits[(r - r0) * m + col - c0] == 1 {
                        prompt[(c * m + r - r0) * m + col - c0]
                    } else {
                        image.get(c, r, col)
                    };
                    mismatches += usize::from(out.get(c, r, col).to_bits() != expect.to_bits());
                }
            }
        }
    }
    (mismatches == 0, format!("{mismatches} mismatching pixels over 1000 cases"))
}

fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..p.len() {
        if p[k] > 0.0 {
            acc += p[k] * (p[k].ln() - q[k].max(1e-12).ln());
        }
    }
    acc
}

fn random_simplex(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.random::<f64>().powi(3)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst, mut worst_self) = (0f64, 0f64);
    for _ in 0..100 {
        let len = rng.random_range(2..=65);
        let p = random_simplex(&mut rng, len);
        let q = random_simplex(&mut rng, len);
        worst = worst.max((kl_loss(&p, &q).unwrap() - kl_oracle(&p, &q)).abs());
        worst_self = worst_self.max(kl_loss(&p, &p).unwrap().abs());
    }
    let a = kl_loss(&[0.75, 0.25], &[0.5, 0.5]).unwrap();
    let b = kl_loss(&[0.0, 1.0], &[0.5, 0.5]).unwrap();
    let ok = worst <= 1e-9 && worst_self == 0.0 && close(a, 0.130812, 1e-5) && close(b, 0.693147, 1e-5);
    (ok, format!("oracle err {worst:.2e}, KL(p,p) max {worst_self:.1e}, fixed cases {a:.6} {b:.6}"))
}

fn criterion_5() -> Outcome {
    let enc = build_toy_vit(&EncoderConfig::toy(), 0).unwrap();
    let spec = PatchSpec::new(16, ShapeKind::HollowCircle, 0.75).unwrap();
    let trainer = PromptTrainer::new(&enc, spec, TrainConfig::default()).unwrap();
    let items = synthesize_images(2, 64, 5).unwrap();
    let images: Vec<&ImageTensor> = items.iter().map(|it| &it.image).collect();
    let locs = vec![vec![PixelLocation::new(20, 40)], vec![PixelLocation::new(44, 28)]];
    let loss_at = || trainer.batch_loss(&images, &locs).unwrap().to_scalar::<f64>().unwrap();
    let grads = trainer.batch_loss(&images, &locs).unwrap().backward().unwrap();
    let params = trainer.prior().parameters();
    let sizes: Vec<usize> = params.iter().map(|(_, v)| v.elem_count()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let eps = 1e-4;
    let mut worst = 0f64;
    for _ in 0..10 {
        let mut flat = rng.random_range(0..total);
        let mut p = 0;
        while flat >= sizes[p] {
            flat -= sizes[p];
            p += 1;
        }
        let var = &params[p].1;
        let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()[flat];
        let orig = var.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let bump = |delta: f64| {
            let mut v = orig.clone();
            v[flat] += delta;
            var.set(&Tensor::from_vec(v, var.shape(), var.device()).unwrap()).unwrap();
            let f = loss_at();
            var.set(&Tensor::from_vec(orig.clone(), var.shape(), var.device()).unwrap()).unwrap();
            f
        };
        let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    (worst < 1e-3, format!("max relative error {worst:.2e} over 10 prior parameters"))
}

struct Demo {
    prompt: Prompt,
    report: TrainReport,
    digest: String,
}

fn spec16() -> PatchSpec {
    PatchSpec::new(16, ShapeKind::HollowCircle, 0.75).unwrap()
}

fn run_demo(enc: &VitEncoder, images: &[ImageTensor]) -> Demo {
    let (prompt, report) = train_prompt(images, enc, spec16(), &TrainConfig::default()).unwrap();
    let digest = report.checkpoint_digest.clone();
    Demo { prompt, report, digest }
}

fn criterion_6(enc: &VitEncoder, images: &[ImageTensor], demo: &Demo) -> Outcome {
    let means = &demo.report.epoch_means;
    let (first, last) = (means[0], *means.last().unwrap());
    let a = last <= 0.5 * first;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let placements = sample_placements(images.len(), 64, 16, 200, &mut rng).unwrap();
    let gains: Vec<f64> = gain_profiles_at(enc, &demo.prompt, images, &placements)
        .unwrap()
        .iter()
        .filter_map(|g| g.final_gain())
        .collect();
    let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;
    let positive = gains.iter().filter(|g| **g > 0.0).count() as f64 / placements.len() as f64;
    let b = mean_gain > 0.0 && positive >= 0.8;
    let hits = argmax_hit_rate_at(enc, &demo.prompt, images, &placements).unwrap();
    let c = hits.rate >= 5.0 * hits.base_rate;
    (
        a && b && c,
        format!(
            "(a) KL {first:.4} -> {last:.4} ratio {:.3} [{}]; (b) gain mean {mean_gain:.3}, positive {:.1}% [{}]; (c) hits {:.3} vs base {:.3} [{}]; {:.0}s train",
            last / first,
            pf(a),
            100.0 * positive,
            pf(b),
            hits.rate,
            hits.base_rate,
            pf(c),
            demo.report.wall_clock_secs
        ),
    )
}

fn criterion_7(before: &str, after: &str) -> Outcome {
    (before == after, format!("checksum {}.. before, {}.. after", &before[..12], &after[..12]))
}

/// Embeds each image as the basis vector picked by its top-left pixel.
struct StubEncoder {
    config: EncoderConfig,
    classes: usize,
}

impl VisionEncoder for StubEncoder {
    fn id(&self) -> &str {
        "stub"
    }
    fn config(&self) -> &EncoderConfig {
        &self.config
    }
    fn forward_with_attention(&self, image: &ImageTensor) -> promptsteer::Result<EncoderOutput> {
        let k = (image.get(0, 0, 0) * 255.0).round() as usize % self.classes;
        let mut embedding = vec![0.0; self.classes];
        embedding[k] = 1.0;
        let s = self.config.sequence_len();
        Ok(EncoderOutput {
            embedding,
            trace: AttentionTrace::new(1, 1, s, true, vec![1.0 / s as f64; s * s], None)?,
        })
    }
    fn parameter_checksum(&self) -> promptsteer::Result<String> {
        Ok(String::new())
    }
}

fn binomial_bounds(trials: usize, p: f64, level: f64) -> (usize, usize) {
    let mut pmf = (1.0 - p).powi(trials as i32);
    let mut cdf = Vec::with_capacity(trials + 1);
    let mut acc = 0.0;
    for k in 0..=trials {
        acc += pmf;
        cdf.push(acc);
        pmf *= (trials - k) as f64 / (k + 1) as f64 * p / (1.0 - p);
    }
    let tail = (1.0 - level) / 2.0;
    let lo = cdf.iter().position(|c| *c > tail).unwrap();
    let hi = cdf.iter().position(|c| *c >= 1.0 - tail).unwrap();
    (lo, hi)
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let constant = ImageTensor::filled(64, 0.37).unwrap();
    let inner = Region { top: 20, left: 24, height: 16, width: 16 };
    let blurred = baseline_transform(&constant, &BaselineKind::Blur, inner, &BaselineParams::default(), &mut rng).unwrap();
    let blur_ok = blurred == constant;
    let image = ImageTensor::from_fn(64, |_, _, _| rng.random::<f64>()).unwrap();
    let cropped =
        baseline_transform(&image, &BaselineKind::Crop, Region::full(64), &BaselineParams::default(), &mut rng).unwrap();
    let crop_ok = cropped == image;

    let classes = 10;
    let labels = LabelEmbeddingTable::new(
        (0..classes)
            .map(|k| {
                let mut v = vec![0.0; classes];
                v[k] = 1.0;
                (format!("part{k}"), v)
            })
            .collect(),
    )
    .unwrap();
    let images: HashMap<String, ImageTensor> = (0..classes)
        .map(|k| (format!("img{k}"), ImageTensor::filled(64, k as f64 / 255.0).unwrap()))
        .collect();
    let truth: Vec<usize> = (0..1000).map(|_| rng.random_range(0..classes)).collect();
    let mut permuted = truth.clone();
    permuted.shuffle(&mut rng);
    let annotations: Vec<KeypointAnnotation> = truth
        .iter()
        .zip(&permuted)
        .map(|(t, p)| KeypointAnnotation {
            image_id: format!("img{t}"),
            part: format!("part{p}"),
            loc: sample_valid_location(64, 16, &mut rng).unwrap(),
            visible: true,
        })
        .collect();
    let stub = StubEncoder { config: EncoderConfig::toy(), classes };
    let prompt = compose_prompt(vec![0.5; 3 * 256], ShapeMask::zeros(16), spec16()).unwrap();
    let acc = keypoint_naming_accuracy(&stub, &prompt, &images, &annotations, &labels).unwrap();
    let (lo, hi) = binomial_bounds(1000, 1.0 / classes as f64, 0.99);
    let chance_ok = acc.evaluated == 1000 && (lo..=hi).contains(&acc.correct);
    (
        blur_ok && crop_ok && chance_ok,
        format!(
            "blur constant [{}], full crop identity [{}], permuted accuracy {}/1000 in [{lo}, {hi}] [{}]",
            pf(blur_ok),
            pf(crop_ok),
            acc.correct,
            pf(chance_ok)
        ),
    )
}

fn criterion_9(a: &Demo, b: &Demo) -> Outcome {
    let la: Vec<u64> = a.report.step_losses.iter().map(|s| s.loss.to_bits()).collect();
    let lb: Vec<u64> = b.report.step_losses.iter().map(|s| s.loss.to_bits()).collect();
    let ok = la == lb && a.digest == b.digest && a.prompt == b.prompt;
    let series = sha256_hex(&la.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>());
    (ok, format!("{} steps, loss series {}.., checkpoint {}..", la.len(), &series[..12], &a.digest[..12]))
}

fn pf(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn report(id: usize, outcome: Outcome, started: Instant) -> bool {
    println!("criterion {id}: {} {} ({:.1}s)", pf(outcome.0), outcome.1, started.elapsed().as_secs_f64());
    outcome.0
}

fn main() {
    let mut all = true;
    for (id, f) in [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5].into_iter().enumerate() {
        let t = Instant::now();
        all &= report(id + 1, f(), t);
    }

    let t = Instant::now();
    let enc = build_toy_vit(&EncoderConfig::toy(), 0).unwrap();
    let images: Vec<ImageTensor> = synthesize_images(200, 64, 1).unwrap().into_iter().map(|it| it.image).collect();
    let before = enc.parameter_checksum().unwrap();
    let first = run_demo(&enc, &images);
    let after = enc.parameter_checksum().unwrap();
    all &= report(6, criterion_6(&enc, &images, &first), t);
    all &= report(7, criterion_7(&before, &after), Instant::now());

    let t = Instant::now();
    all &= report(8, criterion_8(), t);

    let t = Instant::now();
    let second = run_demo(&build_toy_vit(&EncoderConfig::toy(), 0).unwrap(), &images);
    all &= report(9, criterion_9(&first, &second), t);

    println!("acceptance: {}", if all { "all criteria passed" } else { "some criteria FAILED" });
    if !all {
        std::process::exit(1);
    }
}
