use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use promptsteer::checkpoint::{load_checkpoint, sha256_hex, LoadedCheckpoint};
use promptsteer::encoder::{EncoderFamily, VisionEncoder, VitEncoder};
use promptsteer::evaluation::{
    argmax_hit_rate_at, baseline_effect_at, gain_profiles_at, keypoint_naming_accuracy, load_annotations, sample_placements,
    write_metrics_csv, BaselineKind, GainProfile, KeypointAnnotation, LabelEmbeddingTable, MetricRow, Placement,
};
use promptsteer::geometry::{ImageTensor, PixelLocation, ShapeKind};
use promptsteer::training::{train_prompt_with, PromptTrainer};
use promptsteer::workbench::config::RunConfig;
use promptsteer::workbench::dataset::{load_dataset, load_image, DatasetManifest, LoadedDataset};
use promptsteer::workbench::render::render_outputs;
use promptsteer::workbench::synth::write_synthetic_dataset;
use promptsteer::{Error, Result};

/// Stream for baseline randomness, kept apart from placement sampling.
const BASELINE_STREAM: u64 = 3;

#[derive(Parser)]
#[command(name = "promptsteer", version, about = "Learn and evaluate universal attention-steering visual prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; each overrides one config field.
#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// output_dir
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// encoder.family
    #[arg(long)]
    encoder: Option<EncoderFamily>,
    /// encoder.path
    #[arg(long)]
    encoder_path: Option<PathBuf>,
    /// encoder.seed
    #[arg(long)]
    encoder_seed: Option<u64>,
    /// data.manifest
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// data.split
    #[arg(long)]
    split: Option<String>,
    /// patch.size
    #[arg(long)]
    patch_size: Option<usize>,
    /// patch.shape (filled_square, hollow_square, hollow_circle)
    #[arg(long)]
    shape: Option<ShapeKind>,
    /// patch.thickness_ratio
    #[arg(long)]
    thickness_ratio: Option<f64>,
}

#[derive(Args, Clone, Default)]
struct EvalFlags {
    /// Prompt checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// eval.seed
    #[arg(long)]
    seed: Option<u64>,
    /// eval.trials
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a prompt; writes per-epoch checkpoints, loss CSVs and the final prompt.
    Train {
        #[command(flatten)]
        common: Common,
        /// train.seed
        #[arg(long)]
        seed: Option<u64>,
        /// train.epochs
        #[arg(long)]
        epochs: Option<usize>,
        /// train.learning_rate
        #[arg(long)]
        learning_rate: Option<f64>,
        /// train.batch_size
        #[arg(long)]
        batch_size: Option<usize>,
        /// train.k_locations_per_image
        #[arg(long)]
        k_locations: Option<usize>,
    },
    /// Per-layer relative attention gain at random placements.
    EvalGain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Rate at which the attention argmax lands under the prompt.
    EvalHits {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Top-1 part naming accuracy against a label embedding table.
    EvalKeypoints {
        #[command(flatten)]
        common: Common,
        /// Prompt checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// eval.annotations
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// eval.labels
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Gain and hit rate of a handcrafted baseline at random placements.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// eval.baseline: crop, blur, red_circle or random_loc:<kind>
        #[arg(long, value_parser = parse_baseline)]
        kind: Option<BaselineKind>,
        /// eval.seed
        #[arg(long)]
        seed: Option<u64>,
        /// eval.trials
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Prompt, prompted image and attention heatmaps for one placement.
    Render {
        #[command(flatten)]
        common: Common,
        /// Prompt checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image file; defaults to the manifest entry at --image-index.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        image_index: usize,
        /// Prompt center as `row,col` in resized pixels; defaults to the image center.
        #[arg(long, value_parser = parse_loc)]
        loc: Option<PixelLocation>,
    },
    /// Write the bundled synthetic dataset (PNG files plus manifest.jsonl).
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Target directory; defaults to the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_baseline(s: &str) -> std::result::Result<BaselineKind, String> {
    match s.split_once(':') {
        Some(("random_loc", inner)) => Ok(BaselineKind::RandomLoc(Box::new(parse_baseline(inner)?))),
        Some(_) => Err(format!("unknown baseline '{s}'")),
        None => serde_json::from_value(Value::String(s.into())).map_err(|_| format!("unknown baseline '{s}'")),
    }
}

fn parse_loc(s: &str) -> std::result::Result<PixelLocation, String> {
    let (i, j) = s.split_once(',').ok_or("expected row,col")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok(PixelLocation::new(p(i)?, p(j)?))
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.encoder {
            cfg.encoder.family = v;
        }
        if let Some(v) = &self.encoder_path {
            cfg.encoder.path = Some(v.clone());
        }
        if let Some(v) = self.encoder_seed {
            cfg.encoder.seed = v;
        }
        if let Some(v) = &self.manifest {
            cfg.data.manifest = Some(v.clone());
        }
        if let Some(v) = &self.split {
            cfg.data.split = Some(v.clone());
        }
        if let Some(v) = self.patch_size {
            cfg.patch.size = v;
        }
        if let Some(v) = self.shape {
            cfg.patch.shape = v;
        }
        if let Some(v) = self.thickness_ratio {
            cfg.patch.thickness_ratio = v;
        }
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn dataset(cfg: &RunConfig, n: usize) -> Result<LoadedDataset> {
    let path = cfg
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Configuration("data.manifest is required for this command".into()))?;
    let manifest = DatasetManifest::load(path, n, cfg.data.split.clone())?;
    let missing = manifest.missing_files();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "{} manifest entries point at missing files, first: {}",
            missing.len(),
            missing[0].display()
        )));
    }
    load_dataset(&manifest)
}

fn checkpoint_for(path: &Path, encoder: &VitEncoder) -> Result<LoadedCheckpoint> {
    let ck = load_checkpoint(path)?;
    if ck.prompt.meta.encoder_id != encoder.id() {
        log::warn!(
            "checkpoint was trained against {} but the configured encoder is {}",
            ck.prompt.meta.encoder_id,
            encoder.id()
        );
    }
    Ok(ck)
}

fn placements(cfg: &RunConfig, num_images: usize, n: usize) -> Result<Vec<Placement>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    sample_placements(num_images, n, cfg.patch.size, cfg.eval.trials, &mut rng)
}

fn apply_eval(cfg: &mut RunConfig, seed: Option<u64>, trials: Option<usize>) {
    if let Some(s) = seed {
        cfg.eval.seed = s;
    }
    if let Some(t) = trials {
        cfg.eval.trials = t;
    }
}

/// Per-layer gain statistics over defined values, plus the final-layer summary.
fn gain_metrics(profiles: &[GainProfile], prefix: &str) -> (Vec<MetricRow>, Value) {
    let layers = profiles.first().map_or(0, |p| p.gains.len());
    let mut rows = Vec::new();
    let mut last = json!(null);
    for l in 0..layers {
        let defined: Vec<f64> = profiles.iter().filter_map(|p| p.gains[l]).collect();
        let mean = defined.iter().sum::<f64>() / defined.len().max(1) as f64;
        let positive = defined.iter().filter(|g| **g > 0.0).count() as f64 / defined.len().max(1) as f64;
        let undefined = profiles.len() - defined.len();
        rows.push(MetricRow::new(&format!("{prefix}gain_mean"), l + 1, if defined.is_empty() { f64::NAN } else { mean }));
        rows.push(MetricRow::new(&format!("{prefix}gain_positive_fraction"), l + 1, positive));
        rows.push(MetricRow::new(&format!("{prefix}gain_undefined"), l + 1, undefined as f64));
        last = json!({"final_layer_gain_mean": mean, "final_layer_positive_fraction": positive, "undefined": undefined});
    }
    (rows, last)
}

fn run(command: Command) -> (Option<PathBuf>, &'static str, Result<Value>) {
    let name = match &command {
        Command::Train { .. } => "train",
        Command::EvalGain { .. } => "eval-gain",
        Command::EvalHits { .. } => "eval-hits",
        Command::EvalKeypoints { .. } => "eval-keypoints",
        Command::Baseline { .. } => "baseline",
        Command::Render { .. } => "render",
        Command::SynthData { .. } => "synth-data",
    };
    let common = match &command {
        Command::Train { common, .. }
        | Command::EvalGain { common, .. }
        | Command::EvalHits { common, .. }
        | Command::EvalKeypoints { common, .. }
        | Command::Baseline { common, .. }
        | Command::Render { common, .. }
        | Command::SynthData { common, .. } => common.clone(),
    };
    let cfg = match common.resolve() {
        Ok(c) => c,
        Err(e) => return (None, name, Err(e)),
    };
    let out = cfg.output_dir.clone();
    (Some(out), name, execute(command, cfg))
}

fn execute(command: Command, mut cfg: RunConfig) -> Result<Value> {
    match command {
        Command::Train {
            seed,
            epochs,
            learning_rate,
            batch_size,
            k_locations,
            ..
        } => {
            if let Some(v) = seed {
                cfg.train.seed = v;
            }
            if let Some(v) = epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = learning_rate {
                cfg.train.learning_rate = v;
            }
            if let Some(v) = batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = k_locations {
                cfg.train.k_locations_per_image = v;
            }
            train(&cfg)
        }
        Command::EvalGain { eval, .. } => {
            apply_eval(&mut cfg, eval.seed, eval.trials);
            let encoder = cfg.build_encoder()?;
            let ck = checkpoint_for(&eval.checkpoint, &encoder)?;
            let images = dataset(&cfg, encoder.config().image_size)?.images();
            let placements = placements(&cfg, images.len(), encoder.config().image_size)?;
            let profiles = gain_profiles_at(&encoder, &ck.prompt, &images, &placements)?;
            let (rows, last) = gain_metrics(&profiles, "");
            create_dir(&cfg.output_dir)?;
            write_metrics_csv(&cfg.output_dir.join("gain.csv"), &rows)?;
            Ok(json!({"checkpoint_digest": ck.digest, "trials": placements.len(), "gain": last}))
        }
        Command::EvalHits { eval, .. } => {
            apply_eval(&mut cfg, eval.seed, eval.trials);
            let encoder = cfg.build_encoder()?;
            let ck = checkpoint_for(&eval.checkpoint, &encoder)?;
            let images = dataset(&cfg, encoder.config().image_size)?.images();
            let placements = placements(&cfg, images.len(), encoder.config().image_size)?;
            let hr = argmax_hit_rate_at(&encoder, &ck.prompt, &images, &placements)?;
            create_dir(&cfg.output_dir)?;
            write_metrics_csv(
                &cfg.output_dir.join("hits.csv"),
                &[
                    MetricRow::new("hit_rate", encoder.config().layers, hr.rate),
                    MetricRow::new("base_rate", encoder.config().layers, hr.base_rate),
                ],
            )?;
            Ok(json!({"checkpoint_digest": ck.digest, "hit_rate": hr}))
        }
        Command::EvalKeypoints {
            checkpoint,
            annotations,
            labels,
            ..
        } => {
            if annotations.is_some() {
                cfg.eval.annotations = annotations;
            }
            if labels.is_some() {
                cfg.eval.labels = labels;
            }
            eval_keypoints(&cfg, &checkpoint)
        }
        Command::Baseline { kind, seed, trials, .. } => {
            apply_eval(&mut cfg, seed, trials);
            if let Some(k) = kind {
                cfg.eval.baseline = k;
            }
            let encoder = cfg.build_encoder()?;
            let n = encoder.config().image_size;
            let images = dataset(&cfg, n)?.images();
            let placements = placements(&cfg, images.len(), n)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
            rng.set_stream(BASELINE_STREAM);
            let (profiles, hr) = baseline_effect_at(
                &encoder,
                &images,
                &placements,
                cfg.patch.size,
                &cfg.eval.baseline,
                &cfg.eval.baseline_params,
                &mut rng,
            )?;
            let (mut rows, last) = gain_metrics(&profiles, "");
            rows.push(MetricRow::new("hit_rate", encoder.config().layers, hr.rate));
            rows.push(MetricRow::new("base_rate", encoder.config().layers, hr.base_rate));
            create_dir(&cfg.output_dir)?;
            write_metrics_csv(&cfg.output_dir.join("baseline.csv"), &rows)?;
            Ok(json!({"baseline": cfg.eval.baseline, "trials": placements.len(), "gain": last, "hit_rate": hr}))
        }
        Command::Render {
            checkpoint,
            image,
            image_index,
            loc,
            ..
        } => {
            let encoder = cfg.build_encoder()?;
            let n = encoder.config().image_size;
            let ck = checkpoint_for(&checkpoint, &encoder)?;
            let img: ImageTensor = match image {
                Some(p) => load_image(&p, n)?.0,
                None => {
                    let ds = dataset(&cfg, n)?;
                    ds.items
                        .get(image_index)
                        .ok_or_else(|| Error::Configuration(format!("image index {image_index} is out of range")))?
                        .image
                        .clone()
                }
            };
            let loc = loc.unwrap_or(PixelLocation::new(n / 2, n / 2));
            let files = render_outputs(&ck.prompt, &encoder, &img, loc, &cfg.output_dir.join("render"))?;
            Ok(json!({"files": files, "loc": loc}))
        }
        Command::SynthData { count, seed, out, .. } => {
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            let manifest = write_synthetic_dataset(&dir, count, cfg.encoder.image_size, seed)?;
            let text = std::fs::read(&manifest).map_err(|e| Error::Io {
                path: manifest.clone(),
                source: e,
            })?;
            Ok(json!({"manifest": manifest, "count": count, "seed": seed, "manifest_digest": sha256_hex(&text)}))
        }
    }
}

fn train(cfg: &RunConfig) -> Result<Value> {
    let encoder = cfg.build_encoder()?;
    let spec = cfg.patch.spec()?;
    let ds = dataset(cfg, encoder.config().image_size)?;
    let images = ds.images();
    let before = encoder.parameter_checksum()?;
    let out = &cfg.output_dir;
    let ckdir = out.join("checkpoints");
    create_dir(&ckdir)?;
    write_file(&out.join("config.toml"), cfg.to_toml_string()?)?;
    let mut last = None;
    let (prompt, report) = train_prompt_with(&images, &encoder, spec, &cfg.train, |epoch, trainer| {
        let bytes = trainer.checkpoint_bytes()?;
        write_file(&ckdir.join(format!("epoch_{:03}.safetensors", epoch + 1)), &bytes)?;
        last = Some(bytes);
        Ok(())
    })?;
    let after = encoder.parameter_checksum()?;
    if before != after {
        return Err(Error::Contract("encoder parameters changed during training".into()));
    }
    let bytes = match last {
        Some(b) => b,
        None => PromptTrainer::new(&encoder, spec, cfg.train.clone())?.checkpoint_bytes()?,
    };
    let final_path = out.join("prompt.safetensors");
    write_file(&final_path, &bytes)?;
    let digest = sha256_hex(&bytes);
    if digest != report.checkpoint_digest {
        return Err(Error::Contract("final checkpoint digest disagrees with the trainer".into()));
    }
    prompt.save_png(&out.join("prompt.png"))?;
    write_file(&out.join("loss.csv"), report.loss_csv())?;
    let mut epochs = String::from("epoch,mean_loss\n");
    for (k, v) in report.epoch_means.iter().enumerate() {
        epochs.push_str(&format!("{},{v}\n", k + 1));
    }
    write_file(&out.join("epochs.csv"), epochs)?;
    Ok(json!({
        "encoder_id": encoder.id(),
        "encoder_checksum": before,
        "images": images.len(),
        "skipped_images": ds.failures.len(),
        "epoch_means": report.epoch_means,
        "steps": report.step_losses.len(),
        "wall_clock_secs": report.wall_clock_secs,
        "checkpoint": final_path,
        "checkpoint_digest": digest,
    }))
}

fn eval_keypoints(cfg: &RunConfig, checkpoint: &Path) -> Result<Value> {
    let encoder = cfg.build_encoder()?;
    let ck = checkpoint_for(checkpoint, &encoder)?;
    let need = |p: &Option<PathBuf>, key: &str| {
        p.clone()
            .ok_or_else(|| Error::Configuration(format!("{key} is required for eval-keypoints")))
    };
    let ann_path = need(&cfg.eval.annotations, "eval.annotations")?;
    let labels = LabelEmbeddingTable::load(&need(&cfg.eval.labels, "eval.labels")?)?;
    let records = load_annotations(&ann_path)?;
    let base = ann_path.parent().unwrap_or(Path::new(""));
    let n = encoder.config().image_size;
    let m = ck.prompt.size();
    let mut images: HashMap<String, ImageTensor> = HashMap::new();
    let mut scales = HashMap::new();
    let mut annotations = Vec::with_capacity(records.len());
    for rec in &records {
        let path = if rec.image_path.is_absolute() {
            rec.image_path.clone()
        } else {
            base.join(&rec.image_path)
        };
        let id = path.display().to_string();
        if !images.contains_key(&id) {
            let (img, scale) = load_image(&path, n)?;
            images.insert(id.clone(), img);
            scales.insert(id.clone(), scale);
        }
        annotations.push(KeypointAnnotation {
            image_id: id.clone(),
            part: rec.part_or_expression.clone(),
            loc: rec.placement(scales[&id], n, m)?,
            visible: rec.visible,
        });
    }
    let acc = keypoint_naming_accuracy(&encoder, &ck.prompt, &images, &annotations, &labels)?;
    create_dir(&cfg.output_dir)?;
    write_metrics_csv(
        &cfg.output_dir.join("keypoints.csv"),
        &[
            MetricRow::new("keypoint_accuracy", "all", acc.accuracy),
            MetricRow::new("keypoint_evaluated", "all", acc.evaluated as f64),
            MetricRow::new("keypoint_skipped", "all", acc.skipped as f64),
        ],
    )?;
    Ok(json!({"checkpoint_digest": ck.digest, "accuracy": acc, "labels": labels.names().len()}))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (out, name, result) = run(cli.command);
    let (summary, code) = match &result {
        Ok(v) => (json!({"command": name, "status": "ok", "result": v}), ExitCode::SUCCESS),
        Err(e) => {
            eprintln!("error: {e}");
            (json!({"command": name, "status": "error", "error": e.to_string()}), ExitCode::from(1))
        }
    };
    if let Some(dir) = out {
        let path = dir.join(format!("summary-{name}.json"));
        let written = create_dir(&dir)
            .and_then(|_| write_file(&path, serde_json::to_string_pretty(&summary).unwrap_or_default()));
        if let Err(e) = written {
            eprintln!("error: could not write summary: {e}");
            return ExitCode::from(1);
        }
    }
    code
}
