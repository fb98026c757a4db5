//! Run configuration: one TOML file with `[encoder]`, `[patch]`, `[train]`,
//! `[data]` and `[eval]` tables plus a top-level `output_dir`.
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{
    build_toy_vit, load_external_encoder, EncoderConfig, EncoderDescriptor, EncoderFamily, VisionEncoder,
    VitEncoder,
};
use crate::error::{Error, Result};
use crate::evaluation::{BaselineKind, BaselineParams};
use crate::geometry::{valid_center_range, PatchSpec, ShapeKind};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub family: EncoderFamily,
    /// Initialization seed for the toy ViT.
    pub seed: u64,
    /// Weights file; required for every family except `toy`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    // toy geometry
    pub image_size: usize,
    pub tile: usize,
    pub layers: usize,
    pub width: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let toy = EncoderConfig::toy();
        Self {
            family: EncoderFamily::Toy,
            seed: 0,
            path: None,
            heads: None,
            image_size: toy.image_size,
            tile: toy.tile,
            layers: toy.layers,
            width: toy.width,
        }
    }
}

impl EncoderSection {
    pub fn toy_config(&self) -> EncoderConfig {
        let mut cfg = EncoderConfig::toy();
        cfg.image_size = self.image_size;
        cfg.tile = self.tile;
        cfg.layers = self.layers;
        cfg.width = self.width;
        cfg.mlp_hidden = 4 * self.width;
        if let Some(h) = self.heads {
            cfg.heads = h;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSection {
    pub size: usize,
    pub shape: ShapeKind,
    pub thickness_ratio: f64,
}

impl Default for PatchSection {
    fn default() -> Self {
        Self {
            size: 16,
            shape: ShapeKind::HollowCircle,
            thickness_ratio: 0.75,
        }
    }
}

impl PatchSection {
    pub fn spec(&self) -> Result<PatchSpec> {
        PatchSpec::new(self.size, self.shape, self.thickness_ratio)
            .map_err(|e| Error::Configuration(format!("patch: {e}")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Random placements for gain and hit-rate evaluation.
    pub trials: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    pub baseline: BaselineKind,
    pub baseline_params: BaselineParams,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            trials: 200,
            seed: 1,
            annotations: None,
            labels: None,
            baseline: BaselineKind::RedCircle,
            baseline_params: BaselineParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub encoder: EncoderSection,
    pub patch: PatchSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            encoder: EncoderSection::default(),
            patch: PatchSection::default(),
            train: TrainConfig::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Configuration(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        rebase(base, &mut cfg.output_dir);
        let paths = [
            cfg.encoder.path.as_mut(),
            cfg.data.manifest.as_mut(),
            cfg.eval.annotations.as_mut(),
            cfg.eval.labels.as_mut(),
        ];
        for p in paths.into_iter().flatten() {
            rebase(base, p);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Configuration(e.to_string()))
    }

    /// Checks everything that does not need the weights file.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let spec = self.patch.spec()?;
        if self.eval.trials == 0 {
            return Err(Error::Configuration("eval.trials must be at least 1".into()));
        }
        match self.encoder.family {
            EncoderFamily::Toy => {
                let cfg = self.encoder.toy_config();
                check_geometry(&cfg, &spec)?;
                cfg.validate()
                    .map_err(|e| Error::Configuration(format!("encoder: {e}")))
            }
            _ if self.encoder.path.is_none() => Err(Error::Configuration(format!(
                "encoder.path is required for the {} adapter",
                self.encoder.family
            ))),
            _ => Ok(()),
        }
    }

    pub fn build_encoder(&self) -> Result<VitEncoder> {
        self.validate()?;
        let encoder = match self.encoder.family {
            EncoderFamily::Toy => build_toy_vit(&self.encoder.toy_config(), self.encoder.seed)?,
            family => load_external_encoder(&EncoderDescriptor {
                path: self.encoder.path.clone().expect("validated"),
                adapter: family,
                heads: self.encoder.heads,
            })?,
        };
        check_geometry(encoder.config(), &self.patch.spec()?)?;
        Ok(encoder)
    }
}

/// Cross-field checks on `(n, n_t, m)`; each message names the violated
/// constraint.
pub fn check_geometry(cfg: &EncoderConfig, spec: &PatchSpec) -> Result<()> {
    let (n, tile, m) = (cfg.image_size, cfg.tile, spec.size);
    if tile == 0 || n % tile != 0 {
        return Err(Error::Configuration(format!(
            "encoder.tile ({tile}) must divide encoder.image_size ({n})"
        )));
    }
    if m > n {
        return Err(Error::Configuration(format!(
            "patch.size ({m}) must not exceed encoder.image_size ({n})"
        )));
    }
    valid_center_range(n, m).map_err(|_| {
        Error::Configuration(format!(
            "patch.size ({m}) must satisfy patch.size + 2 <= encoder.image_size ({n}) so that a strictly interior placement exists"
        ))
    })?;
    Ok(())
}
