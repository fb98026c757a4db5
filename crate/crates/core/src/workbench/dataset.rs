//! Image manifests and decoding into encoder-sized tensors.

use std::io::BufRead;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ImageTensor;

fn yes() -> bool {
    true
}

/// A named point in source-image pixels (row `i`, column `j`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub part: String,
    pub i: f64,
    pub j: f64,
    #[serde(default = "yes")]
    pub visible: bool,
    /// Object extent in pixels, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<f64>,
}

/// One line of a manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub annotations: Vec<PointAnnotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ImageRecord>,
    /// Images are resized to `n x n`.
    pub n: usize,
    /// When set, only records with this split (or none) are kept.
    pub split: Option<String>,
}

impl DatasetManifest {
    pub fn load(path: &Path, n: usize, split: Option<String>) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (k, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ImageRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), k + 1)))?;
            if split.is_none() || rec.split.is_none() || rec.split == split {
                records.push(rec);
            }
        }
        if n == 0 {
            return Err(Error::Configuration("dataset resize target must be positive".into()));
        }
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
            n,
            split,
        })
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.root.join(&record.path)
        }
    }

    /// Paths of records whose file does not exist.
    pub fn missing_files(&self) -> Vec<PathBuf> {
        self.records.iter().map(|r| self.resolve(r)).filter(|p| !p.is_file()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub path: PathBuf,
    pub image: ImageTensor,
    /// Annotations in resized pixel coordinates.
    pub annotations: Vec<PointAnnotation>,
    /// `(row, col)` resize factors from source to `n`.
    pub scale: (f64, f64),
}

#[derive(Debug)]
pub struct LoadedDataset {
    pub items: Vec<DatasetItem>,
    /// `(path, reason)` of every record that could not be loaded.
    pub failures: Vec<(PathBuf, String)>,
}

impl LoadedDataset {
    pub fn images(&self) -> Vec<ImageTensor> {
        self.items.iter().map(|it| it.image.clone()).collect()
    }
}

/// Decodes any supported image, replicates grayscale to RGB and resizes
/// bilinearly to `n x n`. Returns the `(row, col)` scale factors.
pub fn load_image(path: &Path, n: usize) -> Result<(ImageTensor, (f64, f64))> {
    let decoded = image::open(path).map_err(|e| Error::image(path, e))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let scale = (n as f64 / h as f64, n as f64 / w as f64);
    let image = if (w, h) == (n, n) {
        let rgb = decoded.to_rgb8();
        ImageTensor::from_fn(n, |c, r, col| rgb.get_pixel(col as u32, r as u32)[c] as f64 / 255.0)?
    } else {
        let rgb = image::imageops::resize(&decoded.to_rgb32f(), n as u32, n as u32, FilterType::Triangle);
        ImageTensor::from_fn(n, |c, r, col| (rgb.get_pixel(col as u32, r as u32)[c] as f64).clamp(0.0, 1.0))?
    };
    Ok((image, scale))
}

/// Loads every record in manifest order. Unreadable items are collected as
/// failures; it is an error only when nothing loads.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<LoadedDataset> {
    let mut items = Vec::with_capacity(manifest.records.len());
    let mut failures = Vec::new();
    for rec in &manifest.records {
        let path = manifest.resolve(rec);
        match load_image(&path, manifest.n) {
            Ok((image, scale)) => {
                let annotations = rec
                    .annotations
                    .iter()
                    .map(|a| PointAnnotation {
                        i: a.i * scale.0,
                        j: a.j * scale.1,
                        size: a.size.map(|s| s * scale.0.min(scale.1)),
                        ..a.clone()
                    })
                    .collect();
                items.push(DatasetItem {
                    path,
                    image,
                    annotations,
                    scale,
                });
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                failures.push((path, e.to_string()));
            }
        }
    }
    if items.is_empty() {
        return Err(Error::Dataset(format!(
            "none of the {} manifest entries could be loaded",
            manifest.records.len()
        )));
    }
    Ok(LoadedDataset { items, failures })
}
