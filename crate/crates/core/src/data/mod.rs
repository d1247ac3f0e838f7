//! Images on disk, dataset manifests, synthetic data and augmentation.

mod augment;
mod ppm;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{format_err, invalid, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

pub use augment::{augment, crop, hflip, CropFlip};
pub use ppm::{decode_ppm, encode_ppm, load_ppm, save_ppm};
pub use synth::synth_image;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    File(PathBuf),
    Synth { seed: u64, index: usize },
}

/// A `[3,H,W]` image with values in `[0,1]`.
#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub id: String,
    pub pixels: Tensor,
    pub source: ImageSource,
}

impl ImageRecord {
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's root directory.
    pub path: String,
}

/// Image entries of a dataset directory, ordered by id.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, mut entries: Vec<ManifestEntry>) -> Result<Self> {
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = entries.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(invalid(format!("duplicate image id {:?}", w[0].id)));
        }
        Ok(DatasetManifest {
            root: root.into(),
            entries,
        })
    }

    /// Reads `dir/manifest.json` when present, otherwise lists `*.ppm` files
    /// with their file stems as ids.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = dir.join(MANIFEST_FILE);
        if manifest.is_file() {
            let entries: Vec<ManifestEntry> = serde_json::from_slice(&fs::read(&manifest)?)?;
            return Self::new(dir, entries);
        }
        let mut entries = Vec::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "ppm") {
                let name = path.file_name().and_then(|n| n.to_str());
                let stem = path.file_stem().and_then(|n| n.to_str());
                if let (Some(name), Some(stem)) = (name, stem) {
                    entries.push(ManifestEntry {
                        id: stem.to_string(),
                        path: name.to_string(),
                    });
                }
            }
        }
        Self::new(dir, entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write(&self) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.entries)?;
        fs::write(self.root.join(MANIFEST_FILE), json + "\n")?;
        Ok(())
    }

    pub fn load(&self) -> Result<Vec<ImageRecord>> {
        self.entries
            .iter()
            .map(|e| {
                let path = self.root.join(&e.path);
                Ok(ImageRecord {
                    id: e.id.clone(),
                    pixels: load_ppm(&path)?,
                    source: ImageSource::File(path),
                })
            })
            .collect()
    }
}

/// Image `index` of the synthetic set keyed by `seed`, quantized to 8 bits
/// exactly like its on-disk copy.
pub fn synth_record(size: usize, seed: u64, index: usize) -> Result<ImageRecord> {
    let mut rng = stream(seed, &[index as u64]);
    let pixels = decode_ppm(&encode_ppm(&synth_image(size, &mut rng))?)?;
    Ok(ImageRecord {
        id: synth_id(index),
        pixels,
        source: ImageSource::Synth { seed, index },
    })
}

fn synth_id(index: usize) -> String {
    format!("synth_{index:06}")
}

pub fn synth_images(n: usize, size: usize, seed: u64) -> Result<Vec<ImageRecord>> {
    if size == 0 {
        return Err(invalid("synthetic image size must be positive"));
    }
    (0..n).map(|i| synth_record(size, seed, i)).collect()
}

/// Writes `n` synthetic PPM images and their manifest into `dir`.
pub fn synth_dataset(dir: impl AsRef<Path>, n: usize, size: usize, seed: u64) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(n);
    for rec in synth_images(n, size, seed)? {
        let path = format!("{}.ppm", rec.id);
        save_ppm(dir.join(&path), &rec.pixels)?;
        entries.push(ManifestEntry { id: rec.id, path });
    }
    let manifest = DatasetManifest::new(dir, entries)?;
    manifest.write()?;
    Ok(manifest)
}

/// Checks that every image is at least `min_size` pixels on each side and
/// within `[0,1]`.
pub fn validate_images(images: &[ImageRecord], min_size: usize) -> Result<()> {
    for img in images {
        if img.pixels.shape().len() != 3 || img.pixels.shape()[0] != 3 {
            return Err(format_err(format!(
                "{}: expected 3 channels, got {:?}",
                img.id,
                img.pixels.shape()
            )));
        }
        if img.height() < min_size || img.width() < min_size {
            return Err(invalid(format!(
                "{}: {}x{} is smaller than the {}-pixel training crop",
                img.id,
                img.height(),
                img.width(),
                min_size
            )));
        }
        if img.pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid(format!("{}: pixel values outside [0,1]", img.id)));
        }
    }
    Ok(())
}
