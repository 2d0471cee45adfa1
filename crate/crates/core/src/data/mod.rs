//! Synthetic cell images, manifests, augmentation and fold construction.

mod augment;
mod folds;
mod imageio;
mod synth;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment, max_shift, rotate, shift, AugmentKind, Augmenter, ZcaTransform, ZCA_EPSILON};
pub use folds::{audit_split, build_training_set, stratified_kfold, FoldSplit, LeakageAudit, Sample};
pub(crate) use imageio::image_error;
pub use imageio::{load_png, resample_image, save_png};
pub use synth::{generate_synthetic_dataset, synthesize_cell, synthesize_images, SyntheticConfig, GENERATOR_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Metastasizing,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Normal, Label::Metastasizing];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Metastasizing => "metastasizing",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Label::Normal),
            "metastasizing" => Ok(Label::Metastasizing),
            other => Err(Error::Input(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    /// Image path relative to the manifest's directory.
    pub path: PathBuf,
    pub label: Label,
    pub fold: Option<usize>,
    pub augmented: bool,
    pub parent_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub image_side: usize,
    pub generator_version: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    pub fn fold_count(&self) -> usize {
        self.entries.iter().filter_map(|e| e.fold).max().map_or(0, |m| m + 1)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// A manifest together with its decoded images, index-aligned with
/// `manifest.entries`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Tensor>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, images: Vec<Tensor>) -> Result<Self> {
        if manifest.entries.len() != images.len() {
            return Err(Error::Input(format!(
                "{} manifest entries but {} images",
                manifest.entries.len(),
                images.len()
            )));
        }
        Ok(Dataset { manifest, images })
    }

    /// Reads a manifest file and every PNG it references.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let images = manifest
            .entries
            .iter()
            .map(|e| load_png(&root.join(&e.path)))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(manifest, images)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Stable per-item seed from a global seed and a string id (FNV-1a folded
/// through a SplitMix64 finalizer).
pub fn derive_seed(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stacks `(3, H, W)` images into an `(N, 3, H, W)` batch.
pub fn batch_images(images: &[&Tensor]) -> Result<Tensor> {
    Tensor::stack(images)
}

/// One-hot `(N, classes)` targets.
pub fn one_hot(labels: &[Label]) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), Label::ALL.len()]);
    for (i, l) in labels.iter().enumerate() {
        t.data_mut()[i * Label::ALL.len() + l.index()] = 1.0;
    }
    t
}
