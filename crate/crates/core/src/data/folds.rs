use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, Augmenter, Dataset, DatasetManifest, Label, ManifestEntry, ZcaTransform};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Assigns fold ids: each class is shuffled, then dealt round-robin with a
/// pointer that carries over from one class to the next, so fold sizes
/// differ by at most one.
pub fn stratified_kfold(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<DatasetManifest> {
    let min_class = Label::ALL.iter().map(|&l| manifest.count(l)).min().unwrap_or(0);
    if k < 2 || k > min_class {
        return Err(Error::Config(format!(
            "k-fold needs 2 <= k <= smallest class size ({min_class}), got k = {k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = manifest.clone();
    let mut pointer = 0usize;
    for label in Label::ALL {
        let mut idx: Vec<usize> = (0..out.entries.len()).filter(|&i| out.entries[i].label == label).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            out.entries[i].fold = Some(pointer % k);
            pointer += 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub entry: ManifestEntry,
    pub image: Tensor,
}

#[derive(Clone, Debug)]
pub struct FoldSplit {
    pub test_fold: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl FoldSplit {
    pub fn audit(&self) -> LeakageAudit {
        let train: Vec<&ManifestEntry> = self.train.iter().map(|s| &s.entry).collect();
        let test: Vec<&ManifestEntry> = self.test.iter().map(|s| &s.entry).collect();
        audit_split(&train, &test)
    }
}

/// Result of checking a train/test split for leakage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageAudit {
    pub train_entries: usize,
    pub test_entries: usize,
    pub augmented_in_test: Vec<String>,
    /// Training entries that are test images or descend from one.
    pub leaked: Vec<String>,
}

impl LeakageAudit {
    pub fn is_clean(&self) -> bool {
        self.leaked.is_empty() && self.augmented_in_test.is_empty()
    }
}

pub fn audit_split(train: &[&ManifestEntry], test: &[&ManifestEntry]) -> LeakageAudit {
    let test_ids: BTreeSet<&str> = test.iter().map(|e| e.image_id.as_str()).collect();
    let leaked = train
        .iter()
        .filter(|e| {
            test_ids.contains(e.image_id.as_str()) || e.parent_id.as_deref().is_some_and(|p| test_ids.contains(p))
        })
        .map(|e| e.image_id.clone())
        .collect();
    let augmented_in_test = test.iter().filter(|e| e.augmented).map(|e| e.image_id.clone()).collect();
    LeakageAudit { train_entries: train.len(), test_entries: test.len(), augmented_in_test, leaked }
}

/// Training pool for one fold: the raw images of every other fold plus
/// `augment_factor` augmented variants of each. The test fold is returned
/// untouched. ZCA is fitted on the raw training images of the fold.
pub fn build_training_set(dataset: &Dataset, test_fold: usize, augment_factor: usize, seed: u64) -> Result<FoldSplit> {
    let entries = &dataset.manifest.entries;
    if let Some(e) = entries.iter().find(|e| e.fold.is_none()) {
        return Err(Error::Input(format!("entry `{}` has no fold assignment", e.image_id)));
    }
    let folds = dataset.manifest.fold_count();
    if test_fold >= folds {
        return Err(Error::Parameter(format!("test fold {test_fold} out of range for {folds} folds")));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (e, img) in entries.iter().zip(&dataset.images) {
        let s = Sample { entry: e.clone(), image: img.clone() };
        if e.fold == Some(test_fold) {
            test.push(s);
        } else if !e.augmented {
            train.push(s);
        }
    }
    if augment_factor > 0 && !train.is_empty() {
        let raw: Vec<&Tensor> = train.iter().map(|s| &s.image).collect();
        let augmenter = Augmenter { zca: Some(ZcaTransform::fit(&raw)?), noise_sigma: 0.0 };
        let variants = train
            .par_iter()
            .flat_map_iter(|parent| (0..augment_factor).map(move |k| (parent, k)))
            .map(|(parent, k)| {
                let id = format!("{}_aug{k}", parent.entry.image_id);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("{id}@fold{test_fold}")));
                let image = augmenter.random_variant(&parent.image, &mut rng)?;
                let entry = ManifestEntry {
                    path: PathBuf::from("augmented").join(format!("{id}.png")),
                    image_id: id,
                    label: parent.entry.label,
                    fold: parent.entry.fold,
                    augmented: true,
                    parent_id: Some(parent.entry.image_id.clone()),
                };
                Ok(Sample { entry, image })
            })
            .collect::<Result<Vec<_>>>()?;
        train.extend(variants);
    }
    let split = FoldSplit { test_fold, train, test };
    let audit = split.audit();
    if !audit.is_clean() {
        return Err(Error::Input(format!("train/test leakage detected: {:?}", audit.leaked)));
    }
    Ok(split)
}
