//! SGD training with binary cross-entropy, and the k-fold driver.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_training_set, derive_seed, one_hot, Dataset, FoldSplit, Label, LeakageAudit};
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::metrics::{aggregate, compute_metrics, AggregateReport, MetricsReport};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Epoch counts from this value upward use the long regime.
pub const LONG_REGIME_EPOCHS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochRegime {
    Short,
    Long,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Augmented variants generated per raw training image in each fold.
    pub augment_factor: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 50, lr: 0.001, batch_size: 8, seed: 0, augment_factor: 2 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn regime(&self) -> EpochRegime {
        if self.epochs >= LONG_REGIME_EPOCHS {
            EpochRegime::Long
        } else {
            EpochRegime::Short
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    /// Mean batch loss per epoch.
    pub loss_trace: Vec<f64>,
    pub steps: usize,
}

/// Trains `params` in place on `(image, label)` pairs and returns the
/// per-epoch mean loss.
pub fn train_model(
    model: &Model,
    mut params: ParamStore,
    cfg: &TrainConfig,
    images: &[&Tensor],
    labels: &[Label],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Input(format!(
            "training needs matching non-empty images and labels, got {} and {}",
            images.len(),
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let batches = order.chunks(cfg.batch_size).count();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Tensor> = chunk.iter().map(|&i| images[i]).collect();
            let targets = one_hot(&chunk.iter().map(|&i| labels[i]).collect::<Vec<_>>());
            let mut ctx = ForwardCtx::new(true, derive_seed(cfg.seed, &format!("dropout/{epoch}/{b}")));
            let x = ctx.graph.constant(Tensor::stack(&batch)?);
            let out = model.forward(&mut ctx, &params, x)?;
            let loss = ctx.graph.bce_loss(out.probs, &targets)?;
            let value = f64::from(ctx.graph.value(loss).data()[0]);
            if !value.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss {value} at epoch {epoch}, batch {b}")));
            }
            ctx.graph.backward(loss)?;
            ctx.graph.take_param_grads(&mut params)?;
            params.sgd_step(cfg.lr)?;
            ctx.apply_bn_updates(&mut params)?;
            total += value;
            steps += 1;
        }
        loss_trace.push(total / batches as f64);
    }
    Ok(TrainOutcome { params, loss_trace, steps })
}

/// Inference-mode probabilities for many images, evaluated in chunks.
pub fn predict_batched(model: &Model, params: &ParamStore, images: &[&Tensor], chunk: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * model.config().num_classes);
    for part in images.chunks(chunk.max(1)) {
        let p = model.predict(params, &Tensor::stack(part)?)?;
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![images.len(), model.config().num_classes], data)
}

/// Everything produced for one cross-validation fold.
#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub metrics: MetricsReport,
    pub loss_trace: Vec<f64>,
    pub audit: LeakageAudit,
    pub train_size: usize,
    pub test_ids: Vec<String>,
    pub test_labels: Vec<usize>,
    pub test_probs: Tensor,
    pub params: ParamStore,
}

#[derive(Clone, Debug)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    pub report: AggregateReport,
}

fn run_fold(model: &Model, cfg: &TrainConfig, split: FoldSplit) -> Result<FoldResult> {
    let fold = split.test_fold;
    let audit = split.audit();
    let fold_seed = derive_seed(cfg.seed, &format!("fold{fold}"));
    let params = model.init_params(derive_seed(fold_seed, "init"));
    let train_cfg = TrainConfig { seed: fold_seed, ..cfg.clone() };
    let images: Vec<&Tensor> = split.train.iter().map(|s| &s.image).collect();
    let labels: Vec<Label> = split.train.iter().map(|s| s.entry.label).collect();
    let outcome = train_model(model, params, &train_cfg, &images, &labels)?;
    let test_images: Vec<&Tensor> = split.test.iter().map(|s| &s.image).collect();
    let test_labels: Vec<usize> = split.test.iter().map(|s| s.entry.label.index()).collect();
    let probs = predict_batched(model, &outcome.params, &test_images, 16)?;
    let metrics = compute_metrics(&probs, &test_labels)?;
    Ok(FoldResult {
        fold,
        metrics,
        loss_trace: outcome.loss_trace,
        audit,
        train_size: split.train.len(),
        test_ids: split.test.iter().map(|s| s.entry.image_id.clone()).collect(),
        test_labels,
        test_probs: probs,
        params: outcome.params,
    })
}

/// Trains a fresh model per fold and evaluates it on the untouched test
/// fold. Folds run on the current rayon pool; results do not depend on the
/// thread count.
pub fn cross_validate(model: &Model, cfg: &TrainConfig, dataset: &Dataset) -> Result<CrossValidation> {
    cfg.validate()?;
    let k = dataset.manifest.fold_count();
    if k < 2 {
        return Err(Error::Input(format!("cross-validation needs at least 2 folds, found {k}")));
    }
    let folds = (0..k)
        .into_par_iter()
        .map(|fold| {
            let split = build_training_set(dataset, fold, cfg.augment_factor, derive_seed(cfg.seed, "augment"))?;
            run_fold(model, cfg, split)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate(&folds.iter().map(|f| f.metrics.clone()).collect::<Vec<_>>());
    Ok(CrossValidation { folds, report })
}
