//! Forward-pass context and the parameterized layers built on the graph.
//!
//! Parameters are looked up by name in a [`ParamStore`]; a layer called
//! `stem` owns `stem.weight`, `stem.bias` and so on. The matching `init_*`
//! functions create those entries.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchNormMode, BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{glorot_uniform, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPSILON: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapKind {
    Conv,
    Other,
}

/// A named intermediate activation kept for inspection (GradCam).
#[derive(Clone, Debug)]
pub struct Tap {
    pub name: String,
    pub var: Var,
    pub kind: TapKind,
}

/// Everything a forward pass records besides the graph itself.
pub struct ForwardCtx {
    pub graph: Graph,
    pub training: bool,
    rng: ChaCha8Rng,
    taps: Vec<Tap>,
    attention_weights: Vec<Var>,
    bn_updates: Vec<(String, BatchStats)>,
}

impl ForwardCtx {
    pub fn new(training: bool, seed: u64) -> Self {
        ForwardCtx {
            graph: Graph::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            taps: Vec::new(),
            attention_weights: Vec::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn inference() -> Self {
        Self::new(false, 0)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn dropout(&mut self, x: Var, rate: f32, training: bool) -> Result<Var> {
        self.graph.dropout(x, rate, training, &mut self.rng)
    }

    pub fn tap(&mut self, name: impl Into<String>, var: Var, kind: TapKind) {
        self.taps.push(Tap { name: name.into(), var, kind });
    }

    pub fn taps(&self) -> &[Tap] {
        &self.taps
    }

    pub(crate) fn record_attention(&mut self, weights: Var) {
        self.attention_weights.push(weights);
    }

    /// Softmax weight matrices of every attention evaluation, in call order.
    pub fn attention_weights(&self) -> &[Var] {
        &self.attention_weights
    }

    pub fn bn_updates(&self) -> &[(String, BatchStats)] {
        &self.bn_updates
    }

    /// Folds this pass's batch statistics into the running buffers.
    pub fn apply_bn_updates(&self, params: &mut ParamStore) -> Result<()> {
        for (name, stats) in &self.bn_updates {
            for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let key = format!("{name}.{suffix}");
                let buf = params
                    .get_mut(&key)
                    .ok_or_else(|| Error::Config(format!("missing buffer `{key}`")))?;
                buf.data_mut()
                    .iter_mut()
                    .zip(batch)
                    .for_each(|(r, b)| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b);
            }
        }
        Ok(())
    }
}

pub fn init_conv(store: &mut ParamStore, name: &str, out_c: usize, in_c: usize, k: usize, bias: bool, rng: &mut ChaCha8Rng) {
    let w = glorot_uniform(&[out_c, in_c, k, k], in_c * k * k, out_c * k * k, rng);
    store.insert_trainable(format!("{name}.weight"), w);
    if bias {
        store.insert_trainable(format!("{name}.bias"), Tensor::zeros(&[out_c]));
    }
}

pub fn init_batchnorm(store: &mut ParamStore, name: &str, channels: usize) {
    store.insert_trainable(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
    store.insert_trainable(format!("{name}.beta"), Tensor::zeros(&[channels]));
    store.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
    store.insert_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0));
}

pub fn init_dense(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) {
    store.insert_trainable(format!("{name}.weight"), glorot_uniform(&[d_in, d_out], d_in, d_out, rng));
    store.insert_trainable(format!("{name}.bias"), Tensor::zeros(&[d_out]));
}

/// Convolution with an optional per-channel bias (used when `{name}.bias`
/// exists in the store).
pub fn conv(ctx: &mut ForwardCtx, params: &ParamStore, name: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
    let w = ctx.graph.param(params, &format!("{name}.weight"))?;
    let y = ctx.graph.conv2d(x, w, stride, padding)?;
    let bias_name = format!("{name}.bias");
    if params.contains(&bias_name) {
        let b = ctx.graph.param(params, &bias_name)?;
        ctx.graph.channel_bias(y, b)
    } else {
        Ok(y)
    }
}

pub fn batchnorm(ctx: &mut ForwardCtx, params: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let gamma = ctx.graph.param(params, &format!("{name}.gamma"))?;
    let beta = ctx.graph.param(params, &format!("{name}.beta"))?;
    if ctx.training {
        let (y, stats) = ctx.graph.batchnorm(x, gamma, beta, BN_EPSILON, BatchNormMode::Train)?;
        ctx.bn_updates.push((name.to_string(), stats.expect("training mode yields stats")));
        Ok(y)
    } else {
        let missing = |k: &str| Error::Config(format!("missing buffer `{name}.{k}`"));
        let mean = params.get(&format!("{name}.running_mean")).ok_or_else(|| missing("running_mean"))?;
        let var = params.get(&format!("{name}.running_var")).ok_or_else(|| missing("running_var"))?;
        let mode = BatchNormMode::Eval { mean: mean.data(), var: var.data() };
        Ok(ctx.graph.batchnorm(x, gamma, beta, BN_EPSILON, mode)?.0)
    }
}

pub fn dense(ctx: &mut ForwardCtx, params: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = ctx.graph.param(params, &format!("{name}.weight"))?;
    let b = ctx.graph.param(params, &format!("{name}.bias"))?;
    ctx.graph.dense(x, w, b)
}

/// `BN → ReLU → conv`, the composite used by dense layers and pre-activation
/// residual units.
pub fn bn_relu_conv(
    ctx: &mut ForwardCtx,
    params: &ParamStore,
    name: &str,
    x: Var,
    padding: usize,
) -> Result<Var> {
    let y = batchnorm(ctx, params, &format!("{name}.bn"), x)?;
    let y = ctx.graph.relu(y);
    conv(ctx, params, &format!("{name}.conv"), y, 1, padding)
}

pub fn init_bn_relu_conv(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize, k: usize, rng: &mut ChaCha8Rng) {
    init_batchnorm(store, &format!("{name}.bn"), in_c);
    init_conv(store, &format!("{name}.conv"), out_c, in_c, k, true, rng);
}
