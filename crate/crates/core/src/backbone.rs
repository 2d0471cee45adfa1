//! Miniature convolutional feature extractors.
//!
//! Every backbone starts with two 3×3 stem convolutions (stride 2 for the
//! first `downsample_stages` of them) and ends in a convolution with
//! `num_classes` output maps, whose spatial positions are flattened into an
//! `(L, num_classes)` signal per image. In between:
//!
//! * `plain_cnn` — nothing; the head is a 3×3 convolution, so the network
//!   has exactly three convolution layers.
//! * `residual` — `blocks` pre-activation residual units, `x + H(x)`.
//! * `dense_concat` — one dense block of `blocks` layers where each layer
//!   sees the channel concatenation of all earlier feature maps.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{self, ForwardCtx, TapKind};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    PlainCnn,
    Residual,
    DenseConcat,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::PlainCnn => "plain_cnn",
            BackboneKind::Residual => "residual",
            BackboneKind::DenseConcat => "dense_concat",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain_cnn" | "plain" | "cnn" => Ok(BackboneKind::PlainCnn),
            "residual" | "res" => Ok(BackboneKind::Residual),
            "dense_concat" | "dense" | "den" => Ok(BackboneKind::DenseConcat),
            other => Err(Error::Config(format!("unknown backbone kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub input_channels: usize,
    /// Residual units or dense-block layers; ignored by `plain_cnn`.
    pub blocks: usize,
    pub base_filters: usize,
    /// How many of the two stem convolutions use stride 2.
    pub downsample_stages: usize,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::DenseConcat,
            input_channels: 3,
            blocks: 3,
            base_filters: 8,
            downsample_stages: 2,
            num_classes: 2,
        }
    }
}

fn conv3_out(d: usize, stride: usize) -> usize {
    (d + 2 - 3) / stride + 1
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.input_channels, 1 | 3) {
            return Err(Error::Config(format!(
                "backbone input_channels must be 1 or 3, got {}",
                self.input_channels
            )));
        }
        if self.blocks == 0 || self.base_filters == 0 || self.num_classes == 0 {
            return Err(Error::Config("backbone blocks, base_filters and num_classes must be positive".into()));
        }
        if self.downsample_stages > 2 {
            return Err(Error::Config(format!(
                "downsample_stages must be at most 2, got {}",
                self.downsample_stages
            )));
        }
        Ok(())
    }

    fn stem_strides(&self) -> [usize; 2] {
        [0, 1].map(|i| if i < self.downsample_stages { 2 } else { 1 })
    }

    /// Spatial size of the final feature map for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let [s1, s2] = self.stem_strides();
        (conv3_out(conv3_out(h, s1), s2), conv3_out(conv3_out(w, s1), s2))
    }

    /// Number of signal rows `L` for an `h × w` input.
    pub fn signal_len(&self, h: usize, w: usize) -> usize {
        let (oh, ow) = self.output_hw(h, w);
        oh * ow
    }

    /// Channels entering the head convolution.
    fn trunk_channels(&self) -> usize {
        match self.kind {
            BackboneKind::PlainCnn | BackboneKind::Residual => self.base_filters,
            BackboneKind::DenseConcat => self.base_filters + self.blocks * self.base_filters,
        }
    }

    pub fn conv_layer_count(&self) -> usize {
        match self.kind {
            BackboneKind::PlainCnn => 3,
            BackboneKind::Residual => 3 + 2 * self.blocks,
            BackboneKind::DenseConcat => 3 + self.blocks,
        }
    }

    pub fn init_params(&self, store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) {
        let f = self.base_filters;
        layers::init_conv(store, &format!("{prefix}.stem1"), f, self.input_channels, 3, true, rng);
        layers::init_batchnorm(store, &format!("{prefix}.stem1_bn"), f);
        layers::init_conv(store, &format!("{prefix}.stem2"), f, f, 3, true, rng);
        match self.kind {
            BackboneKind::PlainCnn => {
                layers::init_batchnorm(store, &format!("{prefix}.stem2_bn"), f);
                layers::init_conv(store, &format!("{prefix}.head"), self.num_classes, f, 3, true, rng);
            }
            BackboneKind::Residual => {
                for b in 0..self.blocks {
                    init_residual_block(store, &format!("{prefix}.res{b}"), f, f, rng);
                }
                layers::init_bn_relu_conv(store, &format!("{prefix}.head"), f, self.num_classes, 1, rng);
            }
            BackboneKind::DenseConcat => {
                init_dense_block(store, &format!("{prefix}.dense"), f, f, self.blocks, rng);
                layers::init_bn_relu_conv(store, &format!("{prefix}.head"), self.trunk_channels(), self.num_classes, 1, rng);
            }
        }
    }
}

pub fn init_residual_block(store: &mut ParamStore, prefix: &str, in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) {
    layers::init_bn_relu_conv(store, &format!("{prefix}.a"), in_c, out_c, 3, rng);
    layers::init_bn_relu_conv(store, &format!("{prefix}.b"), out_c, out_c, 3, rng);
    if in_c != out_c {
        layers::init_conv(store, &format!("{prefix}.proj"), out_c, in_c, 1, false, rng);
    }
}

pub fn init_dense_block(store: &mut ParamStore, prefix: &str, in_c: usize, growth: usize, layers_n: usize, rng: &mut ChaCha8Rng) {
    for i in 0..layers_n {
        layers::init_bn_relu_conv(store, &format!("{prefix}.layer{i}"), in_c + i * growth, growth, 3, rng);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ResidualOutput {
    /// `H(x) + skip(x)`.
    pub output: Var,
    /// `H(x)` alone.
    pub transform: Var,
    /// `x`, or its 1×1 projection when channel counts differ.
    pub skip: Var,
}

/// Pre-activation residual unit: `H = (BN→ReLU→conv3×3)²`, output `H(x) + x`.
pub fn residual_block(ctx: &mut ForwardCtx, params: &ParamStore, prefix: &str, x: Var) -> Result<ResidualOutput> {
    let h = layers::bn_relu_conv(ctx, params, &format!("{prefix}.a"), x, 1)?;
    let h = layers::bn_relu_conv(ctx, params, &format!("{prefix}.b"), h, 1)?;
    let skip = if params.contains(&format!("{prefix}.proj.weight")) {
        layers::conv(ctx, params, &format!("{prefix}.proj"), x, 1, 0)?
    } else {
        x
    };
    if ctx.graph.shape(h) != ctx.graph.shape(skip) {
        return Err(Error::Config(format!(
            "residual unit `{prefix}` maps {:?} to {:?} and has no projection for the skip path",
            ctx.graph.shape(skip),
            ctx.graph.shape(h)
        )));
    }
    let output = ctx.graph.add(h, skip)?;
    Ok(ResidualOutput { output, transform: h, skip })
}

#[derive(Clone, Debug)]
pub struct DenseBlockOutput {
    /// Concatenation `[x0, x1, …, x_layers]` along channels.
    pub output: Var,
    /// What each layer received: `layer_inputs[i] = [x0, …, x_i]`.
    pub layer_inputs: Vec<Var>,
}

pub fn dense_block(ctx: &mut ForwardCtx, params: &ParamStore, prefix: &str, x0: Var, layers_n: usize) -> Result<DenseBlockOutput> {
    if ctx.graph.shape(x0).len() != 4 {
        return Err(Error::Config(format!(
            "dense block `{prefix}` needs an NCHW input, got {:?}",
            ctx.graph.shape(x0)
        )));
    }
    let mut features = vec![x0];
    let mut layer_inputs = Vec::with_capacity(layers_n);
    for i in 0..layers_n {
        let input = if features.len() == 1 {
            x0
        } else {
            ctx.graph
                .concat(&features, 1)
                .map_err(|e| Error::Config(format!("dense block `{prefix}` layer {i}: {e}")))?
        };
        layer_inputs.push(input);
        let y = layers::bn_relu_conv(ctx, params, &format!("{prefix}.layer{i}"), input, 1)?;
        features.push(y);
    }
    let output = ctx
        .graph
        .concat(&features, 1)
        .map_err(|e| Error::Config(format!("dense block `{prefix}`: {e}")))?;
    Ok(DenseBlockOutput { output, layer_inputs })
}

/// Runs the backbone on an `(N, C, H, W)` batch and returns `(N, L, classes)`.
///
/// Registers the final convolution as the conv tap `{prefix}.last_conv`.
pub fn backbone_forward(ctx: &mut ForwardCtx, params: &ParamStore, prefix: &str, config: &BackboneConfig, images: Var) -> Result<Var> {
    let shape = ctx.graph.shape(images).to_vec();
    if shape.len() != 4 || shape[1] != config.input_channels {
        return Err(Error::Input(format!(
            "backbone `{prefix}` expects (N, {}, H, W) input, got {shape:?}",
            config.input_channels
        )));
    }
    let [s1, s2] = config.stem_strides();
    let x = layers::conv(ctx, params, &format!("{prefix}.stem1"), images, s1, 1)?;
    let x = layers::batchnorm(ctx, params, &format!("{prefix}.stem1_bn"), x)?;
    let x = ctx.graph.relu(x);
    let x = layers::conv(ctx, params, &format!("{prefix}.stem2"), x, s2, 1)?;
    ctx.tap(format!("{prefix}.stem2"), x, TapKind::Conv);
    let head = match config.kind {
        BackboneKind::PlainCnn => {
            let x = layers::batchnorm(ctx, params, &format!("{prefix}.stem2_bn"), x)?;
            let x = ctx.graph.relu(x);
            layers::conv(ctx, params, &format!("{prefix}.head"), x, 1, 1)?
        }
        BackboneKind::Residual => {
            let mut x = x;
            for b in 0..config.blocks {
                x = residual_block(ctx, params, &format!("{prefix}.res{b}"), x)?.output;
            }
            layers::bn_relu_conv(ctx, params, &format!("{prefix}.head"), x, 0)?
        }
        BackboneKind::DenseConcat => {
            let block = dense_block(ctx, params, &format!("{prefix}.dense"), x, config.blocks)?;
            layers::bn_relu_conv(ctx, params, &format!("{prefix}.head"), block.output, 0)?
        }
    };
    ctx.tap(format!("{prefix}.last_conv"), head, TapKind::Conv);
    let s = ctx.graph.shape(head).to_vec();
    let flat = ctx.graph.reshape(head, &[s[0], s[1], s[2] * s[3]])?;
    let signal = ctx.graph.transpose12(flat)?;
    ctx.tap(format!("{prefix}.signal"), signal, TapKind::Other);
    Ok(signal)
}
