//! End-to-end classifiers of the RGB and MHL families.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, QuerySource, CHANNEL_NAMES};
use crate::autodiff::Var;
use crate::backbone::{backbone_forward, BackboneConfig};
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Per-channel backbones and six channel-pair attention blocks.
    Rgb,
    /// One backbone on the whole image and a single self-attention block.
    Mhl,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Rgb => "rgb",
            Family::Mhl => "mhl",
        }
    }

    pub fn attention_blocks(self) -> usize {
        match self {
            Family::Rgb => 6,
            Family::Mhl => 1,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(Family::Rgb),
            "mhl" => Ok(Family::Mhl),
            other => Err(Error::Config(format!("unknown family `{other}` (expected rgb or mhl)"))),
        }
    }
}

impl FromStr for QuerySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row" => Ok(QuerySource::Row),
            "column" => Ok(QuerySource::Column),
            other => Err(Error::Config(format!("unknown query source `{other}` (expected row or column)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub family: Family,
    pub heads: usize,
    /// Width of each backbone signal row; equals the backbone class count.
    pub d_model: usize,
    pub backbone: BackboneConfig,
    pub mlp_dims: (usize, usize),
    pub mlp_dropout: f32,
    pub num_classes: usize,
    pub image_side: usize,
    pub query_source: QuerySource,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            family: Family::Mhl,
            heads: 2,
            d_model: 2,
            backbone: BackboneConfig::default(),
            mlp_dims: (1024, 512),
            mlp_dropout: 0.3,
            num_classes: 2,
            image_side: 64,
            query_source: QuerySource::Row,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone_for_branch().validate()?;
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be a positive multiple of heads ({})",
                self.d_model, self.heads
            )));
        }
        if self.d_model != self.backbone.num_classes {
            return Err(Error::Config(format!(
                "d_model ({}) must equal the backbone signal width ({})",
                self.d_model, self.backbone.num_classes
            )));
        }
        if !(0.0..1.0).contains(&self.mlp_dropout) {
            return Err(Error::Config(format!("mlp_dropout must lie in [0, 1), got {}", self.mlp_dropout)));
        }
        if self.mlp_dims.0 == 0 || self.mlp_dims.1 == 0 || self.num_classes < 2 {
            return Err(Error::Config("MLP widths must be positive and num_classes at least 2".into()));
        }
        if self.image_side < 8 {
            return Err(Error::Config(format!("image_side must be at least 8, got {}", self.image_side)));
        }
        Ok(())
    }

    /// Backbone configuration as instantiated per branch: single-channel
    /// for RGB, three-channel for MHL.
    pub fn backbone_for_branch(&self) -> BackboneConfig {
        let mut b = self.backbone.clone();
        b.input_channels = match self.family {
            Family::Rgb => 1,
            Family::Mhl => 3,
        };
        b
    }

    pub fn signal_len(&self) -> usize {
        self.backbone.signal_len(self.image_side, self.image_side)
    }

    /// Width of the flattened attention features fed to the MLP.
    pub fn feature_len(&self) -> usize {
        self.signal_len() * self.d_model * self.family.attention_blocks()
    }
}

/// Forward-pass outputs of [`Model::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub logits: Var,
    pub probs: Var,
    /// Concatenated attention features before flattening, `(N, L, F)`.
    pub attention: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: EncoderConfig,
}

impl Model {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model { config })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Backbone parameter prefixes, one per branch.
    pub fn backbone_prefixes(&self) -> Vec<String> {
        match self.config.family {
            Family::Rgb => CHANNEL_NAMES.iter().map(|c| format!("backbone.{c}")).collect(),
            Family::Mhl => vec!["backbone".to_string()],
        }
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let branch = c.backbone_for_branch();
        for prefix in self.backbone_prefixes() {
            branch.init_params(&mut store, &prefix, &mut rng);
        }
        match c.family {
            Family::Rgb => attention::init_dhead_rgb(&mut store, "attention", c.heads, c.d_model, &mut rng),
            Family::Mhl => attention::init_mal_mhl(&mut store, "attention", c.heads, c.d_model, &mut rng),
        }
        attention::init_mlp_head(&mut store, "mlp", c.feature_len(), c.mlp_dims, c.num_classes, &mut rng);
        store
    }

    /// Runs the classifier on an `(N, 3, H, W)` batch already placed on the
    /// context's graph.
    pub fn forward(&self, ctx: &mut ForwardCtx, params: &ParamStore, images: Var) -> Result<ModelOutput> {
        let c = &self.config;
        let s = ctx.graph.shape(images).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != c.image_side || s[3] != c.image_side {
            return Err(Error::Config(format!(
                "model expects (N, 3, {side}, {side}) images, got {s:?}",
                side = c.image_side
            )));
        }
        let branch = c.backbone_for_branch();
        let attention = match c.family {
            Family::Rgb => {
                let planes = attention::isolate_channel_vars(ctx, images)?;
                let prefixes = self.backbone_prefixes();
                let mut signals = [planes[0]; 3];
                for i in 0..3 {
                    signals[i] = backbone_forward(ctx, params, &prefixes[i], &branch, planes[i])?;
                }
                let dheads = attention::build_dhead_rgb(ctx, params, "attention", signals, c.heads, c.query_source)?;
                attention::mal_rgb(ctx, &dheads)?
            }
            Family::Mhl => {
                let signal = backbone_forward(ctx, params, "backbone", &branch, images)?;
                attention::mal_mhl(ctx, params, "attention", signal, c.heads)?
            }
        };
        let features = ctx.graph.flatten(attention)?;
        let out = attention::mlp_head(ctx, params, "mlp", features, c.mlp_dropout)?;
        Ok(ModelOutput { logits: out.logits, probs: out.probs, attention })
    }

    /// Class probabilities `(N, classes)` in inference mode.
    pub fn predict(&self, params: &ParamStore, images: &Tensor) -> Result<Tensor> {
        Ok(self.predict_with_logits(params, images)?.0)
    }

    /// Inference-mode probabilities and pre-softmax logits.
    pub fn predict_with_logits(&self, params: &ParamStore, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut ctx = ForwardCtx::inference();
        let x = ctx.graph.constant(images.clone());
        let out = self.forward(&mut ctx, params, x)?;
        Ok((ctx.graph.value(out.probs).clone(), ctx.graph.value(out.logits).clone()))
    }
}
