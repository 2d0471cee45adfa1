//! Scaled dot-product attention over backbone signals and the two
//! multi-attention levels built from it.
//!
//! * RGB family: the three channel signals `R, G, B` feed six attention
//!   blocks `dh(i, j)` for the upper triangle `i ≤ j` of the channel-pair
//!   matrix, whose outputs are concatenated along the feature axis.
//! * MHL family: one self-attention block over the whole-image signal.
//!
//! Each block is `MHA(Q, K, V) = concat(head_1 … head_n)·W_O` with
//! `head_c = softmax((Q·W_Q,c)(K·W_K,c)ᵀ / √d_k)(V·W_V,c)`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{self, ForwardCtx, TapKind};
use crate::params::{glorot_uniform, ParamStore};
use crate::tensor::Tensor;

/// Which channel of a cross-channel pair `dh(i, j)` supplies the queries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    /// Queries from `i`, keys and values from `j`.
    #[default]
    Row,
    /// Queries from `j`, keys and values from `i`.
    Column,
}

/// The channel pairs of the upper-triangular head matrix, in output order.
pub const RGB_PAIRS: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];
pub const CHANNEL_NAMES: [&str; 3] = ["red", "green", "blue"];

/// Splits a `(3, H, W)` image into its red, green and blue planes.
pub fn isolate_channels(image: &Tensor) -> Result<[Tensor; 3]> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::Input(format!(
            "channel isolation needs a (3, H, W) image, got {:?}",
            image.shape()
        )));
    }
    Ok([0, 1, 2].map(|c| image.slice_axis(0, c, 1).expect("channel index in range")))
}

/// Graph version of [`isolate_channels`] for an `(N, 3, H, W)` batch.
pub fn isolate_channel_vars(ctx: &mut ForwardCtx, images: Var) -> Result<[Var; 3]> {
    let s = ctx.graph.shape(images);
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Input(format!("channel isolation needs (N, 3, H, W), got {s:?}")));
    }
    let r = ctx.graph.slice(images, 1, 0, 1)?;
    let g = ctx.graph.slice(images, 1, 1, 1)?;
    let b = ctx.graph.slice(images, 1, 2, 1)?;
    Ok([r, g, b])
}

/// Per-head projections of one attention block.
#[derive(Clone, Debug)]
pub struct HeadWeights {
    pub query: Vec<Var>,
    pub key: Vec<Var>,
    pub value: Vec<Var>,
    pub output: Var,
}

impl HeadWeights {
    pub fn init(store: &mut ParamStore, prefix: &str, heads: usize, d_model: usize, rng: &mut ChaCha8Rng) {
        let d_head = d_model / heads;
        for c in 0..heads {
            for kind in ["wq", "wk", "wv"] {
                let w = glorot_uniform(&[d_model, d_head], d_model, d_head, rng);
                store.insert_trainable(format!("{prefix}.head{c}.{kind}"), w);
            }
        }
        let wo = glorot_uniform(&[heads * d_head, d_model], heads * d_head, d_model, rng);
        store.insert_trainable(format!("{prefix}.wo"), wo);
    }

    pub fn bind(ctx: &mut ForwardCtx, params: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        let (mut query, mut key, mut value) = (Vec::new(), Vec::new(), Vec::new());
        for c in 0..heads {
            query.push(ctx.graph.param(params, &format!("{prefix}.head{c}.wq"))?);
            key.push(ctx.graph.param(params, &format!("{prefix}.head{c}.wk"))?);
            value.push(ctx.graph.param(params, &format!("{prefix}.head{c}.wv"))?);
        }
        let output = ctx.graph.param(params, &format!("{prefix}.wo"))?;
        Ok(HeadWeights { query, key, value, output })
    }

    pub fn heads(&self) -> usize {
        self.query.len()
    }
}

fn as_batched(ctx: &mut ForwardCtx, x: Var) -> Result<(Var, bool)> {
    match ctx.graph.shape(x).to_vec().as_slice() {
        [l, d] => Ok((ctx.graph.reshape(x, &[1, *l, *d])?, true)),
        [_, _, _] => Ok((x, false)),
        other => Err(Error::Dimension(format!("attention operands must be (L, d) or (N, L, d), got {other:?}"))),
    }
}

/// `softmax(Q·Kᵀ / √d_k)·V` for `(L, d)` or batched `(N, L, d)` operands.
///
/// The softmax weight matrix is recorded on the context (see
/// [`ForwardCtx::attention_weights`]).
pub fn scaled_dot_attention(ctx: &mut ForwardCtx, q: Var, k: Var, v: Var) -> Result<Var> {
    let (q3, unbatched) = as_batched(ctx, q)?;
    let (k3, _) = as_batched(ctx, k)?;
    let (v3, _) = as_batched(ctx, v)?;
    let (qs, ks, vs) = (ctx.graph.shape(q3).to_vec(), ctx.graph.shape(k3).to_vec(), ctx.graph.shape(v3).to_vec());
    if qs[0] != ks[0] || ks[0] != vs[0] || qs[2] != ks[2] || ks[1] != vs[1] {
        return Err(Error::Dimension(format!(
            "attention operands disagree: Q {:?}, K {:?}, V {:?}",
            ctx.graph.shape(q),
            ctx.graph.shape(k),
            ctx.graph.shape(v)
        )));
    }
    let d_k = qs[2];
    let (out, weights) = ctx.graph.attention(q3, k3, v3, 1.0 / (d_k as f32).sqrt())?;
    ctx.record_attention(weights);
    if unbatched {
        let s = ctx.graph.shape(out).to_vec();
        ctx.graph.reshape(out, &[s[1], s[2]])
    } else {
        Ok(out)
    }
}

/// `(…, L, d) · (d, e)` applied row-wise.
fn project(ctx: &mut ForwardCtx, x: Var, w: Var) -> Result<Var> {
    let s = ctx.graph.shape(x).to_vec();
    let rows: usize = s[..s.len() - 1].iter().product();
    let flat = ctx.graph.reshape(x, &[rows, s[s.len() - 1]])?;
    let y = ctx.graph.matmul(flat, w)?;
    let mut out_shape = s.clone();
    *out_shape.last_mut().unwrap() = ctx.graph.shape(w)[1];
    ctx.graph.reshape(y, &out_shape)
}

pub fn multi_head_attention(ctx: &mut ForwardCtx, q: Var, k: Var, v: Var, weights: &HeadWeights) -> Result<Var> {
    if weights.heads() == 0 || weights.key.len() != weights.heads() || weights.value.len() != weights.heads() {
        return Err(Error::Dimension("multi-head attention needs at least one complete head".into()));
    }
    let mut heads = Vec::with_capacity(weights.heads());
    for c in 0..weights.heads() {
        let qc = project(ctx, q, weights.query[c])?;
        let kc = project(ctx, k, weights.key[c])?;
        let vc = project(ctx, v, weights.value[c])?;
        heads.push(scaled_dot_attention(ctx, qc, kc, vc)?);
    }
    let last = ctx.graph.shape(heads[0]).len() - 1;
    let joined = if heads.len() == 1 { heads[0] } else { ctx.graph.concat(&heads, last)? };
    project(ctx, joined, weights.output)
}

fn block_name(prefix: &str, i: usize, j: usize) -> String {
    format!("{prefix}.dh_{}_{}", CHANNEL_NAMES[i], CHANNEL_NAMES[j])
}

pub fn init_dhead_rgb(store: &mut ParamStore, prefix: &str, heads: usize, d_model: usize, rng: &mut ChaCha8Rng) {
    for (i, j) in RGB_PAIRS {
        HeadWeights::init(store, &block_name(prefix, i, j), heads, d_model, rng);
    }
}

/// The six upper-triangular blocks `dh(R,R), dh(R,G), dh(R,B), dh(G,G),
/// dh(G,B), dh(B,B)`; the symmetric lower entries are never evaluated.
pub fn build_dhead_rgb(
    ctx: &mut ForwardCtx,
    params: &ParamStore,
    prefix: &str,
    signals: [Var; 3],
    heads: usize,
    query_source: QuerySource,
) -> Result<[Var; 6]> {
    let s0 = ctx.graph.shape(signals[0]).to_vec();
    if signals.iter().any(|&s| ctx.graph.shape(s) != s0.as_slice()) {
        return Err(Error::Dimension(format!(
            "channel signals differ in shape: {:?}",
            signals.map(|s| ctx.graph.shape(s).to_vec())
        )));
    }
    let mut out = Vec::with_capacity(6);
    for (i, j) in RGB_PAIRS {
        let name = block_name(prefix, i, j);
        let w = HeadWeights::bind(ctx, params, &name, heads)?;
        let (qi, kv) = match query_source {
            QuerySource::Row => (signals[i], signals[j]),
            QuerySource::Column => (signals[j], signals[i]),
        };
        let y = multi_head_attention(ctx, qi, kv, kv, &w)?;
        ctx.tap(name, y, TapKind::Other);
        out.push(y);
    }
    Ok(out.try_into().expect("six pairs"))
}

/// Concatenates the six blocks along the feature axis, in the order given.
pub fn mal_rgb(ctx: &mut ForwardCtx, dheads: &[Var]) -> Result<Var> {
    if dheads.len() != 6 {
        return Err(Error::Input(format!("the RGB attention level needs 6 blocks, got {}", dheads.len())));
    }
    let last = ctx.graph.shape(dheads[0]).len() - 1;
    ctx.graph.concat(dheads, last)
}

/// Single self-attention block; the concatenation over one element is the
/// identity.
pub fn mal_mhl(ctx: &mut ForwardCtx, params: &ParamStore, prefix: &str, signal: Var, heads: usize) -> Result<Var> {
    let name = format!("{prefix}.dh_rgb_rgb");
    let w = HeadWeights::bind(ctx, params, &name, heads)?;
    let y = multi_head_attention(ctx, signal, signal, signal, &w)?;
    ctx.tap(name, y, TapKind::Other);
    Ok(y)
}

pub fn init_mal_mhl(store: &mut ParamStore, prefix: &str, heads: usize, d_model: usize, rng: &mut ChaCha8Rng) {
    HeadWeights::init(store, &format!("{prefix}.dh_rgb_rgb"), heads, d_model, rng);
}

#[derive(Clone, Copy, Debug)]
pub struct MlpOutput {
    /// Pre-softmax class scores `(N, classes)`.
    pub logits: Var,
    pub probs: Var,
}

pub fn init_mlp_head(store: &mut ParamStore, prefix: &str, d_in: usize, dims: (usize, usize), classes: usize, rng: &mut ChaCha8Rng) {
    layers::init_dense(store, &format!("{prefix}.fc1"), d_in, dims.0, rng);
    layers::init_dense(store, &format!("{prefix}.fc2"), dims.0, dims.1, rng);
    layers::init_dense(store, &format!("{prefix}.out"), dims.1, classes, rng);
}

/// `dense→ReLU→dropout→dense→ReLU→dropout→dense→softmax` on `(N, F)`.
pub fn mlp_head(ctx: &mut ForwardCtx, params: &ParamStore, prefix: &str, features: Var, dropout: f32) -> Result<MlpOutput> {
    if ctx.graph.shape(features).len() != 2 {
        return Err(Error::Dimension(format!(
            "MLP head needs (N, F) features, got {:?}",
            ctx.graph.shape(features)
        )));
    }
    let training = ctx.training;
    let mut x = features;
    for layer in ["fc1", "fc2"] {
        x = layers::dense(ctx, params, &format!("{prefix}.{layer}"), x)?;
        x = ctx.graph.relu(x);
        ctx.tap(format!("{prefix}.{layer}"), x, TapKind::Other);
        x = ctx.dropout(x, dropout, training)?;
    }
    let logits = layers::dense(ctx, params, &format!("{prefix}.out"), x)?;
    let probs = ctx.graph.softmax(logits, 1)?;
    Ok(MlpOutput { logits, probs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isolate_constant_planes() {
        let img = Tensor::from_fn(&[3, 2, 2], |i| (i / 4 + 1) as f32);
        let [r, g, b] = isolate_channels(&img).unwrap();
        assert!(r.data().iter().all(|&v| v == 1.0));
        assert!(g.data().iter().all(|&v| v == 2.0));
        assert!(b.data().iter().all(|&v| v == 3.0));
        assert_eq!(r.shape(), &[1, 2, 2]);
        assert!(matches!(isolate_channels(&Tensor::zeros(&[1, 2, 2])), Err(Error::Input(_))));
    }

    #[test]
    fn scalar_attention_is_value() {
        let mut ctx = ForwardCtx::inference();
        let one = ctx.graph.constant(Tensor::full(&[1, 1], 1.0));
        let y = scaled_dot_attention(&mut ctx, one, one, one).unwrap();
        assert_eq!(ctx.graph.value(y).data(), &[1.0]);
    }

    #[test]
    fn zero_queries_average_values() {
        let mut ctx = ForwardCtx::inference();
        let q = ctx.graph.constant(Tensor::zeros(&[3, 2]));
        let k = ctx.graph.constant(Tensor::from_fn(&[3, 2], |i| i as f32));
        let v = ctx.graph.constant(Tensor::new(vec![3, 2], vec![1.0, 10.0, 2.0, 20.0, 6.0, 30.0]).unwrap());
        let y = scaled_dot_attention(&mut ctx, q, k, v).unwrap();
        for row in ctx.graph.value(y).data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-6 && (row[1] - 20.0).abs() < 1e-5);
        }
    }

    #[test]
    fn mal_rgb_counts() {
        let mut ctx = ForwardCtx::inference();
        let x = ctx.graph.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(mal_rgb(&mut ctx, &[x; 5]), Err(Error::Input(_))));
        let y = mal_rgb(&mut ctx, &[x; 6]).unwrap();
        assert_eq!(ctx.graph.shape(y), &[4, 12]);
    }
}
