//! Randomized case generators shared by the module suites and the
//! acceptance target.

use cellattn::attention::{multi_head_attention, scaled_dot_attention, HeadWeights};
use cellattn::layers::ForwardCtx;
use cellattn::model::{EncoderConfig, Family, Model};
use cellattn::params::ParamStore;
use rand::Rng;

use super::{max_abs_diff, rng, to_f64, uniform};

#[derive(Debug, Default)]
pub struct AttentionCase {
    pub single_diff: f64,
    pub multi_diff: f64,
    pub row_sum_err: f64,
}

/// One random scaled-dot and one random multi-head evaluation compared with
/// the loop oracles.
pub fn attention_case(seed: u64) -> AttentionCase {
    let mut r = rng(seed);
    let (lq, lk, d, e) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=8));
    let mut ctx = ForwardCtx::inference();
    let q = uniform(&[lq, d], -2.0, 2.0, &mut r);
    let k = uniform(&[lk, d], -2.0, 2.0, &mut r);
    let v = uniform(&[lk, e], -2.0, 2.0, &mut r);
    let (qv, kv, vv) = (ctx.graph.constant(q.clone()), ctx.graph.constant(k.clone()), ctx.graph.constant(v.clone()));
    let y = scaled_dot_attention(&mut ctx, qv, kv, vv).unwrap();
    let (want, _) = super::attention(&to_f64(&q), &to_f64(&k), &to_f64(&v), lq, lk, d, e);
    let single_diff = max_abs_diff(&to_f64(ctx.graph.value(y)), &want);

    let heads = r.random_range(1..=3);
    let d_model = heads * r.random_range(1..=4);
    let mut store = ParamStore::new();
    HeadWeights::init(&mut store, "mha", heads, d_model, &mut rng(seed ^ 0xabc));
    let xq = uniform(&[lq, d_model], -1.0, 1.0, &mut r);
    let xkv = uniform(&[lk, d_model], -1.0, 1.0, &mut r);
    let w = HeadWeights::bind(&mut ctx, &store, "mha", heads).unwrap();
    let (a, b) = (ctx.graph.constant(xq.clone()), ctx.graph.constant(xkv.clone()));
    let y = multi_head_attention(&mut ctx, a, b, b, &w).unwrap();
    let get = |n: String| to_f64(store.get(&n).unwrap());
    let wq: Vec<Vec<f64>> = (0..heads).map(|c| get(format!("mha.head{c}.wq"))).collect();
    let wk: Vec<Vec<f64>> = (0..heads).map(|c| get(format!("mha.head{c}.wk"))).collect();
    let wv: Vec<Vec<f64>> = (0..heads).map(|c| get(format!("mha.head{c}.wv"))).collect();
    let want = super::multi_head(&to_f64(&xq), &to_f64(&xkv), lq, lk, d_model, &wq, &wk, &wv, &get("mha.wo".into()));
    let multi_diff = max_abs_diff(&to_f64(ctx.graph.value(y)), &want);

    let mut row_sum_err: f64 = 0.0;
    for &wv in ctx.attention_weights() {
        let t = ctx.graph.value(wv);
        let cols = *t.shape().last().unwrap();
        for row in t.data().chunks(cols) {
            let s: f64 = row.iter().map(|&p| f64::from(p)).sum();
            row_sum_err = row_sum_err.max((s - 1.0).abs());
        }
    }
    AttentionCase { single_diff, multi_diff, row_sum_err }
}

pub fn small_encoder(family: Family) -> EncoderConfig {
    EncoderConfig { family, image_side: 16, mlp_dims: (8, 4), ..Default::default() }
}

/// Attention blocks a forward pass instantiates: block taps, attention
/// evaluations and the head count.
pub fn attention_blocks(family: Family) -> (usize, usize, usize) {
    let cfg = small_encoder(family);
    let heads = cfg.heads;
    let model = Model::new(cfg).unwrap();
    let params = model.init_params(1);
    let mut ctx = ForwardCtx::inference();
    let x = ctx.graph.constant(uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng(2)));
    model.forward(&mut ctx, &params, x).unwrap();
    let blocks = ctx.taps().iter().filter(|t| t.name.contains(".dh_")).count();
    (blocks, ctx.attention_weights().len(), heads)
}

pub fn random_map(h: usize, w: usize, lo: f64, hi: f64, seed: u64) -> cellattn::explain::Map {
    let mut r = rng(seed);
    let values = (0..h * w).map(|_| r.random_range(lo..hi)).collect();
    cellattn::explain::Map::new(h, w, values).unwrap()
}
