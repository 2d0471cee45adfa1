mod common;

use cellattn::attention::{isolate_channels, mal_rgb, scaled_dot_attention, RGB_PAIRS};
use cellattn::layers::ForwardCtx;
use cellattn::model::Family;
use cellattn::Tensor;
use common::cases::{attention_blocks, attention_case};
use proptest::prelude::*;

#[test]
fn matches_loop_oracle() {
    for seed in 0..100 {
        let c = attention_case(seed);
        assert!(c.single_diff <= 1e-5, "seed {seed}: single {:e}", c.single_diff);
        assert!(c.multi_diff <= 1e-5, "seed {seed}: multi-head {:e}", c.multi_diff);
        assert!(c.row_sum_err <= 1e-6, "seed {seed}: row sum {:e}", c.row_sum_err);
    }
}

#[test]
fn rgb_uses_six_blocks_and_mhl_one() {
    let (blocks, evals, heads) = attention_blocks(Family::Rgb);
    assert_eq!(blocks, 6);
    assert_eq!(evals, 6 * heads);
    let (blocks, evals, heads) = attention_blocks(Family::Mhl);
    assert_eq!(blocks, 1);
    assert_eq!(evals, heads);
}

#[test]
fn pairs_are_the_upper_triangle() {
    assert_eq!(RGB_PAIRS.len(), 6);
    assert!(RGB_PAIRS.iter().all(|&(i, j)| i <= j && j < 3));
}

#[test]
fn batched_equals_per_item() {
    let mut r = common::rng(4);
    let q = common::uniform(&[3, 4, 2], -1.0, 1.0, &mut r);
    let k = common::uniform(&[3, 5, 2], -1.0, 1.0, &mut r);
    let v = common::uniform(&[3, 5, 3], -1.0, 1.0, &mut r);
    let mut ctx = ForwardCtx::inference();
    let (qv, kv, vv) = (ctx.graph.constant(q.clone()), ctx.graph.constant(k.clone()), ctx.graph.constant(v.clone()));
    let all = scaled_dot_attention(&mut ctx, qv, kv, vv).unwrap();
    let all = ctx.graph.value(all).clone();
    for b in 0..3 {
        let mut c = ForwardCtx::inference();
        let part = |t: &Tensor| {
            let s = t.shape();
            t.slice_axis(0, b, 1).unwrap().reshape(&[s[1], s[2]]).unwrap()
        };
        let (qb, kb, vb) = (c.graph.constant(part(&q)), c.graph.constant(part(&k)), c.graph.constant(part(&v)));
        let y = scaled_dot_attention(&mut c, qb, kb, vb).unwrap();
        assert_eq!(c.graph.value(y).data(), &all.data()[b * 12..(b + 1) * 12]);
    }
}

#[test]
fn mismatched_operands_are_rejected() {
    let mut ctx = ForwardCtx::inference();
    let q = ctx.graph.constant(Tensor::zeros(&[2, 3]));
    let k = ctx.graph.constant(Tensor::zeros(&[2, 4]));
    assert!(scaled_dot_attention(&mut ctx, q, k, k).is_err());
    let x = ctx.graph.constant(Tensor::zeros(&[2, 2]));
    assert!(mal_rgb(&mut ctx, &[x; 3]).is_err());
}

proptest! {
    #[test]
    fn weights_are_distributions(seed in 0u64..10_000, scale in 0.1f32..20.0) {
        let mut r = common::rng(seed);
        let q = common::uniform(&[2, 5, 3], -scale, scale, &mut r);
        let k = common::uniform(&[2, 6, 3], -scale, scale, &mut r);
        let mut ctx = ForwardCtx::inference();
        let (qv, kv) = (ctx.graph.constant(q), ctx.graph.constant(k));
        let v = ctx.graph.constant(Tensor::zeros(&[2, 6, 1]));
        scaled_dot_attention(&mut ctx, qv, kv, v).unwrap();
        let w = ctx.graph.value(ctx.attention_weights()[0]);
        for row in w.data().chunks(6) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            let s: f64 = row.iter().map(|&p| f64::from(p)).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn channel_isolation_partitions_the_image(seed in 0u64..1000) {
        let img = common::uniform(&[3, 4, 5], 0.0, 1.0, &mut common::rng(seed));
        let planes = isolate_channels(&img).unwrap();
        let joined: Vec<f32> = planes.iter().flat_map(|p| p.data().to_vec()).collect();
        prop_assert_eq!(joined.as_slice(), img.data());
    }
}
