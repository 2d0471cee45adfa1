mod common;

use cellattn::backbone::{
    backbone_forward, dense_block, init_dense_block, init_residual_block, residual_block, BackboneConfig, BackboneKind,
};
use cellattn::layers::ForwardCtx;
use cellattn::params::ParamStore;
use cellattn::Tensor;
use common::{rng, uniform};
use proptest::prelude::*;

fn zero(store: &mut ParamStore, name: &str) {
    let t = store.get_mut(name).unwrap();
    let shape = t.shape().to_vec();
    *t = Tensor::zeros(&shape);
}

#[test]
fn zeroed_residual_transform_is_the_identity() {
    let mut store = ParamStore::new();
    init_residual_block(&mut store, "r", 4, 4, &mut rng(0));
    zero(&mut store, "r.b.conv.weight");
    zero(&mut store, "r.b.conv.bias");
    let x = uniform(&[2, 4, 6, 6], -1.0, 1.0, &mut rng(1));
    let mut ctx = ForwardCtx::new(true, 0);
    let xv = ctx.graph.constant(x.clone());
    let out = residual_block(&mut ctx, &store, "r", xv).unwrap();
    assert_eq!(ctx.graph.value(out.output).data(), x.data());
}

#[test]
fn residual_output_is_transform_plus_input() {
    for seed in 0..5 {
        let mut store = ParamStore::new();
        init_residual_block(&mut store, "r", 3, 3, &mut rng(seed));
        let x = uniform(&[1, 3, 5, 5], -1.0, 1.0, &mut rng(seed + 10));
        let mut ctx = ForwardCtx::new(true, 0);
        let xv = ctx.graph.constant(x.clone());
        let out = residual_block(&mut ctx, &store, "r", xv).unwrap();
        let (y, h) = (ctx.graph.value(out.output).data(), ctx.graph.value(out.transform).data());
        for i in 0..x.len() {
            assert!((y[i] - h[i] - x.data()[i]).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_input_gives_the_transform_of_zero() {
    let mut store = ParamStore::new();
    init_residual_block(&mut store, "r", 2, 2, &mut rng(4));
    let mut ctx = ForwardCtx::inference();
    let xv = ctx.graph.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let out = residual_block(&mut ctx, &store, "r", xv).unwrap();
    assert_eq!(ctx.graph.value(out.output).data(), ctx.graph.value(out.transform).data());
}

#[test]
fn projection_handles_channel_changes() {
    let mut store = ParamStore::new();
    init_residual_block(&mut store, "r", 2, 5, &mut rng(2));
    let mut ctx = ForwardCtx::inference();
    let xv = ctx.graph.constant(uniform(&[1, 2, 4, 4], 0.0, 1.0, &mut rng(3)));
    let out = residual_block(&mut ctx, &store, "r", xv).unwrap();
    assert_eq!(ctx.graph.shape(out.output), &[1, 5, 4, 4]);
}

#[test]
fn dense_layers_see_every_earlier_map() {
    let (c, g) = (3, 4);
    let mut store = ParamStore::new();
    init_dense_block(&mut store, "d", c, g, 3, &mut rng(5));
    let x0 = uniform(&[2, c, 5, 5], -1.0, 1.0, &mut rng(6));
    let mut ctx = ForwardCtx::new(true, 0);
    let xv = ctx.graph.constant(x0.clone());
    let out = dense_block(&mut ctx, &store, "d", xv, 3).unwrap();
    for (i, &input) in out.layer_inputs.iter().enumerate() {
        assert_eq!(ctx.graph.shape(input)[1], c + i * g);
    }
    assert_eq!(ctx.graph.shape(out.output)[1], c + 3 * g);
    // Channels [0, c) of the second layer's input are x0 itself.
    let second = ctx.graph.value(out.layer_inputs[1]);
    let per_item = (c + g) * 25;
    for n in 0..2 {
        assert_eq!(&second.data()[n * per_item..n * per_item + c * 25], &x0.data()[n * c * 25..(n + 1) * c * 25]);
    }
}

#[test]
fn one_layer_block_applies_one_composite() {
    let mut store = ParamStore::new();
    init_dense_block(&mut store, "d", 2, 3, 1, &mut rng(7));
    let mut ctx = ForwardCtx::inference();
    let xv = ctx.graph.constant(uniform(&[1, 2, 4, 4], 0.0, 1.0, &mut rng(8)));
    let out = dense_block(&mut ctx, &store, "d", xv, 1).unwrap();
    assert_eq!(out.layer_inputs, vec![xv]);
    assert_eq!(ctx.graph.count_ops("conv2d"), 1);
}

fn conv_out(d: usize, stride: usize) -> usize {
    (d - 1) / stride + 1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn signal_length_matches_closed_form(
        side in 8usize..40,
        stages in 0usize..=2,
        kind in prop_oneof![Just(BackboneKind::PlainCnn), Just(BackboneKind::Residual), Just(BackboneKind::DenseConcat)],
        channels in prop_oneof![Just(1usize), Just(3usize)],
        blocks in 1usize..3,
    ) {
        let cfg = BackboneConfig { kind, input_channels: channels, blocks, base_filters: 4, downsample_stages: stages, num_classes: 2 };
        let mut side_out = side;
        for s in 0..2 {
            side_out = conv_out(side_out, if s < stages { 2 } else { 1 });
        }
        prop_assert_eq!(cfg.signal_len(side, side), side_out * side_out);
        let mut store = ParamStore::new();
        cfg.init_params(&mut store, "bb", &mut rng(side as u64));
        let mut ctx = ForwardCtx::inference();
        let x = ctx.graph.constant(uniform(&[1, channels, side, side], 0.0, 1.0, &mut rng(1)));
        let out = backbone_forward(&mut ctx, &store, "bb", &cfg, x).unwrap();
        prop_assert_eq!(ctx.graph.shape(out), &[1, side_out * side_out, 2]);
    }
}
