mod common;

use cellattn::backbone::{BackboneConfig, BackboneKind};
use cellattn::data::{stratified_kfold, synthesize_images, Dataset, Label, SyntheticConfig};
use cellattn::layers::ForwardCtx;
use cellattn::model::{EncoderConfig, Family, Model};
use cellattn::params::ParamStore;
use cellattn::train::{cross_validate, train_model, TrainConfig};
use cellattn::Tensor;
use common::cases::small_encoder;
use common::{rng, uniform};

const KINDS: [BackboneKind; 3] = [BackboneKind::PlainCnn, BackboneKind::Residual, BackboneKind::DenseConcat];

fn encoder(family: Family, kind: BackboneKind) -> EncoderConfig {
    EncoderConfig { backbone: BackboneConfig { kind, ..Default::default() }, ..small_encoder(family) }
}

#[test]
fn forward_shapes_for_every_combination() {
    for family in [Family::Rgb, Family::Mhl] {
        for kind in KINDS {
            let cfg = encoder(family, kind);
            let model = Model::new(cfg.clone()).unwrap();
            let params = model.init_params(0);
            let mut ctx = ForwardCtx::inference();
            let x = ctx.graph.constant(uniform(&[3, 3, 16, 16], 0.0, 1.0, &mut rng(1)));
            let out = model.forward(&mut ctx, &params, x).unwrap();
            let l = cfg.backbone.signal_len(16, 16);
            assert_eq!(l, 16, "two stride-2 stems on 16x16");
            assert_eq!(ctx.graph.shape(out.attention), &[3, l, cfg.d_model * family.attention_blocks()]);
            assert_eq!(ctx.graph.shape(out.probs), &[3, 2]);
            for row in ctx.graph.value(out.probs).data().chunks(2) {
                assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn branch_layout_follows_the_family() {
    let rgb = Model::new(small_encoder(Family::Rgb)).unwrap();
    let mhl = Model::new(small_encoder(Family::Mhl)).unwrap();
    assert_eq!(rgb.backbone_prefixes().len(), 3);
    assert_eq!(mhl.backbone_prefixes().len(), 1);
    assert_eq!(rgb.config().backbone_for_branch().input_channels, 1);
    assert_eq!(mhl.config().backbone_for_branch().input_channels, 3);
    let (p_rgb, p_mhl) = (rgb.init_params(0), mhl.init_params(0));
    for prefix in rgb.backbone_prefixes() {
        assert!(p_rgb.count_with_prefix(&prefix) > 0);
    }
    assert!(p_mhl.count_with_prefix("backbone.") > 0);
}

#[test]
fn conv_layer_counts() {
    let b = |kind| BackboneConfig { kind, blocks: 4, ..Default::default() };
    assert_eq!(b(BackboneKind::PlainCnn).conv_layer_count(), 3);
    assert_eq!(b(BackboneKind::Residual).conv_layer_count(), 11);
    assert_eq!(b(BackboneKind::DenseConcat).conv_layer_count(), 7);
    let one = BackboneConfig { downsample_stages: 1, ..Default::default() };
    assert_eq!(one.output_hw(64, 64), (32, 32));
    assert_eq!(BackboneConfig::default().output_hw(64, 64), (16, 16));
}

#[test]
fn config_validation() {
    let mut c = small_encoder(Family::Mhl);
    c.heads = 3;
    assert!(Model::new(c).is_err());
    let mut c = small_encoder(Family::Mhl);
    c.mlp_dropout = 1.0;
    assert!(Model::new(c).is_err());
    let mut c = small_encoder(Family::Mhl);
    c.image_side = 4;
    assert!(Model::new(c).is_err());
    let model = Model::new(small_encoder(Family::Mhl)).unwrap();
    let wrong = uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng(0));
    assert!(model.predict(&model.init_params(0), &wrong).is_err());
}

#[test]
fn inference_is_batch_independent() {
    for family in [Family::Rgb, Family::Mhl] {
        let model = Model::new(small_encoder(family)).unwrap();
        let params = model.init_params(4);
        let imgs: Vec<Tensor> = (0..3).map(|s| uniform(&[3, 16, 16], 0.0, 1.0, &mut rng(s))).collect();
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let batch = model.predict(&params, &Tensor::stack(&refs).unwrap()).unwrap();
        for (i, img) in imgs.iter().enumerate() {
            let one = model.predict(&params, &Tensor::stack(&[img]).unwrap()).unwrap();
            for c in 0..2 {
                assert!((one.data()[c] - batch.data()[2 * i + c]).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn init_is_seeded() {
    let model = Model::new(small_encoder(Family::Rgb)).unwrap();
    let (a, b, c) = (model.init_params(1), model.init_params(1), model.init_params(2));
    let same = |x: &ParamStore, y: &ParamStore| x.names().all(|n| x.get(n).unwrap().data() == y.get(n).unwrap().data());
    assert!(same(&a, &b));
    assert!(!same(&a, &c));
}

#[test]
fn checkpoint_round_trip() {
    let model = Model::new(small_encoder(Family::Mhl)).unwrap();
    let params = model.init_params(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    params.save_checkpoint(&path).unwrap();
    let mut back = model.init_params(99);
    back.load_checkpoint(&path).unwrap();
    assert!(params.names().all(|n| params.get(n).unwrap().data() == back.get(n).unwrap().data()));
    let mut other = Model::new(small_encoder(Family::Rgb)).unwrap().init_params(0);
    assert!(other.load_checkpoint(&path).is_err());
}

fn tiny_set() -> (Vec<Tensor>, Vec<Label>) {
    let cfg = SyntheticConfig { n_normal: 6, n_meta: 6, image_side: 16, ..Default::default() };
    let (m, images) = synthesize_images(&cfg, 2).unwrap();
    (images, m.entries.iter().map(|e| e.label).collect())
}

#[test]
fn training_lowers_the_loss_and_is_deterministic() {
    let model = Model::new(small_encoder(Family::Mhl)).unwrap();
    let (images, labels) = tiny_set();
    let refs: Vec<&Tensor> = images.iter().collect();
    let cfg = TrainConfig { epochs: 15, lr: 0.05, batch_size: 4, seed: 1, augment_factor: 0 };
    let a = train_model(&model, model.init_params(0), &cfg, &refs, &labels).unwrap();
    let b = train_model(&model, model.init_params(0), &cfg, &refs, &labels).unwrap();
    assert_eq!(a.loss_trace, b.loss_trace);
    assert_eq!(a.steps, 15 * 3);
    assert!(a.loss_trace.last().unwrap() < &a.loss_trace[0], "{:?}", a.loss_trace);
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let model = Model::new(small_encoder(Family::Rgb)).unwrap();
    let (images, labels) = tiny_set();
    let refs: Vec<&Tensor> = images.iter().collect();
    let cfg = TrainConfig { epochs: 2, lr: 0.0, batch_size: 4, seed: 1, augment_factor: 0 };
    let init = model.init_params(0);
    let out = train_model(&model, init.clone(), &cfg, &refs, &labels).unwrap();
    for (name, t) in init.trainable() {
        assert_eq!(t.data(), out.params.get(name).unwrap().data(), "{name}");
    }
}

#[test]
fn cross_validation_ignores_thread_count() {
    let cfg = SyntheticConfig { n_normal: 6, n_meta: 6, image_side: 16, ..Default::default() };
    let (m, images) = synthesize_images(&cfg, 2).unwrap();
    let ds = Dataset::new(stratified_kfold(&m, 3, 2).unwrap(), images).unwrap();
    let model = Model::new(small_encoder(Family::Mhl)).unwrap();
    let tc = TrainConfig { epochs: 2, lr: 0.01, batch_size: 4, seed: 5, augment_factor: 1 };
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| cross_validate(&model, &tc, &ds).unwrap())
    };
    let (one, two) = (run(1), run(2));
    assert_eq!(one.report.to_json(), two.report.to_json());
    assert_eq!(one.folds.len(), 3);
    for f in &one.folds {
        assert!(f.audit.is_clean());
        assert_eq!(f.train_size, 2 * (12 - f.test_ids.len()));
    }
}
