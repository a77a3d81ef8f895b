use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::ParamKind;

fn tiny() -> ModelConfig {
    ModelConfig {
        levels: 2,
        d_model: 16,
        encoder_layers: 1,
        decoder_layers: 2,
        heads: 2,
        points: 2,
        queries: 6,
        num_classes: 3,
        backbone_widths: vec![4, 8, 8],
        backbone_blocks: vec![1, 1],
        input_size: 32,
        ..ModelConfig::default()
    }
}

fn image(b: usize, side: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(&[b, 3, side, side], 0.0, 1.0, &mut rng)
}

/// Scramble batch-norm statistics and affine terms so fusion has work to do.
fn perturb_bn(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model
        .store
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| n.contains(".bn"))
        .collect();
    for n in names {
        let t = model.store.tensor(&n).unwrap();
        let v = if n.ends_with("running_var") || n.ends_with("gamma") {
            Tensor::rand_uniform(t.shape(), 0.5, 1.5, &mut rng)
        } else {
            Tensor::rand_uniform(t.shape(), -0.3, 0.3, &mut rng)
        };
        model.store.set(&n, v).unwrap();
    }
}

fn max_diff(a: &[Detections], b: &[Detections]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            x.class_logits
                .max_abs_diff(&y.class_logits)
                .max(x.boxes.max_abs_diff(&y.boxes))
        })
        .fold(0.0, f64::max)
}

fn target() -> GroundTruth {
    GroundTruth {
        boxes: vec![[0.3, 0.4, 0.2, 0.2], [0.7, 0.6, 0.1, 0.3]],
        labels: vec![0, 2],
    }
}

#[test]
fn baseline_and_full_models_run() {
    for cfg in [tiny().with_toggles(false, false, false), tiny()] {
        let m = Model::build(&cfg, 1).unwrap();
        let out = m.forward(&Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        assert_eq!(out.len(), 1);
        let d = &out[0];
        assert_eq!(d.class_logits.shape(), &[6, 4]);
        assert!(d.class_logits.all_finite());
        assert!(d.boxes.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn default_config_forward_on_64() {
    let cfg = ModelConfig {
        input_size: 64,
        ..ModelConfig::default()
    };
    let m = Model::build(&cfg, 0).unwrap();
    let d = m.forward(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
    assert_eq!(d[0].class_logits.shape(), &[30, 6]);
    d[0].validate().unwrap();
}

#[test]
fn forward_is_deterministic() {
    let m = Model::build(&tiny(), 2).unwrap();
    let x = image(1, 32, 3);
    assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
    assert_eq!(Model::build(&tiny(), 2).unwrap().forward(&x).unwrap(), m.forward(&x).unwrap());
}

#[test]
fn batch_equals_stacked_singles() {
    for cfg in [tiny(), tiny().with_toggles(false, false, false)] {
        let mut m = Model::build(&cfg, 4).unwrap();
        perturb_bn(&mut m, 5);
        let x = image(2, 32, 6);
        let both = m.forward(&x).unwrap();
        let singles: Vec<Detections> = (0..2)
            .flat_map(|i| m.forward(&x.narrow0(i, 1)).unwrap())
            .collect();
        assert!(max_diff(&both, &singles) <= 1e-12);
    }
}

#[test]
fn bad_inputs_and_configs_are_rejected() {
    let m = Model::build(&tiny(), 0).unwrap();
    match m.forward(&Tensor::zeros(&[1, 3, 36, 32])) {
        Err(Error::Dimension(msg)) => assert!(msg.contains("multiple of 8"), "{msg}"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(m.forward(&Tensor::zeros(&[1, 1, 32, 32])), Err(Error::Dimension(_))));
    let bad = ModelConfig {
        d_model: 15,
        ..tiny()
    };
    match Model::build(&bad, 0) {
        Err(Error::Config(msg)) => assert!(msg.contains("d_model"), "{msg}"),
        other => panic!("{:?}", other.map(|_| ())),
    }
    let bad = ModelConfig {
        backbone_widths: vec![4, 8],
        queries: 0,
        ..tiny()
    };
    match Model::build(&bad, 0) {
        Err(Error::Config(msg)) => assert!(msg.contains("backbone_widths") && msg.contains("queries"), "{msg}"),
        other => panic!("{:?}", other.map(|_| ())),
    }
}

#[test]
fn every_toggle_combination_trains_one_step() {
    let x = image(1, 32, 7);
    for mask in 0..8u8 {
        let cfg = tiny().with_toggles(mask & 1 != 0, mask & 2 != 0, mask & 4 != 0);
        let mut m = Model::build(&cfg, 8).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let l = m
            .train_step(&mut opt, 1e-4, &x, &[target()], &LossOptions::default())
            .unwrap();
        assert!(l.total.is_finite() && l.total > 0.0, "mask {mask}");
        m.forward(&x).unwrap();
    }
}

#[test]
fn toggles_change_the_architecture() {
    let names = |cfg: ModelConfig| -> Vec<String> {
        Model::build(&cfg, 0).unwrap().store.iter().map(|(n, _)| n.clone()).collect()
    };
    let all = names(tiny());
    let none = names(tiny().with_toggles(false, false, false));
    assert!(all.iter().any(|n| n.ends_with(".w3")) && !none.iter().any(|n| n.ends_with(".w3")));
    assert!(all.iter().any(|n| n.contains(".attn.offset")) && !none.iter().any(|n| n.contains("encoder.layer0.attn")));
    assert!(all.iter().any(|n| n.starts_with("neck.bu")) && !none.iter().any(|n| n.starts_with("neck.bu")));
    assert!(all.iter().any(|n| n.contains(".vov.")) && !none.iter().any(|n| n.contains(".vov.")));
}

#[test]
fn fusion_preserves_outputs_and_cuts_cost() {
    let mut m = Model::build(&tiny(), 9).unwrap();
    perturb_bn(&mut m, 10);
    let f = m.fuse().unwrap();
    assert!(f.is_fused() && !m.is_fused());
    assert_eq!(f.backbone.rep_blocks(), 5);
    assert!(m.num_params() > f.num_params());
    assert!(f.flops(32, 32).unwrap() < m.flops(32, 32).unwrap());
    for s in 0..5 {
        let x = image(1, 32, 100 + s);
        let d = max_diff(&m.forward(&x).unwrap(), &f.forward(&x).unwrap());
        assert!(d <= 1e-9, "{d}");
    }
    // Non-backbone parameters are untouched.
    for (n, p) in m.store.iter().filter(|(n, _)| !n.starts_with("backbone")) {
        assert_eq!(f.store.tensor(n).unwrap(), &*p.value);
    }
}

#[test]
fn fusing_without_rep_blocks_is_a_no_op() {
    let m = Model::build(&tiny().with_toggles(false, true, true), 0).unwrap();
    let f = m.fuse().unwrap();
    assert_eq!(
        m.store.iter().map(|(n, p)| (n.clone(), p.value.clone())).collect::<Vec<_>>(),
        f.store.iter().map(|(n, p)| (n.clone(), p.value.clone())).collect::<Vec<_>>()
    );
}

#[test]
fn fusing_without_bn_statistics_is_a_state_error() {
    let mut m = Model::build(&tiny(), 0).unwrap();
    m.store.remove_prefix("backbone.stem.bn1.running_var");
    assert!(matches!(m.fuse(), Err(Error::State(_))));
}

#[test]
fn one_step_decreases_the_loss() {
    let mut m = Model::build(&tiny(), 11).unwrap();
    let x = image(1, 32, 12);
    let opts = LossOptions::default();
    let mut opt = AdamW::new(AdamWConfig::default());
    let before = m.train_step(&mut opt, 1e-4, &x, &[target()], &opts).unwrap();
    let g = Graph::inference();
    let ctx = Ctx::new(&g, &m.store, true);
    let after = m.loss(&ctx, g.constant(x), &[target()], &opts).unwrap().1;
    assert!(after.total < before.total, "{} -> {}", before.total, after.total);
}

#[test]
fn train_step_updates_running_statistics() {
    let mut m = Model::build(&tiny(), 0).unwrap();
    let before = m.store.tensor("backbone.stem.bn3.running_mean").unwrap().clone();
    let mut opt = AdamW::new(AdamWConfig::default());
    m.train_step(&mut opt, 1e-4, &image(2, 32, 1), &[target(), target()], &LossOptions::default())
        .unwrap();
    let after = m.store.tensor("backbone.stem.bn3.running_mean").unwrap();
    assert_ne!(&before, after);
    assert!(matches!(
        m.train_step(&mut opt, 1e-4, &image(2, 32, 1), &[target()], &LossOptions::default()),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let mut m = Model::build(&tiny(), 13).unwrap();
    perturb_bn(&mut m, 14);
    let mut meta = BTreeMap::new();
    meta.insert("epoch".to_string(), serde_json::json!(3));
    meta.insert("val_map50".to_string(), serde_json::json!(0.123456789));
    for model in [m.clone(), m.fuse().unwrap()] {
        let bytes = write_checkpoint(&model, &meta).unwrap();
        assert_eq!(&bytes[..6], MAGIC);
        let ck = read_checkpoint(&bytes).unwrap();
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.model.is_fused(), model.is_fused());
        assert_eq!(write_checkpoint(&ck.model, &ck.meta).unwrap(), bytes);
        let x = image(1, 32, 15);
        assert_eq!(ck.model.forward(&x).unwrap(), model.forward(&x).unwrap());
    }
}

#[test]
fn corrupt_checkpoints_are_format_errors() {
    let m = Model::build(&tiny(), 0).unwrap();
    let bytes = write_checkpoint(&m, &BTreeMap::new()).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint(&bad), Err(Error::Format(_))));
    assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 8]), Err(Error::Format(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(read_checkpoint(&extra), Err(Error::Format(_))));
}

#[test]
fn param_kinds_are_sensible() {
    let m = Model::build(&tiny(), 0).unwrap();
    for (n, p) in m.store.iter() {
        if n.contains("running_") {
            assert_eq!(p.kind, ParamKind::Buffer, "{n}");
        } else if n.ends_with(".w") || n.ends_with(".w3") || n.ends_with(".w1") {
            assert_eq!(p.kind, ParamKind::Weight, "{n}");
        }
    }
}

#[test]
fn f32_forward_tracks_f64() {
    let m = Model::build(&tiny(), 16).unwrap();
    let x = image(1, 32, 17);
    let a = m.forward(&x).unwrap();
    let b = forward_store(&m, &m.store.cast::<f32>(), &x.cast::<f32>()).unwrap();
    let diff = a[0].boxes.max_abs_diff(&b[0].1.cast::<f64>());
    assert!(diff < 1e-4, "{diff}");
}

#[test]
fn sine_position_is_bounded_and_distinct() {
    let p: Tensor = sine_position(8, 4, 4);
    assert!(p.data().iter().all(|v| v.abs() <= 1.0));
    let col = |y: usize, x: usize| (0..8).map(|c| p.at4(0, c, y, x)).collect::<Vec<_>>();
    assert_ne!(col(0, 1), col(1, 0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]
    #[test]
    fn fusion_equivalence_on_random_models(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig {
            backbone_blocks: vec![rng.random_range(0..3), rng.random_range(0..2)],
            ..tiny()
        };
        let mut m = Model::build(&cfg, seed).unwrap();
        perturb_bn(&mut m, seed + 1);
        let x = image(1, 32, seed + 2);
        let d = max_diff(&m.forward(&x).unwrap(), &m.fuse().unwrap().forward(&x).unwrap());
        prop_assert!(d <= 1e-9);
    }
}
