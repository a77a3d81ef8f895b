use std::collections::BTreeMap;
use std::fs;

use msdetr::harness::{evaluate, gen_dataset, load_dataset, save_dataset, train, RunConfig};
use msdetr::model::{load_checkpoint, save_checkpoint};

fn tiny() -> RunConfig {
    RunConfig::from_toml(
        r#"
        seed = 4
        epochs = 2
        batch_size = 4
        [data]
        size = 16
        image_size = 32
        max_instances = 3
        [model]
        levels = 2
        d_model = 16
        encoder_layers = 1
        decoder_layers = 2
        heads = 2
        points = 2
        queries = 6
        backbone_widths = [4, 8, 8]
        backbone_blocks = [1, 1]
        input_size = 32
        "#,
    )
    .unwrap()
}

#[test]
fn seeded_training_is_deterministic() {
    let cfg = tiny();
    let data = gen_dataset(&cfg.data, cfg.seed);
    let a = train(&cfg, &data, None).unwrap();
    let b = train(&cfg, &data, None).unwrap();
    for (x, y) in a.log.iter().zip(&b.log) {
        assert!((x.loss - y.loss).abs() <= 1e-9);
        assert_eq!(x.val_map50, y.val_map50);
    }
    let ma = evaluate(&a.best, &data.test, 4).unwrap();
    let mb = evaluate(&b.best, &data.test, 4).unwrap();
    assert_eq!(serde_json::to_string(&ma).unwrap(), serde_json::to_string(&mb).unwrap());
}

#[test]
fn checkpoint_file_round_trip_is_byte_identical() {
    let cfg = tiny();
    let data = gen_dataset(&cfg.data, cfg.seed);
    let model = train(&cfg, &data, None).unwrap().last;
    let dir = tempfile::tempdir().unwrap();
    let mut meta = BTreeMap::new();
    meta.insert("seed".to_string(), serde_json::json!(cfg.seed));
    let p1 = dir.path().join("a.msdk");
    let p2 = dir.path().join("b.msdk");
    save_checkpoint(&p1, &model, &meta).unwrap();
    let back = load_checkpoint(&p1).unwrap();
    assert_eq!(back.meta, meta);
    save_checkpoint(&p2, &back.model, &back.meta).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

    let x = &data.test[0].image;
    let (d1, d2) = (model.forward(x).unwrap(), back.model.forward(x).unwrap());
    assert_eq!(d1[0].class_logits, d2[0].class_logits);
}

#[test]
fn truncated_checkpoint_is_a_format_error() {
    let cfg = tiny();
    let model = msdetr::model::Model::build(&cfg.model, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.msdk");
    save_checkpoint(&p, &model, &BTreeMap::new()).unwrap();
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 9]).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(msdetr::Error::Format(_))));
}

#[test]
fn dataset_on_disk_matches_memory() {
    let cfg = tiny();
    let data = gen_dataset(&cfg.data, cfg.seed);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&data, dir.path(), cfg.seed).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    for (a, b) in data.all().zip(back.all()) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.image, b.image);
        assert_eq!(a.instances, b.instances);
    }
}
