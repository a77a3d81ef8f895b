//! Train a small detector for a few epochs and write its checkpoints.
//!
//! `cargo run --release --example train_detector -- [out_dir]`

use msdetr::harness::{gen_dataset, train, RunConfig};

fn main() -> msdetr::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/example_train".into());
    let cfg = RunConfig::from_toml(
        r#"
        epochs = 4
        batch_size = 4
        [data]
        size = 60
        image_size = 64
        [model]
        input_size = 64
        [optim]
        lr = 5e-4
        warmup_steps = 10
        "#,
    )?;
    let data = gen_dataset(&cfg.data, cfg.seed);
    let run = train(&cfg, &data, Some(out.as_ref()))?;
    for e in &run.log {
        println!("epoch {}  loss {:.4}  val loss {:.4}  val mAP@0.5 {:.4}", e.epoch, e.loss, e.val_loss, e.val_map50);
    }
    println!("best epoch {}; checkpoints in {out}", run.best_epoch);
    Ok(())
}
