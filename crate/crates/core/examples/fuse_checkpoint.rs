//! Save a checkpoint, fuse its RepConv blocks, and compare the two models.

use std::collections::BTreeMap;

use msdetr::harness::fuse_and_check;
use msdetr::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};

fn main() -> msdetr::Result<()> {
    let dir = std::path::PathBuf::from("target/example_fuse");
    std::fs::create_dir_all(&dir).map_err(|e| msdetr::Error::Io { path: dir.clone(), source: e })?;
    let model = Model::build(&ModelConfig::default(), 5)?;
    save_checkpoint(&dir.join("model.msdk"), &model, &BTreeMap::new())?;

    let loaded = load_checkpoint(&dir.join("model.msdk"))?.model;
    let (fused, report) = fuse_and_check(&loaded, 4, 128, 0)?;
    save_checkpoint(&dir.join("fused.msdk"), &fused, &BTreeMap::new())?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    println!("reloaded fused model is fused: {}", load_checkpoint(&dir.join("fused.msdk"))?.model.is_fused());
    Ok(())
}
