//! Write a checkpoint to memory and list the manifest entries.

use std::collections::BTreeMap;

use msdetr::model::{read_checkpoint, write_checkpoint, Model, ModelConfig, MAGIC};

fn main() -> msdetr::Result<()> {
    let mut cfg = ModelConfig::default();
    cfg.backbone_blocks = vec![1, 0, 0];
    let model = Model::build(&cfg, 0)?;
    let mut meta = BTreeMap::new();
    meta.insert("note".to_string(), serde_json::json!("example"));
    let bytes = write_checkpoint(&model, &meta)?;
    assert!(bytes.starts_with(MAGIC));
    let manifest_len = u64::from_le_bytes(bytes[6..14].try_into().expect("eight bytes")) as usize;
    let manifest: serde_json::Value = serde_json::from_slice(&bytes[14..14 + manifest_len]).expect("manifest is JSON");
    let tensors = manifest["tensors"].as_array().expect("tensor list");
    println!("{} bytes, manifest {manifest_len} bytes, {} tensors", bytes.len(), tensors.len());
    for t in tensors.iter().take(8) {
        println!("  {:<28} {:<16} {}", t["name"].as_str().unwrap_or(""), t["shape"].to_string(), t["kind"]);
    }
    println!("  ...");
    let again = write_checkpoint(&read_checkpoint(&bytes)?.model, &meta)?;
    println!("byte-identical after a round trip: {}", again == bytes);
    Ok(())
}
