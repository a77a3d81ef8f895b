//! 32-bit single-image latency before and after fusion.
//!
//! `cargo run --release --example latency_bench -- [iters]`

use msdetr::harness::bench;
use msdetr::model::{Model, ModelConfig};

fn main() -> msdetr::Result<()> {
    let iters = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let model = Model::build(&ModelConfig::default(), 0)?;
    let report = bench(&model, 128, 5, iters, 0)?;
    print!("{}", report.summary());
    Ok(())
}
