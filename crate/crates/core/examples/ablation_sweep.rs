//! Train every Rep / DA / CSFF combination briefly and print the table.
//!
//! `cargo run --release --example ablation_sweep`

use msdetr::harness::{ablate, ablation_table, gen_dataset, RunConfig};

fn main() -> msdetr::Result<()> {
    let cfg = RunConfig::from_toml(
        r#"
        ablate_epochs = 1
        batch_size = 4
        [data]
        size = 30
        image_size = 64
        [model]
        input_size = 64
        "#,
    )?;
    let data = gen_dataset(&cfg.data, cfg.seed);
    print!("{}", ablation_table(&ablate(&cfg, &data)?));
    Ok(())
}
