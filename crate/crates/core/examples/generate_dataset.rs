//! Render a small synthetic defect dataset to disk and read it back.
//!
//! `cargo run --example generate_dataset -- [out_dir]`

use msdetr::harness::{gen_dataset, load_dataset, save_dataset, RunConfig, CLASS_NAMES};

fn main() -> msdetr::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/example_data".into());
    let mut cfg = RunConfig::default();
    cfg.data.size = 40;
    let ds = gen_dataset(&cfg.data, cfg.seed);
    save_dataset(&ds, out.as_ref(), cfg.seed)?;
    let back = load_dataset(out.as_ref())?;
    assert_eq!(back.train.len(), ds.train.len());

    let mut counts = [0usize; 5];
    for s in ds.all() {
        for &(c, _) in &s.instances {
            counts[c] += 1;
        }
    }
    println!("{} / {} / {} images written to {out}", ds.train.len(), ds.val.len(), ds.test.len());
    for (name, n) in CLASS_NAMES.iter().zip(counts) {
        println!("{name:<16} {n}");
    }
    Ok(())
}
