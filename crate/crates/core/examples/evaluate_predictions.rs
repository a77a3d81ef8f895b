//! Evaluate prediction files: perfect predictions, the same with jittered
//! boxes, and an untrained model's output.

use msdetr::harness::train::oracle_predictions;
use msdetr::harness::{gen_dataset, predict, score_predictions, RunConfig};
use msdetr::model::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> msdetr::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data.size = 40;
    let data = gen_dataset(&cfg.data, cfg.seed);
    let scenes = &data.test;

    let perfect = oracle_predictions(scenes);
    println!("perfect predictions\n{}", score_predictions(&perfect, scenes)?.table());

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let jittered: Vec<_> = perfect
        .iter()
        .cloned()
        .map(|mut p| {
            for v in &mut p.bbox[..2] {
                *v += rng.random_range(-0.02..0.02);
            }
            p
        })
        .collect();
    println!("jittered centres\n{}", score_predictions(&jittered, scenes)?.table());

    let model = Model::build(&cfg.model, cfg.seed)?;
    let untrained = predict(&model, scenes, cfg.batch_size)?;
    println!("untrained model\n{}", score_predictions(&untrained, scenes)?.table());
    Ok(())
}
