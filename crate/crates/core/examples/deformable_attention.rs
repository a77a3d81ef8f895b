//! Multi-scale deformable attention for a single query over a random
//! three-level pyramid.

use msdetr::deform_attn::{ms_deform_attn, predict_offsets, predict_weights, DeformAttnParams};
use msdetr::autograd::LevelShape;
use msdetr::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> msdetr::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (m, k, d) = (2, 4, 8);
    let shapes = [LevelShape { h: 16, w: 16 }, LevelShape { h: 8, w: 8 }, LevelShape { h: 4, w: 4 }];
    let params = DeformAttnParams::init(m, k, d, &shapes, &mut rng)?;
    let levels: Vec<Tensor> = shapes
        .iter()
        .map(|s| Tensor::randn(&[1, d, s.h, s.w], 1.0, &mut rng))
        .collect();
    let z: Vec<f64> = Tensor::randn(&[d], 1.0, &mut rng).into_data();
    let reference = [0.4, 0.6];

    let offsets = predict_offsets(&params, &z)?;
    let weights = predict_weights(&params, &z)?;
    for head in 0..m {
        let total: f64 = (0..shapes.len())
            .flat_map(|l| (0..k).map(move |p| (l, p)))
            .map(|(l, p)| weights[params.slot(head, l, p)])
            .sum();
        println!("head {head}: attention mass {total:.12}");
    }
    let first = offsets[params.slot(0, 0, 0)];
    println!("head 0, level 0, point 0 offset ({:+.4}, {:+.4})", first[0], first[1]);

    let out = ms_deform_attn(&params, &z, reference, &levels)?;
    println!("attended value: {:?}", out.iter().map(|v| format!("{v:+.3}")).collect::<Vec<_>>());
    Ok(())
}
