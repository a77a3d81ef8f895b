//! Run the cross-scale fusion neck (top-down then bottom-up, VoVGSCSP blocks
//! and channel attention) on a random pyramid.

use msdetr::fusion::{neck_init, ConvStyle, MultiScaleFeatures, NeckVariant};
use msdetr::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> msdetr::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = 16;
    let input = MultiScaleFeatures::new(
        [16, 8, 4]
            .iter()
            .map(|&s| Tensor::randn(&[1, c, s, s], 1.0, &mut rng))
            .collect(),
    )?;
    for (label, variant, bottom_up) in [
        ("plain top-down", NeckVariant::plain(), false),
        ("full two-way", NeckVariant::full(), true),
    ] {
        let (store, neck) = neck_init(c, 3, ConvStyle::default(), variant, bottom_up, &mut rng)?;
        let out = neck.apply(&store, &input)?;
        let shapes: Vec<_> = out.levels.iter().map(|t| t.shape().to_vec()).collect();
        println!("{label:<15} {:>6} params  outputs {shapes:?}", store.num_trainable());
    }
    Ok(())
}
