//! Fold a three-branch RepConv block into one 3x3 convolution and check that
//! nothing changed.

use msdetr::reparam::{fuse, rep_forward_train, RepBlock};
use msdetr::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> msdetr::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (cin, cout, stride) in [(8, 8, 1), (8, 16, 1), (8, 16, 2)] {
        let block = RepBlock::random(cin, cout, stride, &mut rng);
        let fused = fuse(&block)?;
        let x = Tensor::randn(&[2, cin, 12, 12], 1.0, &mut rng);
        let diff = rep_forward_train(&block, &x)?.max_abs_diff(&fused.forward(&x)?);
        println!(
            "{cin:>2} -> {cout:>2}, stride {stride}, identity {:<5}  max |diff| {diff:.2e}  FLOPs {} -> {}",
            block.has_identity,
            block.flops(12, 12),
            fused.flops(12, 12)
        );
    }
    Ok(())
}
