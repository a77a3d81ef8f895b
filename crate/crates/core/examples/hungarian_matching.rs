//! Match four predicted queries to two objects and break down the loss.

use msdetr::decoder::Detections;
use msdetr::matching::{hungarian, match_cost, total_loss, FocalParams, GroundTruth, LossWeights};
use msdetr::Tensor;

fn main() -> msdetr::Result<()> {
    // Three foreground classes plus background in the last column.
    let det = Detections {
        class_logits: Tensor::new(
            &[4, 4],
            vec![
                2.0, 0.1, 0.0, 0.5, //
                0.0, 0.2, 0.1, 2.5, //
                0.1, 0.0, 1.8, 0.3, //
                0.3, 1.0, 0.2, 0.9,
            ],
        )?,
        boxes: Tensor::new(
            &[4, 4],
            vec![
                0.30, 0.30, 0.20, 0.20, //
                0.50, 0.50, 0.60, 0.60, //
                0.72, 0.68, 0.18, 0.25, //
                0.10, 0.90, 0.10, 0.10,
            ],
        )?,
    };
    let gt = GroundTruth {
        boxes: vec![[0.70, 0.70, 0.20, 0.20], [0.32, 0.28, 0.22, 0.18]],
        labels: vec![2, 0],
    };
    let w = LossWeights::default();
    let cost = match_cost(&det, &gt, w)?;
    for q in 0..4 {
        println!("query {q}: cost {:>8.4} {:>8.4}", cost.at2(q, 0), cost.at2(q, 1));
    }
    let assignment = hungarian(&cost)?;
    println!("assignment (query, object): {:?}", assignment.pairs);
    let loss = total_loss(&det, &gt, &assignment, w, FocalParams::default())?;
    println!(
        "loss {:.4} = {} x cls {:.4} + {} x L1 {:.4} + {} x GIoU {:.4}",
        loss.total, w.cls, loss.cls, w.l1, loss.l1, w.giou, loss.giou
    );
    Ok(())
}
