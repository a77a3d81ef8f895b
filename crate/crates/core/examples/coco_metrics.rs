//! Score hand-made detections with the COCO-style evaluator.

use msdetr::boxes::Xyxy;
use msdetr::metrics::{map_range, EvalRecord, GtBox, ScoredBox};

fn main() -> msdetr::Result<()> {
    let pred = |class, score, b: [f64; 4]| ScoredBox { class, score, bbox: Xyxy(b) };
    let records = vec![
        EvalRecord {
            predictions: vec![
                pred(0, 0.9, [0.10, 0.10, 0.30, 0.30]),
                pred(0, 0.6, [0.55, 0.55, 0.75, 0.80]),
                pred(1, 0.8, [0.40, 0.10, 0.90, 0.45]),
            ],
            ground_truth: vec![
                GtBox::new(0, Xyxy([0.11, 0.10, 0.31, 0.29])),
                GtBox::new(1, Xyxy([0.42, 0.12, 0.88, 0.44])),
            ],
        },
        EvalRecord {
            predictions: vec![pred(0, 0.7, [0.20, 0.60, 0.26, 0.66]), pred(1, 0.3, [0.0, 0.0, 0.5, 0.5])],
            ground_truth: vec![GtBox::new(0, Xyxy([0.20, 0.60, 0.25, 0.66]))],
        },
    ];
    let report = map_range(&records, &["crack", "corrosion"])?;
    print!("{}", report.table());
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}
