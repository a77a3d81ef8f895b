//! COCO-style detection metrics: 101-point interpolated AP per class with
//! greedy highest-score-first matching, averaged over IoU thresholds and
//! area buckets.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::boxes::Xyxy;
use crate::error::{Error, Result};

pub use crate::boxes::iou;

/// Side length at which box areas are measured for the size buckets.
pub const EVAL_RESOLUTION: f64 = 640.0;
/// Upper area bound of "small" objects, in pixels at [`EVAL_RESOLUTION`].
pub const SMALL_AREA: f64 = 32.0 * 32.0;
/// Upper area bound of "medium" objects.
pub const MEDIUM_AREA: f64 = 96.0 * 96.0;
/// Detections considered per image, highest score first.
pub const MAX_DETS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub class: usize,
    pub score: f64,
    /// Normalized corners.
    pub bbox: Xyxy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub class: usize,
    pub bbox: Xyxy,
    /// Pixel area at the evaluation resolution.
    pub area: f64,
}

impl GtBox {
    pub fn new(class: usize, bbox: Xyxy) -> Self {
        GtBox {
            class,
            bbox,
            area: pixel_area(&bbox),
        }
    }
}

fn pixel_area(b: &Xyxy) -> f64 {
    b.area() * EVAL_RESOLUTION * EVAL_RESOLUTION
}

/// Predictions and ground truth of one image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub predictions: Vec<ScoredBox>,
    pub ground_truth: Vec<GtBox>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        for p in &self.predictions {
            if !(0.0..=1.0).contains(&p.score) {
                return Err(Error::Domain(format!("score {} outside [0, 1]", p.score)));
            }
            if p.bbox.0.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("non-finite predicted box".into()));
            }
        }
        if self.ground_truth.iter().any(|g| g.bbox.0.iter().any(|v| !v.is_finite())) {
            return Err(Error::Domain("non-finite ground-truth box".into()));
        }
        Ok(())
    }
}

/// Inclusive-exclusive pixel-area range; GT outside it is ignored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AreaRange(pub f64, pub f64);

impl AreaRange {
    pub const ALL: AreaRange = AreaRange(0.0, f64::INFINITY);
    pub const SMALL: AreaRange = AreaRange(0.0, SMALL_AREA);
    pub const MEDIUM: AreaRange = AreaRange(SMALL_AREA, MEDIUM_AREA);
    pub const LARGE: AreaRange = AreaRange(MEDIUM_AREA, f64::INFINITY);

    fn contains(self, a: f64) -> bool {
        a >= self.0 && a < self.1
    }
}

/// 101-point interpolated area under a precision-recall curve given
/// per-detection true-positive flags in descending score order.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// AP of one class at one IoU threshold; `None` when the class has no
/// (non-ignored) ground truth.
pub fn average_precision_in(records: &[EvalRecord], class: usize, iou_thresh: f64, range: AreaRange) -> Option<f64> {
    // (score, image order, is_tp) of non-ignored detections.
    let mut dets: Vec<(f64, usize, bool)> = Vec::new();
    let mut num_gt = 0usize;
    for rec in records {
        let gts: Vec<(&GtBox, bool)> = rec
            .ground_truth
            .iter()
            .filter(|g| g.class == class)
            .map(|g| (g, !range.contains(g.area)))
            .collect();
        num_gt += gts.iter().filter(|(_, ignored)| !ignored).count();
        let mut preds: Vec<&ScoredBox> = rec.predictions.iter().filter(|p| p.class == class).collect();
        preds.sort_by(|a, b| b.score.total_cmp(&a.score));
        preds.truncate(MAX_DETS);
        let mut taken = vec![false; gts.len()];
        for p in preds {
            // Prefer the best unmatched non-ignored GT; fall back to ignored ones.
            let mut best: Option<(usize, bool, f64)> = None;
            for (j, (g, ignored)) in gts.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let o = iou(&p.bbox, &g.bbox);
                if o < iou_thresh {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((_, bi, bo)) => (bi && !ignored) || (bi == *ignored && o > bo),
                };
                if better {
                    best = Some((j, *ignored, o));
                }
            }
            match best {
                Some((j, ignored, _)) => {
                    taken[j] = true;
                    if !ignored {
                        dets.push((p.score, dets.len(), true));
                    }
                }
                None => {
                    if range.contains(pixel_area(&p.bbox)) {
                        dets.push((p.score, dets.len(), false));
                    }
                }
            }
        }
    }
    if num_gt == 0 {
        return None;
    }
    dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let tp: Vec<bool> = dets.iter().map(|d| d.2).collect();
    Some(interpolated_ap(&tp, num_gt))
}

pub fn average_precision(records: &[EvalRecord], class: usize, iou_thresh: f64) -> Option<f64> {
    average_precision_in(records, class, iou_thresh, AreaRange::ALL)
}

/// `0.50, 0.55, ..., 0.95`.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map50: f64,
    pub map5095: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    /// AP at IoU 0.5 per class name; -1 when the class has no ground truth.
    pub per_class: IndexMap<String, f64>,
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Mean over classes (with ground truth in `range`) of AP averaged over `thresholds`.
fn map_over(records: &[EvalRecord], classes: usize, thresholds: &[f64], range: AreaRange) -> Option<f64> {
    mean_defined((0..classes).map(|c| {
        mean_defined(
            thresholds
                .iter()
                .map(|&t| average_precision_in(records, c, t, range)),
        )
    }))
}

/// All summary metrics. Size buckets without any ground truth report -1.
pub fn map_range(records: &[EvalRecord], class_names: &[&str]) -> Result<MetricsReport> {
    for r in records {
        r.validate()?;
    }
    let classes = class_names.len();
    if let Some(g) = records.iter().flat_map(|r| &r.ground_truth).find(|g| g.class >= classes) {
        return Err(Error::Domain(format!("ground-truth class {} outside {classes} classes", g.class)));
    }
    let mut per_class = IndexMap::new();
    for (c, name) in class_names.iter().enumerate() {
        let ap = average_precision(records, c, 0.5);
        if ap.is_none() {
            log::warn!("class {name} has no ground truth; excluded from the mean");
        }
        per_class.insert(name.to_string(), ap.unwrap_or(-1.0));
    }
    let map50 = mean_defined(per_class.values().map(|&v| (v >= 0.0).then_some(v)))
        .ok_or_else(|| Error::Domain("no class has ground truth".into()))?;
    let all = iou_thresholds();
    let map5095 = map_over(records, classes, &all, AreaRange::ALL).unwrap_or(0.0);
    let bucket = |r| map_over(records, classes, &all, r).unwrap_or(-1.0);
    Ok(MetricsReport {
        map50,
        map5095,
        ap_s: bucket(AreaRange::SMALL),
        ap_m: bucket(AreaRange::MEDIUM),
        ap_l: bucket(AreaRange::LARGE),
        per_class,
    })
}

impl MetricsReport {
    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let width = self
            .per_class
            .keys()
            .map(|k| k.len() + 5)
            .chain([9])
            .max()
            .unwrap_or(9);
        let mut s = String::new();
        let mut row = |k: &str, v: f64| {
            let shown = if v < 0.0 { "n/a".to_string() } else { format!("{v:.4}") };
            s.push_str(&format!("{k:<width$}  {shown:>7}\n"));
        };
        row("mAP@0.5", self.map50);
        row("mAP@.5:.95", self.map5095);
        row("AP_S", self.ap_s);
        row("AP_M", self.ap_m);
        row("AP_L", self.ap_l);
        for (k, &v) in &self.per_class {
            row(&format!("AP50 {k}"), v);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> Xyxy {
        Xyxy([x1, y1, x2, y2])
    }

    fn pred(class: usize, score: f64, b: Xyxy) -> ScoredBox {
        ScoredBox { class, score, bbox: b }
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(2.0, 0.0, 3.0, 1.0)), 0.0);
        assert!((iou(&a, &bx(0.5, 0.0, 1.5, 1.0)) - 1.0 / 3.0).abs() < 1e-15);
        let p = bx(0.3, 0.3, 0.3, 0.3);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn single_object_cases() {
        let g = bx(0.1, 0.1, 0.3, 0.3);
        let rec = |p: Xyxy| {
            vec![EvalRecord {
                predictions: vec![pred(0, 0.9, p)],
                ground_truth: vec![GtBox::new(0, g)],
            }]
        };
        assert_eq!(average_precision(&rec(g), 0, 0.5), Some(1.0));
        assert_eq!(average_precision(&rec(bx(0.6, 0.6, 0.8, 0.8)), 0, 0.5), Some(0.0));
        assert_eq!(average_precision(&rec(g), 1, 0.5), None);
    }

    #[test]
    fn hand_staircase() {
        // TP (0.9), FP (0.8), TP (0.7) against two objects.
        let g1 = bx(0.1, 0.1, 0.2, 0.2);
        let g2 = bx(0.5, 0.5, 0.7, 0.7);
        let records = vec![EvalRecord {
            predictions: vec![
                pred(0, 0.7, g2),
                pred(0, 0.9, g1),
                pred(0, 0.8, bx(0.8, 0.8, 0.9, 0.9)),
            ],
            ground_truth: vec![GtBox::new(0, g1), GtBox::new(0, g2)],
        }];
        // Recall 1/2 up to r = 0.50 at precision 1, then precision 2/3 to r = 1.
        let want = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        let got = average_precision(&records, 0, 0.5).unwrap();
        assert!((got - want).abs() < 1e-15);
        assert!((got - 0.83498).abs() < 1e-5);
    }

    /// Three images, two classes; every AP worked out by hand.
    fn three_image_fixture() -> Vec<EvalRecord> {
        vec![
            EvalRecord {
                predictions: vec![
                    pred(0, 0.95, bx(0.10, 0.10, 0.30, 0.30)),
                    pred(0, 0.60, bx(0.11, 0.10, 0.31, 0.30)), // duplicate
                    pred(1, 0.80, bx(0.50, 0.50, 0.90, 0.90)),
                ],
                ground_truth: vec![GtBox::new(0, bx(0.10, 0.10, 0.30, 0.30)), GtBox::new(1, bx(0.50, 0.50, 0.90, 0.90))],
            },
            EvalRecord {
                predictions: vec![
                    pred(0, 0.90, bx(0.60, 0.60, 0.70, 0.70)), // background
                    pred(0, 0.70, bx(0.20, 0.20, 0.40, 0.40)),
                ],
                ground_truth: vec![GtBox::new(0, bx(0.20, 0.20, 0.40, 0.40))],
            },
            EvalRecord {
                predictions: vec![pred(1, 0.50, bx(0.00, 0.00, 0.20, 0.20))],
                ground_truth: vec![GtBox::new(0, bx(0.70, 0.70, 0.80, 0.80)), GtBox::new(1, bx(0.05, 0.00, 0.20, 0.20))],
            },
        ]
    }

    #[test]
    fn three_image_fixture_matches_hand_evaluation() {
        let r = three_image_fixture();
        // Class 0 by score: 0.95 TP, 0.90 FP, 0.70 TP, 0.60 FP; 3 objects.
        // Recall 1/3 @ P 1, 2/3 @ P 2/3; third object never found.
        let c0 = (34.0 * 1.0 + 33.0 * (2.0 / 3.0)) / 101.0;
        assert!((average_precision(&r, 0, 0.5).unwrap() - c0).abs() < 1e-15);
        // Class 1: 0.80 TP, 0.50 TP at IoU 0.75 (0.15*0.2 / 0.2*0.2), so AP 1
        // up to 0.75 and 1/2 above it.
        assert_eq!(average_precision(&r, 1, 0.5), Some(1.0));
        assert_eq!(average_precision(&r, 1, 0.75), Some(1.0));
        let half = (51.0 * 1.0) / 101.0;
        assert!((average_precision(&r, 1, 0.8).unwrap() - half).abs() < 1e-15);
        let rep = map_range(&r, &["a", "b"]).unwrap();
        assert!((rep.map50 - (c0 + 1.0) / 2.0).abs() < 1e-15);
        // Class 0 boxes match exactly, so its AP is flat across thresholds;
        // class 1 scores 1 on 0.50..0.75 (six thresholds) and 51/101 on four.
        let c1 = (6.0 + 4.0 * half) / 10.0;
        assert!((rep.map5095 - (c0 + c1) / 2.0).abs() < 1e-12);
        assert_eq!(rep.per_class["b"], 1.0);
    }

    #[test]
    fn perfect_and_empty_detectors() {
        let gts = vec![
            GtBox::new(0, bx(0.0, 0.0, 0.02, 0.02)),
            GtBox::new(1, bx(0.2, 0.2, 0.3, 0.3)),
            GtBox::new(1, bx(0.1, 0.5, 0.9, 0.9)),
        ];
        let perfect = vec![EvalRecord {
            predictions: gts.iter().map(|g| pred(g.class, 1.0, g.bbox)).collect(),
            ground_truth: gts.clone(),
        }];
        let r = map_range(&perfect, &["x", "y"]).unwrap();
        for v in [r.map50, r.map5095, r.ap_s, r.ap_m, r.ap_l] {
            assert_eq!(v, 1.0);
        }
        let empty = vec![EvalRecord {
            predictions: vec![],
            ground_truth: gts,
        }];
        let r = map_range(&empty, &["x", "y"]).unwrap();
        for v in [r.map50, r.map5095, r.ap_s, r.ap_m, r.ap_l] {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn buckets_split_at_32_and_96_pixels() {
        let s = 1.0 / EVAL_RESOLUTION;
        assert!(AreaRange::SMALL.contains(GtBox::new(0, bx(0.0, 0.0, 31.0 * s, 32.0 * s)).area));
        assert!(AreaRange::MEDIUM.contains(GtBox::new(0, bx(0.0, 0.0, 32.0 * s, 32.0 * s)).area));
        assert!(AreaRange::LARGE.contains(GtBox::new(0, bx(0.0, 0.0, 96.0 * s, 96.0 * s)).area));
        let rec = vec![EvalRecord {
            predictions: vec![],
            ground_truth: vec![GtBox::new(0, bx(0.0, 0.0, 0.01, 0.01))],
        }];
        let r = map_range(&rec, &["x"]).unwrap();
        assert_eq!((r.ap_s, r.ap_m, r.ap_l), (0.0, -1.0, -1.0));
    }

    #[test]
    fn invalid_records_are_rejected() {
        let rec = vec![EvalRecord {
            predictions: vec![pred(0, 1.5, bx(0.0, 0.0, 0.1, 0.1))],
            ground_truth: vec![GtBox::new(0, bx(0.0, 0.0, 0.1, 0.1))],
        }];
        assert!(map_range(&rec, &["x"]).is_err());
        assert!(map_range(&[EvalRecord::default()], &["x"]).is_err());
    }

    #[test]
    fn report_serializes_to_the_schema() {
        let r = map_range(&three_image_fixture(), &["a", "b"]).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        for k in ["map50", "map5095", "ap_s", "ap_m", "ap_l", "per_class"] {
            assert!(keys.contains(&k));
        }
        assert!(r.table().lines().count() == 7);
    }

    fn random_records(rng: &mut ChaCha8Rng, classes: usize) -> Vec<EvalRecord> {
        let rand_box = |rng: &mut ChaCha8Rng| {
            let x = rng.random_range(0.0..0.8);
            let y = rng.random_range(0.0..0.8);
            bx(x, y, x + rng.random_range(0.02..0.2), y + rng.random_range(0.02..0.2))
        };
        (0..rng.random_range(1..5))
            .map(|_| {
                let gts: Vec<GtBox> = (0..rng.random_range(1..5))
                    .map(|_| GtBox::new(rng.random_range(0..classes), rand_box(rng)))
                    .collect();
                let mut preds = Vec::new();
                for g in &gts {
                    if rng.random_bool(0.7) {
                        let j = rng.random_range(-0.03..0.03);
                        let b = g.bbox.0;
                        preds.push(pred(g.class, rng.random_range(0.0..1.0), bx(b[0] + j, b[1], b[2] + j, b[3])));
                    }
                }
                for _ in 0..rng.random_range(0..3) {
                    preds.push(pred(rng.random_range(0..classes), rng.random_range(0.0..1.0), rand_box(rng)));
                }
                EvalRecord {
                    predictions: preds,
                    ground_truth: gts,
                }
            })
            .collect()
    }

    proptest! {
        #[test]
        fn ap_depends_on_ranking_only(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let recs = random_records(&mut rng, 2);
            let squashed: Vec<EvalRecord> = recs
                .iter()
                .map(|r| EvalRecord {
                    predictions: r.predictions.iter().map(|p| ScoredBox { score: p.score.powi(3) * 0.5, ..*p }).collect(),
                    ..r.clone()
                })
                .collect();
            for c in 0..2 {
                prop_assert_eq!(average_precision(&recs, c, 0.5), average_precision(&squashed, c, 0.5));
            }
        }

        #[test]
        fn strict_thresholds_never_help(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let recs = random_records(&mut rng, 3);
            let r = map_range(&recs, &["a", "b", "c"]).unwrap();
            prop_assert!(r.map5095 <= r.map50 + 1e-12);
        }

        #[test]
        fn duplicates_are_false_positives(seed in 0u64..10_000, dups in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rng.random_range(0.0..0.5);
            let g = bx(x, x, x + 0.2, x + 0.2);
            let mut preds = vec![pred(0, 0.9, g)];
            preds.extend((0..dups).map(|i| pred(0, 0.8 - 0.1 * i as f64, g)));
            let r = vec![EvalRecord { predictions: preds, ground_truth: vec![GtBox::new(0, g)] }];
            // The first hit reaches recall 1 at precision 1; the rest cannot add.
            prop_assert_eq!(average_precision(&r, 0, 0.5), Some(1.0));
            let late = vec![EvalRecord {
                predictions: vec![pred(0, 0.95, bx(0.8, 0.8, 0.9, 0.9)), pred(0, 0.9, g), pred(0, 0.85, g)],
                ground_truth: vec![GtBox::new(0, g)],
            }];
            prop_assert!((average_precision(&late, 0, 0.5).unwrap() - 0.5).abs() < 1e-15);
        }
    }
}
