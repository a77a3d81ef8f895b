//! Training loop, prediction export and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::{augment, Dataset, SyntheticScene, CLASS_NAMES};
use crate::boxes::{box_convert, CxCyWh};
use crate::decoder::Detections;
use crate::error::{Error, Result};
use crate::matching::GroundTruth;
use crate::metrics::{map_range, EvalRecord, GtBox, MetricsReport, ScoredBox};
use crate::model::{save_checkpoint, AdamW, LossOptions, Model};
use crate::tensor::Tensor;

/// One line of a prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub class: usize,
    pub score: f64,
    /// Normalized `[cx, cy, w, h]`.
    pub bbox: [f64; 4],
}

/// Every query becomes one prediction: its most likely foreground class and
/// that class's probability.
pub fn detections_to_predictions(image_id: &str, det: &Detections) -> Vec<Prediction> {
    let c = det.num_classes();
    det.probabilities()
        .iter()
        .enumerate()
        .map(|(q, p)| {
            let (class, &score) = p[..c]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("at least one class");
            Prediction {
                image_id: image_id.to_string(),
                class,
                score,
                bbox: std::array::from_fn(|k| det.boxes.at2(q, k)),
            }
        })
        .collect()
}

fn stack(scenes: &[&SyntheticScene]) -> Result<Tensor> {
    Tensor::cat0(&scenes.iter().map(|s| s.image.clone()).collect::<Vec<_>>())
}

/// Inference over scenes in batches of `batch`.
pub fn predict(model: &Model, scenes: &[SyntheticScene], batch: usize) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for chunk in scenes.chunks(batch.max(1)) {
        let refs: Vec<&SyntheticScene> = chunk.iter().collect();
        let dets = model.forward(&stack(&refs)?)?;
        for (s, d) in chunk.iter().zip(&dets) {
            out.extend(detections_to_predictions(&s.id, d));
        }
    }
    Ok(out)
}

/// Pair predictions with ground truth, image by image (in scene order).
pub fn eval_records(predictions: &[Prediction], scenes: &[SyntheticScene]) -> Result<Vec<EvalRecord>> {
    let mut by_id: BTreeMap<&str, Vec<ScoredBox>> = BTreeMap::new();
    for p in predictions {
        if p.class >= CLASS_NAMES.len() {
            return Err(Error::Format(format!("{}: class {} out of range", p.image_id, p.class)));
        }
        by_id.entry(p.image_id.as_str()).or_default().push(ScoredBox {
            class: p.class,
            score: p.score,
            bbox: box_convert(CxCyWh(p.bbox))?.clip_unit(),
        });
    }
    let mut records = Vec::with_capacity(scenes.len());
    for s in scenes {
        records.push(EvalRecord {
            predictions: by_id.remove(s.id.as_str()).unwrap_or_default(),
            ground_truth: s
                .instances
                .iter()
                .map(|&(c, b)| Ok(GtBox::new(c, box_convert(CxCyWh(b))?)))
                .collect::<Result<_>>()?,
        });
    }
    if let Some(id) = by_id.keys().next() {
        return Err(Error::Format(format!("prediction for unknown image {id}")));
    }
    Ok(records)
}

pub fn score_predictions(predictions: &[Prediction], scenes: &[SyntheticScene]) -> Result<MetricsReport> {
    map_range(&eval_records(predictions, scenes)?, &CLASS_NAMES)
}

pub fn evaluate(model: &Model, scenes: &[SyntheticScene], batch: usize) -> Result<MetricsReport> {
    score_predictions(&predict(model, scenes, batch)?, scenes)
}

/// Perfect predictions for `scenes` (each object once, score 1).
pub fn oracle_predictions(scenes: &[SyntheticScene]) -> Vec<Prediction> {
    scenes
        .iter()
        .flat_map(|s| {
            s.instances.iter().map(|&(class, bbox)| Prediction {
                image_id: s.id.clone(),
                class,
                score: 1.0,
                bbox,
            })
        })
        .collect()
}

/// Mean eval-mode loss over scenes (final decoder layer terms).
pub fn mean_loss(model: &Model, scenes: &[SyntheticScene], batch: usize, opts: &LossOptions) -> Result<f64> {
    let mut total = 0.0;
    for chunk in scenes.chunks(batch.max(1)) {
        let refs: Vec<&SyntheticScene> = chunk.iter().collect();
        let gts: Vec<GroundTruth> = chunk.iter().map(|s| s.ground_truth()).collect();
        total += model.eval_loss(&stack(&refs)?, &gts, opts)?.total * chunk.len() as f64;
    }
    Ok(total / scenes.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub val_loss: f64,
    pub val_map50: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights of the epoch with the best validation mAP@0.5.
    pub best: Model,
    pub best_epoch: usize,
    pub last: Model,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn best_log(&self) -> &EpochLog {
        &self.log[self.best_epoch - 1]
    }
}

pub fn checkpoint_meta(seed: u64, log: &EpochLog) -> BTreeMap<String, serde_json::Value> {
    let mut m = BTreeMap::new();
    m.insert("seed".into(), serde_json::json!(seed));
    m.insert("epoch".into(), serde_json::json!(log.epoch));
    m.insert("val_map50".into(), serde_json::json!(log.val_map50));
    m.insert("val_loss".into(), serde_json::json!(log.val_loss));
    m
}

/// Train from a fresh model seeded by `cfg.seed`. With `out`, writes
/// `train_log.jsonl`, `best.msdk` and `last.msdk` there.
pub fn train(cfg: &RunConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    train_model(cfg, data, out, Model::build(&cfg.model, cfg.seed)?)
}

pub fn train_model(cfg: &RunConfig, data: &Dataset, out: Option<&Path>, mut model: Model) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let opts = cfg.loss.options();
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let schedule = cfg.optim.schedule(steps_per_epoch * cfg.epochs);
    let mut opt = AdamW::new(cfg.optim.adamw());
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train_log.jsonl");
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut log: Vec<EpochLog> = Vec::new();
    let mut best: Option<(Model, usize, f64)> = None;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1000 + epoch as u64);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum, mut seen) = ([0.0; 4], 0usize);
        let mut lr = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (imgs, gts): (Vec<Tensor>, Vec<GroundTruth>) =
                idx.iter().map(|&i| augment(&data.train[i], &cfg.augment, &mut rng)).unzip();
            lr = schedule.lr(step);
            // Cheap: tensors are shared until the optimizer writes them.
            let prev = model.store.clone();
            let br = match model.train_step(&mut opt, lr, &Tensor::cat0(&imgs)?, &gts, &opts) {
                Ok(b) => b,
                Err(Error::Evaluation(msg)) => return Err(diverged(cfg, out, &model, epoch, step, &msg)),
                Err(e) => return Err(e),
            };
            if model.store.iter().any(|(_, p)| !p.value.all_finite()) {
                model.store = prev;
                return Err(diverged(cfg, out, &model, epoch, step, "non-finite weights after update"));
            }
            let n = idx.len();
            for (s, v) in sum.iter_mut().zip([br.total, br.cls, br.l1, br.giou]) {
                *s += v * n as f64;
            }
            seen += n;
            step += 1;
        }
        let (val_loss, val_map50) = if data.val.is_empty() {
            (f64::NAN, 0.0)
        } else {
            (
                mean_loss(&model, &data.val, cfg.batch_size, &opts)?,
                evaluate(&model, &data.val, cfg.batch_size)?.map50,
            )
        };
        let e = EpochLog {
            epoch,
            lr,
            loss: sum[0] / seen as f64,
            cls: sum[1] / seen as f64,
            l1: sum[2] / seen as f64,
            giou: sum[3] / seen as f64,
            val_loss,
            val_map50,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.4} (cls {:.4} l1 {:.4} giou {:.4}) val loss {:.4} val mAP50 {:.4} [{:.1}s]",
            cfg.epochs,
            e.loss,
            e.cls,
            e.l1,
            e.giou,
            e.val_loss,
            e.val_map50,
            e.seconds
        );
        if let Some((f, p)) = &mut log_file {
            writeln!(f, "{}", serde_json::to_string(&e).expect("log serializes")).map_err(|err| Error::io(p.clone(), err))?;
        }
        if best.as_ref().is_none_or(|b| val_map50 > b.2) {
            best = Some((model.clone(), epoch, val_map50));
        }
        log.push(e);
    }
    let (best, best_epoch, _) = best.ok_or_else(|| Error::Config("epochs must be at least 1".into()))?;
    if let Some(dir) = out {
        save_checkpoint(&dir.join("best.msdk"), &best, &checkpoint_meta(cfg.seed, &log[best_epoch - 1]))?;
        save_checkpoint(&dir.join("last.msdk"), &model, &checkpoint_meta(cfg.seed, log.last().expect("epochs ran")))?;
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        log,
    })
}

fn diverged(cfg: &RunConfig, out: Option<&Path>, model: &Model, epoch: usize, step: usize, msg: &str) -> Error {
    let mut where_ = String::from("not saved (no output directory)");
    if let Some(dir) = out {
        let p: PathBuf = dir.join("last_good.msdk");
        let mut meta = BTreeMap::new();
        meta.insert("seed".into(), serde_json::json!(cfg.seed));
        meta.insert("diverged_at_step".into(), serde_json::json!(step));
        where_ = match save_checkpoint(&p, model, &meta) {
            Ok(()) => format!("saved to {}", p.display()),
            Err(e) => format!("could not be saved: {e}"),
        };
    }
    Error::Evaluation(format!(
        "training diverged at epoch {epoch}, step {step} ({msg}); last good weights {where_}"
    ))
}
