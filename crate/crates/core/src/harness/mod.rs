//! Synthetic data, training, evaluation and the workflows behind the
//! `msdetr` command line.

pub mod config;
pub mod data;
pub mod train;
pub mod workflows;

use std::fs;
use std::path::{Path, PathBuf};

pub use config::RunConfig;
pub use data::{gen_dataset, load_dataset, save_dataset, Dataset, SyntheticScene, CLASS_NAMES};
pub use train::{evaluate, predict, score_predictions, train, Prediction, TrainOutcome};
pub use workflows::{ablate, ablation_table, bench, fuse_and_check, AblationRow, BenchReport, FuseReport};

use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Model};

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

/// The dataset named in the config, or the one its seed generates.
pub fn dataset_for(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.paths.data {
        Some(dir) => load_dataset(dir),
        None => Ok(gen_dataset(&cfg.data, cfg.seed)),
    }
}

fn checkpoint_path(cfg: &RunConfig) -> Result<&PathBuf> {
    cfg.paths
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("paths.checkpoint is required for this command".into()))
}

/// `gen`: write the seeded dataset to `out`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<String> {
    let ds = gen_dataset(&cfg.data, cfg.seed);
    ensure_dir(out)?;
    save_dataset(&ds, out, cfg.seed)?;
    Ok(format!(
        "wrote {} train / {} val / {} test images to {}\n",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        out.display()
    ))
}

/// `train`: `train_log.jsonl`, `best.msdk`, `last.msdk` and the resolved config.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<String> {
    let data = dataset_for(cfg)?;
    ensure_dir(out)?;
    write(&out.join("config.toml"), &cfg.to_toml())?;
    let o = train(cfg, &data, Some(out))?;
    let b = o.best_log();
    Ok(format!(
        "best epoch {} of {}: val mAP@0.5 {:.4}, val loss {:.4}; first-epoch loss {:.4}, best-epoch loss {:.4}\ncheckpoint {}\n",
        o.best_epoch,
        o.log.len(),
        b.val_map50,
        b.val_loss,
        o.log[0].loss,
        b.loss,
        out.join("best.msdk").display()
    ))
}

/// `eval`: score a prediction file, or a checkpoint's predictions, on `eval_split`.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<String> {
    let data = dataset_for(cfg)?;
    let scenes = data.split(&cfg.eval_split)?;
    ensure_dir(out)?;
    let preds: Vec<Prediction> = match (&cfg.paths.predictions, &cfg.paths.checkpoint) {
        (Some(p), _) => data::read_jsonl(p)?,
        (None, Some(c)) => {
            let model = load_checkpoint(c)?.model;
            let preds = predict(&model, scenes, cfg.batch_size)?;
            let lines: String = preds
                .iter()
                .map(|p| serde_json::to_string(p).expect("prediction serializes") + "\n")
                .collect();
            write(&out.join("predictions.jsonl"), &lines)?;
            preds
        }
        (None, None) => {
            return Err(Error::Config(
                "eval needs paths.predictions or paths.checkpoint".into(),
            ))
        }
    };
    let report = score_predictions(&preds, scenes)?;
    write(&out.join("metrics.json"), &json(&report))?;
    Ok(report.table())
}

/// `fuse`: fused checkpoint plus a divergence report.
pub fn cmd_fuse(cfg: &RunConfig, out: &Path) -> Result<String> {
    let ck = load_checkpoint(checkpoint_path(cfg)?)?;
    let (fused, report) = fuse_and_check(&ck.model, 20, cfg.data.image_size, cfg.seed)?;
    ensure_dir(out)?;
    save_checkpoint(&out.join("fused.msdk"), &fused, &ck.meta)?;
    write(&out.join("fuse_report.json"), &json(&report))?;
    Ok(format!(
        "fused {} blocks: max divergence {:.3e} over {} images; params {} -> {}; MFLOPs {:.2} -> {:.2}\n",
        report.rep_blocks,
        report.max_divergence,
        report.images,
        report.params_before,
        report.params_after,
        report.flops_before as f64 / 1e6,
        report.flops_after as f64 / 1e6
    ))
}

/// `bench`: latency of the checkpoint (or a fresh model) before and after fusion.
pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<String> {
    let model = match &cfg.paths.checkpoint {
        Some(p) => load_checkpoint(p)?.model,
        None => Model::build(&cfg.model, cfg.seed)?,
    };
    let report = bench(&model, cfg.data.image_size, cfg.bench_warmup, cfg.bench_iters, cfg.seed)?;
    ensure_dir(out)?;
    write(&out.join("bench.json"), &json(&report))?;
    Ok(report.summary())
}

/// `ablate`: the eight toggle combinations, as JSON and a markdown table.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<String> {
    let data = dataset_for(cfg)?;
    let rows = ablate(cfg, &data)?;
    let table = ablation_table(&rows);
    ensure_dir(out)?;
    write(&out.join("ablation.json"), &json(&rows))?;
    write(&out.join("ablation.md"), &table)?;
    Ok(table)
}
