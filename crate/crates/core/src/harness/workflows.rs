//! Fusion check, latency benchmark and the toggle ablation sweep.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::Dataset;
use super::train::{mean_loss, train};
use crate::error::{Error, Result};
use crate::model::{forward_store, Model};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuseReport {
    pub rep_blocks: usize,
    pub images: usize,
    /// Largest absolute difference over logits and boxes, eval mode, 64-bit.
    pub max_divergence: f64,
    pub params_before: usize,
    pub params_after: usize,
    pub flops_before: u64,
    pub flops_after: u64,
}

/// Fuse `model` and compare it with the original on `images` random inputs.
pub fn fuse_and_check(model: &Model, images: usize, size: usize, seed: u64) -> Result<(Model, FuseReport)> {
    if model.is_fused() {
        return Err(Error::State("model is already fused".into()));
    }
    let fused = model.fuse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..images {
        let x = Tensor::rand_uniform(&[1, 3, size, size], 0.0, 1.0, &mut rng);
        for (a, b) in model.forward(&x)?.iter().zip(&fused.forward(&x)?) {
            worst = worst
                .max(a.class_logits.max_abs_diff(&b.class_logits))
                .max(a.boxes.max_abs_diff(&b.boxes));
        }
    }
    let report = FuseReport {
        rep_blocks: model.backbone.rep_blocks(),
        images,
        max_divergence: worst,
        params_before: model.num_params(),
        params_after: fused.num_params(),
        flops_before: model.flops(size, size)?,
        flops_after: fused.flops(size, size)?,
    };
    Ok((fused, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
    /// Images per second at the mean latency.
    pub fps: f64,
    pub flops: u64,
}

impl LatencyStats {
    fn from_samples(mut ms: Vec<f64>, flops: u64) -> Self {
        ms.sort_by(f64::total_cmp);
        let n = ms.len();
        let at = |q: f64| ms[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
        let mean = ms.iter().sum::<f64>() / n as f64;
        LatencyStats {
            median_ms: if n % 2 == 1 { ms[n / 2] } else { 0.5 * (ms[n / 2 - 1] + ms[n / 2]) },
            p95_ms: at(0.95),
            mean_ms: mean,
            fps: 1000.0 / mean,
            flops,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub image_size: usize,
    pub warmup: usize,
    pub iters: usize,
    pub precision: String,
    pub rep_blocks: usize,
    pub unfused: LatencyStats,
    pub fused: LatencyStats,
}

impl BenchReport {
    pub fn summary(&self) -> String {
        let row = |name: &str, s: &LatencyStats| {
            format!(
                "{name:<8} median {:>8.3} ms  p95 {:>8.3} ms  {:>7.1} img/s  {:>6.1} MFLOP\n",
                s.median_ms,
                s.p95_ms,
                s.fps,
                s.flops as f64 / 1e6
            )
        };
        format!(
            "{}x{} single-image {} latency, {} warmup + {} timed runs\n{}{}",
            self.image_size,
            self.image_size,
            self.precision,
            self.warmup,
            self.iters,
            row("unfused", &self.unfused),
            row("fused", &self.fused)
        )
    }
}

/// Single-image 32-bit latency of `model` before and after fusion. Runs of
/// the two variants are interleaved so drift affects both alike.
pub fn bench(model: &Model, size: usize, warmup: usize, iters: usize, seed: u64) -> Result<BenchReport> {
    if model.is_fused() {
        return Err(Error::State("bench needs the unfused model".into()));
    }
    let fused = model.fuse()?;
    let (s0, s1) = (model.store.cast::<f32>(), fused.store.cast::<f32>());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f64>::rand_uniform(&[1, 3, size, size], 0.0, 1.0, &mut rng).cast::<f32>();
    let (mut t0, mut t1) = (Vec::with_capacity(iters), Vec::with_capacity(iters));
    for i in 0..warmup + iters {
        let a = Instant::now();
        forward_store(model, &s0, &x)?;
        let b = Instant::now();
        forward_store(&fused, &s1, &x)?;
        let c = Instant::now();
        if i >= warmup {
            t0.push((b - a).as_secs_f64() * 1e3);
            t1.push((c - b).as_secs_f64() * 1e3);
        }
    }
    Ok(BenchReport {
        image_size: size,
        warmup,
        iters,
        precision: "f32".into(),
        rep_blocks: model.backbone.rep_blocks(),
        unfused: LatencyStats::from_samples(t0, model.flops(size, size)?),
        fused: LatencyStats::from_samples(t1, fused.flops(size, size)?),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub rep: bool,
    pub da: bool,
    pub csff: bool,
    pub params: usize,
    pub mflops: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_map50: f64,
}

/// The eight toggle combinations, baseline first and the full model last.
pub const TOGGLE_LATTICE: [(bool, bool, bool); 8] = [
    (false, false, false),
    (true, false, false),
    (false, true, false),
    (false, false, true),
    (true, true, false),
    (true, false, true),
    (false, true, true),
    (true, true, true),
];

/// Train every toggle combination for `cfg.ablate_epochs` on the same data and seed.
pub fn ablate(cfg: &RunConfig, data: &Dataset) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(8);
    for (rep, da, csff) in TOGGLE_LATTICE {
        let mut c = cfg.clone();
        c.model = c.model.with_toggles(rep, da, csff);
        c.epochs = cfg.ablate_epochs;
        log::info!("ablation: rep={rep} da={da} csff={csff}");
        let out = train(&c, data, None)?;
        let last = out.log.last().expect("at least one epoch");
        let val_loss = if data.val.is_empty() {
            f64::NAN
        } else {
            mean_loss(&out.last, &data.val, c.batch_size, &c.loss.options())?
        };
        rows.push(AblationRow {
            rep,
            da,
            csff,
            params: out.last.num_params(),
            mflops: out.last.flops(c.data.image_size, c.data.image_size)? as f64 / 1e6,
            train_loss: last.loss,
            val_loss,
            val_map50: out.log.iter().map(|e| e.val_map50).fold(0.0, f64::max),
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "x" } else { "-" };
    let mut s = String::from("| Rep | DA | CSFF | params | MFLOPs | train loss | val loss | val mAP@0.5 |\n");
    s.push_str("|-----|----|------|-------:|-------:|-----------:|---------:|------------:|\n");
    for r in rows {
        s.push_str(&format!(
            "| {:^3} | {:^2} | {:^4} | {:>6} | {:>6.1} | {:>10.4} | {:>8.4} | {:>11.4} |\n",
            mark(r.rep),
            mark(r.da),
            mark(r.csff),
            r.params,
            r.mflops,
            r.train_loss,
            r.val_loss,
            r.val_map50
        ));
    }
    s
}
