//! Acceptance checks. Prints one PASS/FAIL line per criterion; with
//! `ACCEPTANCE_STRICT=1` any failure also makes the process exit non-zero.
//! Pass numbers (`cargo test --test acceptance -- 7`) to run a subset.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use msdetr::autograd::{ms_deform_sample, ConvSpec, Graph, LevelShape, Var};
use msdetr::boxes::{giou, iou, Xyxy};
use msdetr::decoder::{DecoderLayer, SelfAttention};
use msdetr::deform_attn::{predict_weights, tokens_of, EncoderLayer, MsDeformAttn};
use msdetr::fusion::{ChannelAttention, ConvStyle, GsConv, VoVGsCsp};
use msdetr::gradcheck::grad_check_many;
use msdetr::harness::train::oracle_predictions;
use msdetr::harness::{ablate, ablation_table, bench, gen_dataset, score_predictions, train, RunConfig};
use msdetr::matching::hungarian;
use msdetr::metrics::{map_range, EvalRecord, GtBox, ScoredBox};
use msdetr::model::{Model, ModelConfig};
use msdetr::nn::{Builder, Ctx, ParamKind, ParamStore};
use msdetr::reparam::{fuse, rep_forward_train, RepBlock};
use msdetr::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- 1

/// Random running statistics and affine terms in every batch norm, so the
/// folded kernels differ from the raw ones.
fn perturb_batch_norms(store: &mut ParamStore, r: &mut ChaCha8Rng) {
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    for n in names {
        let len = store.tensor(&n).unwrap().len();
        let v = if n.ends_with("running_var") {
            Tensor::rand_uniform(&[len], 0.5, 2.0, r)
        } else if n.ends_with("running_mean") || n.ends_with(".beta") {
            Tensor::rand_uniform(&[len], -0.5, 0.5, r)
        } else if n.ends_with(".gamma") && n.contains(".bn") {
            Tensor::rand_uniform(&[len], 0.5, 1.5, r)
        } else {
            continue;
        };
        store.set(&n, v).unwrap();
    }
}

fn fusion_equivalence() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(101);
    let mut worst_block: f64 = 0.0;
    for _ in 0..1000 {
        let cin = r.random_range(1..=6);
        let cout = if r.random_bool(0.4) { cin } else { r.random_range(1..=6) };
        let stride = if r.random_bool(0.3) { 2 } else { 1 };
        let block = RepBlock::random(cin, cout, stride, &mut r);
        let (h, w) = (r.random_range(3..=9), r.random_range(3..=9));
        let x = Tensor::randn(&[r.random_range(1..=2), cin, h, w], 1.0, &mut r);
        let d = rep_forward_train(&block, &x).unwrap().max_abs_diff(&fuse(&block).unwrap().forward(&x).unwrap());
        worst_block = worst_block.max(d);
    }
    let mut worst_model: f64 = 0.0;
    let mut cfg = ModelConfig::default();
    cfg.input_size = 64;
    for i in 0..20 {
        let mut model = Model::build(&cfg, 500 + i).unwrap();
        perturb_batch_norms(&mut model.store, &mut r);
        let fused = model.fuse().unwrap();
        let x = Tensor::rand_uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut r);
        for (a, b) in model.forward(&x).unwrap().iter().zip(&fused.forward(&x).unwrap()) {
            worst_model = worst_model
                .max(a.class_logits.max_abs_diff(&b.class_logits))
                .max(a.boxes.max_abs_diff(&b.boxes));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst_block <= 1e-9 && worst_model <= 1e-9 && secs < 120.0,
        format!("blocks max {worst_block:.2e}, models max {worst_model:.2e} (<= 1e-9); {secs:.1}s (< 120s)"),
    )
}

// ---------------------------------------------------------------- 2

fn bilinear_oracle(map: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let (_, c, h, w) = map.dims4().unwrap();
    let px = x * w as f64 - 0.5;
    let py = y * h as f64 - 0.5;
    let (x0, y0) = (px.floor(), py.floor());
    let mut out = vec![0.0; c];
    for (dx, dy) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
        let (xi, yi) = (x0 + dx, y0 + dy);
        let wx = 1.0 - (px - xi).abs();
        let wy = 1.0 - (py - yi).abs();
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            continue;
        }
        for (ch, o) in out.iter_mut().enumerate() {
            *o += wx * wy * map.at4(0, ch, yi as usize, xi as usize);
        }
    }
    out
}

fn deform_attention_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(202);
    let (mut worst, mut worst_mass): (f64, f64) = (0.0, 0.0);
    let mut counts_ok = true;
    for _ in 0..100 {
        let m = r.random_range(1..=3);
        let k = r.random_range(1..=4);
        let l = r.random_range(1..=3);
        let d = m * r.random_range(1..=3);
        let shapes: Vec<LevelShape> = (0..l)
            .map(|_| LevelShape {
                h: r.random_range(1..=7),
                w: r.random_range(1..=7),
            })
            .collect();
        let mut store = ParamStore::new();
        let layer = MsDeformAttn::new(&mut Builder { store: &mut store, rng: &mut r }, "a", m, k, d, &shapes).unwrap();
        let s = m * l * k;
        store.set("a.offset.w", Tensor::randn(&[2 * s, d], 0.2, &mut r)).unwrap();
        store.set("a.offset.b", Tensor::randn(&[2 * s], 0.2, &mut r)).unwrap();
        store.set("a.weight.w", Tensor::randn(&[s, d], 0.7, &mut r)).unwrap();
        store.set("a.weight.b", Tensor::randn(&[s], 0.7, &mut r)).unwrap();
        let params = layer.params(&store).unwrap();
        let maps: Vec<Tensor> = shapes.iter().map(|sh| Tensor::randn(&[1, d, sh.h, sh.w], 1.0, &mut r)).collect();
        let nq = r.random_range(1..=4);
        let zs = Tensor::randn(&[nq, d], 1.0, &mut r);
        let refs = Tensor::rand_uniform(&[nq, 2], 0.0, 1.0, &mut r);

        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, false);
        let mv: Vec<Var> = maps.iter().map(|t| ctx.constant(t.clone())).collect();
        let got = layer
            .forward_maps(&ctx, ctx.constant(zs.clone()), ctx.constant(refs.clone()), &mv)
            .unwrap();
        counts_ok &= g.sample_reads() == (nq * m * l * k * 4) as u64;

        for q in 0..nq {
            let z: Vec<f64> = (0..d).map(|c| zs.at2(q, c)).collect();
            let matvec = |w: &Tensor, b: &Tensor| -> Vec<f64> {
                (0..w.shape()[0])
                    .map(|o| b.data()[o] + (0..d).map(|c| w.at2(o, c) * z[c]).sum::<f64>())
                    .collect()
            };
            let off = matvec(&params.offset_w, &params.offset_b);
            let score = matvec(&params.weight_w, &params.weight_b);
            let dv = d / m;
            let mut out = vec![0.0; d];
            for head in 0..m {
                let logits = &score[head * l * k..(head + 1) * l * k];
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
                let total: f64 = e.iter().sum();
                let mut acc = vec![0.0; dv];
                for lv in 0..l {
                    for p in 0..k {
                        let slot = (head * l + lv) * k + p;
                        let a = e[lv * k + p] / total;
                        let x = refs.at2(q, 0) + off[2 * slot];
                        let y = refs.at2(q, 1) + off[2 * slot + 1];
                        let v = bilinear_oracle(&maps[lv], x, y);
                        for (j, acc_j) in acc.iter_mut().enumerate() {
                            let proj: f64 = (0..d).map(|c| params.value_proj.at2(head * dv + j, c) * v[c]).sum();
                            *acc_j += a * proj;
                        }
                    }
                }
                for (o, out_o) in out.iter_mut().enumerate() {
                    *out_o += (0..dv).map(|j| params.out_proj.at2(o, head * dv + j) * acc[j]).sum::<f64>();
                }
            }
            for (o, want) in out.iter().enumerate() {
                worst = worst.max((got.value().at2(q, o) - want).abs());
            }
            let w = predict_weights(&params, &z).unwrap();
            for head in 0..m {
                let mass: f64 = w[head * l * k..(head + 1) * l * k].iter().sum();
                worst_mass = worst_mass.max((mass - 1.0).abs());
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-12 && worst_mass <= 1e-12 && counts_ok && secs < 60.0,
        format!(
            "oracle max {worst:.2e} (<= 1e-12), head mass max |1 - sum| {worst_mass:.2e}, reads = M*L*K*4 per query: {counts_ok}; {secs:.1}s (< 60s)"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn leak(store: ParamStore) -> &'static ParamStore {
    Box::leak(Box::new(store))
}

/// Adds noise to every trainable parameter so no layer sits at a special point.
fn jitter(store: &mut ParamStore, r: &mut ChaCha8Rng, std: f64) {
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.kind != ParamKind::Buffer)
        .map(|(n, _)| n.clone())
        .collect();
    for n in names {
        let t = store.tensor(&n).unwrap().clone();
        let noise = Tensor::randn(t.shape(), std, r);
        store.set(&n, t.zip_map(&noise, |a, b| a + b)).unwrap();
    }
}

fn weighted<'g>(g: &'g Graph, y: Var<'g>, w: &Tensor) -> msdetr::Result<Var<'g>> {
    Ok(y.mul(g.constant(w.clone()))?.sum())
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(303);
    let h = 1e-6;
    let mut rows: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, errs: Vec<f64>| rows.push((name, errs.into_iter().fold(0.0, f64::max)));

    record(
        "conv",
        (0..10)
            .map(|i| {
                let groups = if i % 2 == 0 { 1 } else { 2 };
                let spec = ConvSpec {
                    stride: 1 + i % 3 / 2,
                    padding: i % 2,
                    groups,
                };
                let x = Tensor::randn(&[2, 4, 5, 5], 1.0, &mut r);
                let k = Tensor::randn(&[4, 4 / groups, 3, 3], 0.5, &mut r);
                let b = Tensor::randn(&[4], 0.5, &mut r);
                let probe = {
                    let g = Graph::inference();
                    g.constant(x.clone()).conv2d(g.constant(k.clone()), None, spec).unwrap().value().shape().to_vec()
                };
                let w = Tensor::randn(&probe, 1.0, &mut r);
                grad_check_many(
                    |g, v| weighted(g, v[0].conv2d(v[1], Some(v[2]), spec)?, &w),
                    &[x, k, b],
                    h,
                )
                .unwrap()
            })
            .collect(),
    );
    record(
        "batch norm",
        (0..10)
            .map(|_| {
                let x = Tensor::randn(&[3, 4, 3, 3], 1.0, &mut r);
                let gm = Tensor::rand_uniform(&[4], 0.5, 1.5, &mut r);
                let bt = Tensor::randn(&[4], 0.5, &mut r);
                let w = Tensor::randn(&[3, 4, 3, 3], 1.0, &mut r);
                grad_check_many(|g, v| weighted(g, v[0].batch_norm_train(v[1], v[2], 1e-5)?.0, &w), &[x, gm, bt], h)
                    .unwrap()
            })
            .collect(),
    );
    record(
        "bilinear sampling",
        (0..10)
            .map(|_| {
                let shapes = [LevelShape { h: 4, w: 5 }, LevelShape { h: 2, w: 3 }];
                let (m, k, d, nq) = (2, 2, 4, 3);
                let v0 = Tensor::randn(&[20, d], 1.0, &mut r);
                let v1 = Tensor::randn(&[6, d], 1.0, &mut r);
                let loc = Tensor::rand_uniform(&[nq, m * 2 * k * 2], -0.1, 1.1, &mut r);
                let att = Tensor::rand_uniform(&[nq, m * 2 * k], 0.0, 1.0, &mut r);
                let w = Tensor::randn(&[nq, d], 1.0, &mut r);
                grad_check_many(
                    |g, v| weighted(g, ms_deform_sample(&[v[0], v[1]], &shapes, v[2], v[3], m, k)?, &w),
                    &[v0, v1, loc, att],
                    h,
                )
                .unwrap()
            })
            .collect(),
    );
    record(
        "softmax",
        (0..10)
            .map(|_| {
                let x = Tensor::randn(&[4, 6], 2.0, &mut r);
                let w = Tensor::randn(&[4, 6], 1.0, &mut r);
                grad_check_many(|g, v| weighted(g, v[0].softmax_rows()?, &w), &[x], h).unwrap()
            })
            .collect(),
    );
    let shapes = [LevelShape { h: 4, w: 4 }, LevelShape { h: 2, w: 2 }];
    record(
        "self-attention",
        (0..10)
            .map(|_| {
                let mut store = ParamStore::new();
                let layer = SelfAttention::new(&mut Builder { store: &mut store, rng: &mut r }, "sa", 8, 2).unwrap();
                jitter(&mut store, &mut r, 0.1);
                let store = leak(store);
                let x = Tensor::randn(&[5, 8], 1.0, &mut r);
                let w = Tensor::randn(&[5, 8], 1.0, &mut r);
                grad_check_many(|g, v| weighted(g, layer.forward(&Ctx::new(g, store, false), v[0])?, &w), &[x], h)
                    .unwrap()
            })
            .collect(),
    );
    record(
        "deformable attention",
        (0..10)
            .map(|_| {
                let mut store = ParamStore::new();
                let layer =
                    MsDeformAttn::new(&mut Builder { store: &mut store, rng: &mut r }, "ca", 2, 2, 8, &shapes).unwrap();
                jitter(&mut store, &mut r, 0.05);
                let store = leak(store);
                let q = Tensor::randn(&[3, 8], 1.0, &mut r);
                let refs = Tensor::rand_uniform(&[3, 2], 0.2, 0.8, &mut r);
                let f0 = Tensor::randn(&[1, 8, 4, 4], 1.0, &mut r);
                let f1 = Tensor::randn(&[1, 8, 2, 2], 1.0, &mut r);
                let w = Tensor::randn(&[3, 8], 1.0, &mut r);
                grad_check_many(
                    |g, v| {
                        let ctx = Ctx::new(g, store, false);
                        weighted(g, layer.forward_maps(&ctx, v[0], v[1], &[v[2], v[3]])?, &w)
                    },
                    &[q, refs, f0, f1],
                    h,
                )
                .unwrap()
            })
            .collect(),
    );
    record(
        "encoder layer",
        (0..10)
            .map(|_| {
                let mut store = ParamStore::new();
                let layer =
                    EncoderLayer::new(&mut Builder { store: &mut store, rng: &mut r }, "enc", 2, 2, 8, 16, &shapes)
                        .unwrap();
                jitter(&mut store, &mut r, 0.05);
                let store = leak(store);
                let f0 = Tensor::randn(&[1, 8, 4, 4], 1.0, &mut r);
                let f1 = Tensor::randn(&[1, 8, 2, 2], 1.0, &mut r);
                let w0 = Tensor::randn(&[1, 8, 4, 4], 1.0, &mut r);
                let w1 = Tensor::randn(&[1, 8, 2, 2], 1.0, &mut r);
                grad_check_many(
                    |g, v| {
                        let out = layer.forward(&Ctx::new(g, store, false), v)?;
                        weighted(g, out[0], &w0)?.add(weighted(g, out[1], &w1)?)
                    },
                    &[f0, f1],
                    h,
                )
                .unwrap()
            })
            .collect(),
    );
    record(
        "decoder layer",
        (0..10)
            .map(|_| {
                let mut store = ParamStore::new();
                let layer =
                    DecoderLayer::new(&mut Builder { store: &mut store, rng: &mut r }, "dec", 8, 2, 2, 16, &shapes)
                        .unwrap();
                jitter(&mut store, &mut r, 0.05);
                let store = leak(store);
                let x = Tensor::randn(&[3, 8], 1.0, &mut r);
                let refs = Tensor::rand_uniform(&[3, 2], 0.2, 0.8, &mut r);
                let f0 = Tensor::randn(&[1, 8, 4, 4], 1.0, &mut r);
                let f1 = Tensor::randn(&[1, 8, 2, 2], 1.0, &mut r);
                let w = Tensor::randn(&[3, 8], 1.0, &mut r);
                grad_check_many(
                    |g, v| {
                        let ctx = Ctx::new(g, store, false);
                        let (tokens, sh) = tokens_of(&[v[2], v[3]])?;
                        weighted(g, layer.forward(&ctx, v[0], v[1], &tokens, &sh)?, &w)
                    },
                    &[x, refs, f0, f1],
                    h,
                )
                .unwrap()
            })
            .collect(),
    );
    record(
        "GSConv",
        (0..10)
            .map(|_| {
                let mut store = ParamStore::new();
                let layer =
                    GsConv::new(&mut Builder { store: &mut store, rng: &mut r }, "gs", 4, 6, ConvStyle::default())
                        .unwrap();
                jitter(&mut store, &mut r, 0.1);
                let store = leak(store);
                let x = Tensor::randn(&[2, 4, 5, 5], 1.0, &mut r);
                let w = Tensor::randn(&[2, 6, 5, 5], 1.0, &mut r);
                grad_check_many(|g, v| weighted(g, layer.forward(&Ctx::new(g, store, false), v[0])?, &w), &[x], h)
                    .unwrap()
            })
            .collect(),
    );
    record(
        "VoVGSCSP",
        (0..10)
            .map(|_| {
                let mut store = ParamStore::new();
                let layer =
                    VoVGsCsp::new(&mut Builder { store: &mut store, rng: &mut r }, "vov", 8, 2, ConvStyle::default())
                        .unwrap();
                jitter(&mut store, &mut r, 0.1);
                let store = leak(store);
                let x = Tensor::randn(&[1, 8, 4, 4], 1.0, &mut r);
                let w = Tensor::randn(&[1, 8, 4, 4], 1.0, &mut r);
                grad_check_many(|g, v| weighted(g, layer.forward(&Ctx::new(g, store, false), v[0])?, &w), &[x], h)
                    .unwrap()
            })
            .collect(),
    );
    record(
        "channel attention",
        (0..10)
            .map(|_| {
                let mut store = ParamStore::new();
                let layer =
                    ChannelAttention::new(&mut Builder { store: &mut store, rng: &mut r }, "ca", 8, 4).unwrap();
                jitter(&mut store, &mut r, 0.2);
                let store = leak(store);
                let x = Tensor::randn(&[2, 8, 3, 3], 1.0, &mut r);
                let w = Tensor::randn(&[2, 8, 3, 3], 1.0, &mut r);
                grad_check_many(|g, v| weighted(g, layer.forward(&Ctx::new(g, store, false), v[0])?, &w), &[x], h)
                    .unwrap()
            })
            .collect(),
    );
    record(
        "focal loss",
        (0..10)
            .map(|_| {
                let z = Tensor::randn(&[6, 4], 1.5, &mut r);
                let targets: Vec<usize> = (0..6).map(|_| r.random_range(0..4)).collect();
                grad_check_many(|_, v| v[0].focal_loss(&targets, 0.25, 2.0), &[z], h).unwrap()
            })
            .collect(),
    );
    record(
        "GIoU loss",
        (0..10)
            .map(|_| {
                let boxes = |r: &mut ChaCha8Rng| {
                    Tensor::from_fn(&[5, 4], |i| if i % 4 < 2 { r.random_range(0.3..0.7) } else { r.random_range(0.1..0.4) })
                };
                let p = boxes(&mut r);
                let t = boxes(&mut r);
                grad_check_many(|_, v| v[0].giou_loss(&t), &[p], h).unwrap()
            })
            .collect(),
    );
    let secs = t0.elapsed().as_secs_f64();
    let worst = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let listing: Vec<String> = rows.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(
        worst <= 1e-5 && secs < 300.0,
        format!("max rel err {worst:.2e} (<= 1e-5) [{}]; {secs:.1}s (< 300s)", listing.join(", ")),
    )
}

// ---------------------------------------------------------------- 4

fn brute_force_min(cost: &Tensor) -> f64 {
    let (n, m) = cost.dims2().unwrap();
    // Assign every row of the smaller side to a distinct column of the larger.
    let (small, large, at): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) = if n <= m {
        (n, m, Box::new(|i, j| cost.at2(i, j)))
    } else {
        (m, n, Box::new(|i, j| cost.at2(j, i)))
    };
    fn go(i: usize, small: usize, large: usize, used: &mut Vec<bool>, acc: f64, at: &dyn Fn(usize, usize) -> f64) -> f64 {
        if i == small {
            return acc;
        }
        let mut best = f64::INFINITY;
        for j in 0..large {
            if !used[j] {
                used[j] = true;
                best = best.min(go(i + 1, small, large, used, acc + at(i, j), at));
                used[j] = false;
            }
        }
        best
    }
    go(0, small, large, &mut vec![false; large], 0.0, &*at)
}

fn hungarian_optimality() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(404);
    let mut mismatches = 0;
    let mut worst: f64 = 0.0;
    let trials = 300;
    for t in 0..trials {
        let n = r.random_range(1..=7);
        let m = r.random_range(1..=7);
        let cost = if t % 3 == 0 {
            // Integer costs produce ties.
            Tensor::from_fn(&[n, m], |_| r.random_range(0..4) as f64)
        } else {
            Tensor::randn(&[n, m], 3.0, &mut r)
        };
        let a = hungarian(&cost).unwrap();
        let got: f64 = a.pairs.iter().map(|&(i, j)| cost.at2(i, j)).sum();
        let want = brute_force_min(&cost);
        let d = (got - want).abs();
        worst = worst.max(d);
        if d > 1e-9 || a.pairs.len() != n.min(m) {
            mismatches += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && secs < 30.0,
        format!("{trials} matrices up to 7x7, {mismatches} non-optimal (max gap {worst:.1e}); {secs:.1}s (< 30s)"),
    )
}

// ---------------------------------------------------------------- 5

fn giou_geometry() -> Outcome {
    let fixtures = [
        (Xyxy([0.0, 0.0, 1.0, 1.0]), Xyxy([0.0, 0.0, 1.0, 1.0]), 1.0),
        (Xyxy([0.0, 0.0, 1.0, 1.0]), Xyxy([2.0, 0.0, 3.0, 1.0]), -1.0 / 3.0),
        (Xyxy([0.0, 0.0, 1.0, 1.0]), Xyxy([1.0, 0.0, 2.0, 1.0]), 0.0),
    ];
    let fixture_err = fixtures
        .iter()
        .map(|(a, b, want)| (giou(a, b) - want).abs())
        .fold(0.0, f64::max);
    let mut r = rng(505);
    let mut violations = 0;
    let random_box = |r: &mut ChaCha8Rng| {
        let (x, y) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        Xyxy([x, y, x + r.random_range(0.01..2.0), y + r.random_range(0.01..2.0)])
    };
    for _ in 0..10_000 {
        let (a, b) = (random_box(&mut r), random_box(&mut r));
        if giou(&a, &b) > iou(&a, &b) + 1e-15 {
            violations += 1;
        }
    }
    outcome(
        fixture_err <= 1e-12 && violations == 0,
        format!("fixtures max err {fixture_err:.1e} (<= 1e-12); GIoU > IoU in {violations} of 10000 random pairs"),
    )
}

// ---------------------------------------------------------------- 6

fn metrics_oracle() -> Outcome {
    let sb = |score, b: [f64; 4]| ScoredBox {
        class: 0,
        score,
        bbox: Xyxy(b),
    };
    let gt = |b: [f64; 4]| GtBox::new(0, Xyxy(b));
    // Large boxes except the second object of the second image, which is
    // small. The 0.8 detection overlaps its object at IoU 0.86; the 0.5
    // detection duplicates that object exactly.
    let records = vec![
        EvalRecord {
            predictions: vec![sb(0.9, [0.0, 0.0, 0.2, 0.2]), sb(0.6, [0.5, 0.5, 0.7, 0.7])],
            ground_truth: vec![gt([0.0, 0.0, 0.2, 0.2])],
        },
        EvalRecord {
            predictions: vec![sb(0.8, [0.3, 0.3, 0.5, 0.472]), sb(0.5, [0.3, 0.3, 0.5, 0.5])],
            ground_truth: vec![gt([0.3, 0.3, 0.5, 0.5]), gt([0.6, 0.1, 0.63, 0.13])],
        },
        EvalRecord {
            predictions: vec![sb(0.7, [0.1, 0.6, 0.3, 0.8])],
            ground_truth: vec![],
        },
    ];
    // Worked by hand with 101-point interpolation:
    // IoU <= 0.85: TP TP FP FP FP over 3 objects -> 67/101.
    // IoU 0.90, 0.95: TP FP FP FP TP -> (34 + 33 * 0.4) / 101.
    // Large objects only: 1.0 for eight thresholds, (51 + 50 * 0.4) / 101 for two.
    let hi = 67.0 / 101.0;
    let lo = (34.0 + 33.0 * 0.4) / 101.0;
    let want = [hi, (8.0 * hi + 2.0 * lo) / 10.0, 0.0, -1.0, (8.0 + 2.0 * (51.0 + 20.0) / 101.0) / 10.0];
    let rep = map_range(&records, &["crack"]).unwrap();
    let got = [rep.map50, rep.map5095, rep.ap_s, rep.ap_m, rep.ap_l];
    let fixture_err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut cfg = RunConfig::default();
    cfg.data.size = 60;
    let data = gen_dataset(&cfg.data, 606);
    let scenes: Vec<_> = data.all().cloned().collect();
    let perfect = score_predictions(&oracle_predictions(&scenes), &scenes).unwrap();
    let perfect_ok = [perfect.map50, perfect.map5095, perfect.ap_s, perfect.ap_m, perfect.ap_l]
        .iter()
        .chain(perfect.per_class.values())
        .all(|&v| v == 1.0 || v == -1.0)
        && perfect.map50 == 1.0
        && perfect.map5095 == 1.0;

    let mut r = rng(607);
    let mut violations = 0;
    let names = ["a", "b", "c"];
    for _ in 0..100 {
        let recs: Vec<EvalRecord> = (0..r.random_range(1..5))
            .map(|_| {
                let bx = |r: &mut ChaCha8Rng| {
                    let (x, y) = (r.random_range(0.0..0.8), r.random_range(0.0..0.8));
                    Xyxy([x, y, x + r.random_range(0.02..0.2), y + r.random_range(0.02..0.2)])
                };
                let ground_truth: Vec<GtBox> =
                    (0..r.random_range(1..5)).map(|_| GtBox::new(r.random_range(0..3), bx(&mut r))).collect();
                let keep: Vec<bool> = ground_truth.iter().map(|_| r.random_bool(0.7)).collect();
                let mut predictions: Vec<ScoredBox> = ground_truth
                    .iter()
                    .zip(&keep)
                    .filter(|(_, &k)| k)
                    .map(|(g, _)| {
                        let j = r.random_range(-0.02..0.02);
                        ScoredBox {
                            class: g.class,
                            score: r.random_range(0.0..1.0),
                            bbox: Xyxy([g.bbox.0[0] + j, g.bbox.0[1], g.bbox.0[2] + j, g.bbox.0[3]]),
                        }
                    })
                    .collect();
                for _ in 0..r.random_range(0..4) {
                    predictions.push(ScoredBox {
                        class: r.random_range(0..3),
                        score: r.random_range(0.0..1.0),
                        bbox: bx(&mut r),
                    });
                }
                predictions.shuffle(&mut r);
                EvalRecord {
                    predictions,
                    ground_truth,
                }
            })
            .collect();
        let rep = map_range(&recs, &names).unwrap();
        if rep.map5095 > rep.map50 + 1e-12 {
            violations += 1;
        }
    }
    outcome(
        fixture_err <= 1e-12 && perfect_ok && violations == 0,
        format!(
            "hand fixture max err {fixture_err:.1e}; perfect detector all 1.0: {perfect_ok}; mAP50:95 > mAP50 in {violations} of 100 random sets"
        ),
    )
}

// ---------------------------------------------------------------- 7

const DESK_CONFIG: &str = include_str!("../../../configs/desk.toml");

fn desk_training() -> Outcome {
    let cfg = RunConfig::from_toml(DESK_CONFIG).unwrap();
    let data = gen_dataset(&cfg.data, cfg.seed);
    let t0 = Instant::now();
    let run = match train(&cfg, &data, None) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let secs = t0.elapsed().as_secs_f64();
    let best = run.best_log();
    let ratio = run.log[0].loss / best.loss;
    outcome(
        best.val_map50 >= 0.5 && run.log.len() <= 50 && secs <= 1800.0 && ratio >= 5.0,
        format!(
            "{} train images, {} epochs: best val mAP@0.5 {:.3} at epoch {} (>= 0.50); loss {:.3} -> {:.3} = {ratio:.2}x (>= 5x); {:.1} min on {} core(s) (<= 30)",
            data.train.len(),
            run.log.len(),
            best.val_map50,
            run.best_epoch,
            run.log[0].loss,
            best.loss,
            secs / 60.0,
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        ),
    )
}

// ---------------------------------------------------------------- 8

fn ablation_lattice() -> Outcome {
    let mut cfg = RunConfig::from_toml(DESK_CONFIG).unwrap();
    cfg.ablate_epochs = 3;
    let data = gen_dataset(&cfg.data, cfg.seed);
    let rows = match ablate(&cfg, &data) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("ablation failed: {e}")),
    };
    let table = ablation_table(&rows);
    println!("{table}");
    let off = rows.iter().find(|r| !r.rep && !r.da && !r.csff).map(|r| r.val_loss);
    let full = rows.iter().find(|r| r.rep && r.da && r.csff).map(|r| r.val_loss);
    let (Some(off), Some(full)) = (off, full) else {
        return outcome(false, "missing baseline or full row");
    };
    outcome(
        rows.len() == 8 && table.lines().count() == 10 && full <= off,
        format!("{} rows; full val loss {full:.4} vs all-off {off:.4} (full <= all-off)", rows.len()),
    )
}

// ---------------------------------------------------------------- 9

fn efficiency() -> Outcome {
    let cfg = ModelConfig::default();
    let model = Model::build(&cfg, 0).unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    for run in 0..3 {
        let b = bench(&model, cfg.input_size, 20, 100, run).unwrap();
        let faster = b.fused.median_ms < b.unfused.median_ms;
        let fewer = b.fused.flops < b.unfused.flops;
        ok &= faster && fewer;
        lines.push(format!(
            "{:.2} vs {:.2} ms",
            b.fused.median_ms, b.unfused.median_ms
        ));
        if run == 0 {
            lines.push(format!("MFLOPs {:.1} vs {:.1}", b.fused.flops as f64 / 1e6, b.unfused.flops as f64 / 1e6));
        }
    }
    outcome(ok, format!("fused vs unfused median, 3 runs: {}", lines.join("; ")))
}

// ---------------------------------------------------------------- 10

const REPRO_CONFIG: &str = r#"
seed = 21
epochs = 3
batch_size = 4

[data]
size = 24
image_size = 32
max_instances = 4

[model]
levels = 2
d_model = 16
encoder_layers = 1
decoder_layers = 2
heads = 2
points = 2
queries = 8
backbone_widths = [8, 8, 16]
backbone_blocks = [1, 1]
input_size = 32

[paths]
data = "data"
checkpoint = "train/best.msdk"
"#;

fn run_cli(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_msdetr"))
        .args(args)
        .args(["--config", dir.join("run.toml").to_str().unwrap()])
        .env("RUST_LOG", "warn")
        .stdout(std::process::Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn end_to_end(dir: &Path) -> Option<Vec<(String, Vec<u8>)>> {
    fs::write(dir.join("run.toml"), REPRO_CONFIG).ok()?;
    let d = |s: &str| dir.join(s).to_str().unwrap().to_string();
    for (cmd, out) in [("gen", "data"), ("train", "train"), ("eval", "eval"), ("fuse", "fuse")] {
        if !run_cli(dir, &[cmd, "--out", &d(out)]) {
            return None;
        }
    }
    ["eval/metrics.json", "train/best.msdk", "train/last.msdk", "fuse/fused.msdk", "train/train_log.jsonl"]
        .iter()
        .map(|f| Some((f.to_string(), fs::read(dir.join(f)).ok()?)))
        .collect()
}

fn reproducibility() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (Some(ra), Some(rb)) = (end_to_end(a.path()), end_to_end(b.path())) else {
        return outcome(false, "an end-to-end run failed");
    };
    let differing: Vec<&str> = ra
        .iter()
        .zip(&rb)
        .filter(|(x, y)| x.1 != y.1 && !x.0.ends_with(".jsonl"))
        .map(|(x, _)| x.0.as_str())
        .collect();
    outcome(
        differing.is_empty(),
        format!("gen -> train -> eval -> fuse twice: metrics.json and 3 checkpoints identical; differing: {differing:?}"),
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "fusion equivalence", fusion_equivalence),
        (2, "deformable attention oracle", deform_attention_oracle),
        (3, "gradient suite", gradient_suite),
        (4, "Hungarian optimality", hungarian_optimality),
        (5, "GIoU geometry", giou_geometry),
        (6, "metrics oracle", metrics_oracle),
        (7, "desk-scale training", desk_training),
        (8, "ablation lattice", ablation_lattice),
        (9, "fused latency", efficiency),
        (10, "end-to-end reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| f == &id.to_string()) {
            continue;
        }
        let t0 = Instant::now();
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} criterion {id:>2} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    println!("{failed} acceptance criteria failed");
    // Failures are reported above; set ACCEPTANCE_STRICT=1 to also fail the process.
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}
