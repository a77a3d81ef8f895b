//! The full detector: backbone, encoder, fusion neck and query decoder, with
//! switches for the re-parameterizable backbone (`rep`), the deformable
//! encoder (`da`) and the cross-scale fusion neck (`csff`).

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, TensorEntry, MAGIC};
pub use optim::{lr_at, AdamW, AdamWConfig, Schedule};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{concat_batch, ConvSpec, Graph, LevelShape, Var};
use crate::decoder::{Decoder, Detections, LayerOutputs};
use crate::deform_attn::{tokens_of, EncoderLayer};
use crate::error::{dim_err, Error, Result};
use crate::fusion::{ConvStyle, FusionNeck, NeckVariant};
use crate::matching::{hungarian, loss_var, match_cost, FocalParams, GroundTruth, LossBreakdown, LossWeights};
use crate::nn::{Act, Builder, ConvUnit, Ctx, ParamKind, ParamStore};
use crate::reparam::RepConv;
use crate::tensor::{Elem, Tensor};

/// Architecture hyper-parameters and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub levels: usize,
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub points: usize,
    pub queries: usize,
    pub num_classes: usize,
    pub rep: bool,
    pub da: bool,
    pub csff: bool,
    /// Stem width followed by one width per level.
    pub backbone_widths: Vec<usize>,
    /// Extra stride-1 blocks after each stage's downsampling block.
    pub backbone_blocks: Vec<usize>,
    /// Side of the square training input; sets the initial sampling ring.
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 3,
            d_model: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            points: 4,
            queries: 30,
            num_classes: 5,
            rep: true,
            da: true,
            csff: true,
            backbone_widths: vec![32, 64, 64, 64],
            backbone_blocks: vec![1, 1, 1],
            input_size: 128,
        }
    }
}

impl ModelConfig {
    /// Every toggle off.
    pub fn baseline() -> Self {
        ModelConfig {
            rep: false,
            da: false,
            csff: false,
            ..Self::default()
        }
    }

    pub fn with_toggles(mut self, rep: bool, da: bool, csff: bool) -> Self {
        self.rep = rep;
        self.da = da;
        self.csff = csff;
        self
    }

    /// Input sides must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("levels", self.levels),
            ("d_model", self.d_model),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("heads", self.heads),
            ("points", self.points),
            ("queries", self.queries),
            ("num_classes", self.num_classes),
            ("input_size", self.input_size),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be at least 1"));
            }
        }
        if self.heads > 0 && self.d_model % self.heads != 0 {
            bad.push(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.levels > 8 {
            bad.push(format!("levels {} is more than 8", self.levels));
        }
        if self.backbone_widths.len() != self.levels + 1 {
            bad.push(format!(
                "backbone_widths needs {} entries (stem + one per level), has {}",
                self.levels + 1,
                self.backbone_widths.len()
            ));
        }
        if self.backbone_widths.contains(&0) {
            bad.push("backbone_widths entries must be at least 1".into());
        }
        if self.backbone_blocks.len() != self.levels {
            bad.push(format!(
                "backbone_blocks needs {} entries, has {}",
                self.levels,
                self.backbone_blocks.len()
            ));
        }
        if self.levels <= 8 && self.input_size % self.divisor() != 0 {
            bad.push(format!("input_size {} not divisible by {}", self.input_size, self.divisor()));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    fn level_shapes(&self, h: usize, w: usize) -> Vec<LevelShape> {
        (0..self.levels)
            .map(|l| {
                let s = 4 << l;
                LevelShape { h: h / s, w: w / s }
            })
            .collect()
    }
}

/// A backbone block: re-parameterizable or plain conv-BN-SiLU.
#[derive(Clone, Debug)]
pub enum ConvBlock {
    Rep(RepConv),
    Plain(ConvUnit),
}

impl ConvBlock {
    fn new(b: &mut Builder, rep: bool, name: &str, cin: usize, cout: usize, stride: usize) -> ConvBlock {
        if rep {
            ConvBlock::Rep(RepConv::new(b.store, b.rng, name, cin, cout, stride))
        } else {
            ConvBlock::Plain(b.conv_unit(name, cin, cout, 3, ConvSpec::new(stride, 1), true, Act::Silu))
        }
    }

    fn forward<'g, T: Elem>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        match self {
            ConvBlock::Rep(r) => r.forward(ctx, x),
            ConvBlock::Plain(c) => c.forward(ctx, x),
        }
    }
}

/// Stride-2 stem, then one stage per level, each opening with a stride-2 block.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: ConvBlock,
    pub stages: Vec<Vec<ConvBlock>>,
}

impl Backbone {
    fn new(b: &mut Builder, cfg: &ModelConfig) -> Backbone {
        let w = &cfg.backbone_widths;
        let stem = ConvBlock::new(b, cfg.rep, "backbone.stem", 3, w[0], 2);
        let stages = (0..cfg.levels)
            .map(|l| {
                (0..=cfg.backbone_blocks[l])
                    .map(|i| {
                        let name = format!("backbone.stage{l}.block{i}");
                        if i == 0 {
                            ConvBlock::new(b, cfg.rep, &name, w[l], w[l + 1], 2)
                        } else {
                            ConvBlock::new(b, cfg.rep, &name, w[l + 1], w[l + 1], 1)
                        }
                    })
                    .collect()
            })
            .collect();
        Backbone { stem, stages }
    }

    pub fn forward<'g, T: Elem>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let mut x = self.stem.forward(ctx, x)?;
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for block in stage {
                x = block.forward(ctx, x)?;
            }
            out.push(x);
        }
        Ok(out)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ConvBlock> {
        std::iter::once(&self.stem).chain(self.stages.iter().flatten())
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ConvBlock> {
        std::iter::once(&mut self.stem).chain(self.stages.iter_mut().flatten())
    }

    /// Number of re-parameterizable blocks (fused or not).
    pub fn rep_blocks(&self) -> usize {
        self.blocks().filter(|b| matches!(b, ConvBlock::Rep(_))).count()
    }
}

/// Deformable attention over the pyramid, or per-level residual convolutions.
#[derive(Clone, Debug)]
pub enum Encoder {
    Deformable(Vec<EncoderLayer>),
    Conv(Vec<Vec<ConvUnit>>),
}

/// Fixed 2-D sine/cosine position code, `[1, d, h, w]`.
pub fn sine_position<T: Elem>(d: usize, h: usize, w: usize) -> Tensor<T> {
    let half = d / 2;
    Tensor::from_fn(&[1, d, h, w], |i| {
        let c = i / (h * w);
        let (y, x) = ((i / w) % h, i % w);
        let (pos, j, n) = if c < half {
            ((y as f64 + 0.5) / h as f64, c, half.max(1))
        } else {
            ((x as f64 + 0.5) / w as f64, c - half, (d - half).max(1))
        };
        let freq = 10000f64.powf((2 * (j / 2)) as f64 / n as f64);
        let a = pos * std::f64::consts::TAU / freq;
        T::of(if j % 2 == 0 { a.sin() } else { a.cos() })
    })
}

/// Training-loss options.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub focal: FocalParams,
    /// Also supervise the heads after every intermediate decoder layer.
    pub aux: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            weights: LossWeights::default(),
            focal: FocalParams::default(),
            aux: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub lateral: Vec<ConvUnit>,
    pub encoder: Encoder,
    pub neck: FusionNeck,
    pub decoder: Decoder,
}

impl Model {
    /// Fresh model with weights drawn from `seed`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let d = cfg.d_model;
        let shapes = cfg.level_shapes(cfg.input_size, cfg.input_size);
        let backbone = Backbone::new(&mut b, cfg);
        let lateral = (0..cfg.levels)
            .map(|l| {
                b.conv_unit(
                    &format!("lateral{l}"),
                    cfg.backbone_widths[l + 1],
                    d,
                    1,
                    ConvSpec::new(1, 0),
                    true,
                    Act::Identity,
                )
            })
            .collect();
        let encoder = if cfg.da {
            for l in 0..cfg.levels {
                b.store
                    .insert(format!("encoder.level{l}"), Tensor::randn(&[d], 0.02, b.rng), ParamKind::NoDecay);
            }
            Encoder::Deformable(
                (0..cfg.encoder_layers)
                    .map(|i| EncoderLayer::new(&mut b, &format!("encoder.layer{i}"), cfg.heads, cfg.points, d, 4 * d, &shapes))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            Encoder::Conv(
                (0..cfg.encoder_layers)
                    .map(|i| {
                        (0..cfg.levels)
                            .map(|l| {
                                b.conv_unit(
                                    &format!("encoder.layer{i}.conv{l}"),
                                    d,
                                    d,
                                    3,
                                    ConvSpec::new(1, 1),
                                    true,
                                    Act::Silu,
                                )
                            })
                            .collect()
                    })
                    .collect(),
            )
        };
        let variant = if cfg.csff { NeckVariant::full() } else { NeckVariant::plain() };
        let neck = FusionNeck::new(&mut b, "neck", d, cfg.levels, ConvStyle::default(), variant, cfg.csff)?;
        let decoder = Decoder::new(
            &mut b,
            "decoder",
            d,
            cfg.heads,
            cfg.points,
            cfg.decoder_layers,
            cfg.queries,
            cfg.num_classes,
            &shapes,
        )?;
        Ok(Model {
            config: cfg.clone(),
            store,
            backbone,
            lateral,
            encoder,
            neck,
            decoder,
        })
    }

    pub fn is_fused(&self) -> bool {
        self.backbone
            .blocks()
            .any(|b| matches!(b, ConvBlock::Rep(r) if r.fused))
    }

    /// Trainable parameter count.
    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let k = self.config.divisor();
        match *shape {
            [b, 3, h, w] if b > 0 && h > 0 && w > 0 && h % k == 0 && w % k == 0 => Ok(()),
            [_, 3, h, w] => Err(dim_err!("image side {h}x{w} must be a positive multiple of {k} (axes 2 and 3)")),
            _ => Err(dim_err!("images must be [B, 3, H, W], got {shape:?}")),
        }
    }

    /// Graph-level forward; one entry per image.
    pub fn forward_graph<'g, T: Elem>(
        &self,
        ctx: &Ctx<'g, T>,
        images: Var<'g, T>,
        all_layers: bool,
    ) -> Result<Vec<LayerOutputs<'g, T>>> {
        self.check_input(&images.shape())?;
        let (batch, ..) = images.dims4()?;
        let feats = self.backbone.forward(ctx, images)?;
        let mut levels = feats
            .into_iter()
            .zip(&self.lateral)
            .map(|(f, p)| p.forward(ctx, f))
            .collect::<Result<Vec<_>>>()?;
        match &self.encoder {
            Encoder::Deformable(layers) => {
                let mut per_image = Vec::with_capacity(batch);
                for i in 0..batch {
                    let mut maps = Vec::with_capacity(levels.len());
                    for (l, f) in levels.iter().enumerate() {
                        let x = f.narrow_batch(i, 1)?;
                        let (_, d, h, w) = x.dims4()?;
                        let lvl = ctx.p(&format!("encoder.level{l}"))?;
                        let x = x
                            .add(ctx.constant(sine_position(d, h, w)))?
                            .channel_affine(ctx.constant(Tensor::ones(&[d])), lvl)?;
                        maps.push(x);
                    }
                    for layer in layers {
                        maps = layer.forward(ctx, &maps)?;
                    }
                    per_image.push(maps);
                }
                levels = (0..levels.len())
                    .map(|l| concat_batch(&per_image.iter().map(|m| m[l]).collect::<Vec<_>>()))
                    .collect::<Result<Vec<_>>>()?;
            }
            Encoder::Conv(layers) => {
                for layer in layers {
                    levels = levels
                        .iter()
                        .zip(layer)
                        .map(|(x, c)| x.add(c.forward(ctx, *x)?))
                        .collect::<Result<Vec<_>>>()?;
                }
            }
        }
        let fused = self.neck.forward(ctx, &levels)?;
        (0..batch)
            .map(|i| {
                let maps = fused.iter().map(|f| f.narrow_batch(i, 1)).collect::<Result<Vec<_>>>()?;
                let (tokens, shapes) = tokens_of(&maps)?;
                self.decoder.forward(ctx, &tokens, &shapes, all_layers)
            })
            .collect()
    }

    /// Inference-mode detections for a batch of images.
    pub fn forward(&self, images: &Tensor) -> Result<Vec<Detections>> {
        Ok(forward_store(self, &self.store, images)?
            .into_iter()
            .map(|(class_logits, boxes)| Detections { class_logits, boxes })
            .collect())
    }

    /// Floating-point operations of one inference pass on a `[1, 3, h, w]` input.
    pub fn flops(&self, h: usize, w: usize) -> Result<u64> {
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &self.store, false);
        self.forward_graph(&ctx, g.constant(Tensor::zeros(&[1, 3, h, w])), false)?;
        Ok(g.flops())
    }

    /// Collapse every re-parameterizable block into a single 3x3 convolution.
    pub fn fuse(&self) -> Result<Model> {
        let mut m = self.clone();
        let Model { backbone, store, .. } = &mut m;
        for block in backbone.blocks_mut() {
            if let ConvBlock::Rep(r) = block {
                r.fuse_in_place(store)?;
            }
        }
        Ok(m)
    }

    /// Differentiable training loss of a batch (mean over images).
    pub fn loss<'g>(
        &self,
        ctx: &Ctx<'g, f64>,
        images: Var<'g, f64>,
        targets: &[GroundTruth],
        opts: &LossOptions,
    ) -> Result<(Var<'g, f64>, LossBreakdown)> {
        let (batch, ..) = images.dims4()?;
        if targets.len() != batch {
            return Err(dim_err!("{batch} images but {} target sets", targets.len()));
        }
        for t in targets {
            t.validate(self.config.num_classes)?;
        }
        let outs = self.forward_graph(ctx, images, opts.aux)?;
        let mut total: Option<Var<'g, f64>> = None;
        let mut br = LossBreakdown::default();
        for (layers, gt) in outs.iter().zip(targets) {
            for (k, &(logits, boxes)) in layers.iter().enumerate() {
                let det = Detections {
                    class_logits: (*logits.value()).clone(),
                    boxes: (*boxes.value()).clone(),
                };
                let assignment = hungarian(&match_cost(&det, gt, opts.weights)?)?;
                let (l, b) = loss_var(logits, boxes, gt, &assignment, opts.weights, opts.focal)?;
                total = Some(match total {
                    Some(t) => t.add(l)?,
                    None => l,
                });
                if k + 1 == layers.len() {
                    br.total += b.total;
                    br.cls += b.cls;
                    br.l1 += b.l1;
                    br.giou += b.giou;
                }
            }
        }
        let n = batch as f64;
        let total = total.ok_or_else(|| Error::State("empty batch".into()))?.scale(1.0 / n);
        br.total /= n;
        br.cls /= n;
        br.l1 /= n;
        br.giou /= n;
        Ok((total, br))
    }

    /// Value of the training loss without updating anything.
    pub fn eval_loss(&self, images: &Tensor, targets: &[GroundTruth], opts: &LossOptions) -> Result<LossBreakdown> {
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &self.store, false);
        Ok(self.loss(&ctx, g.constant(images.clone()), targets, opts)?.1)
    }

    /// One optimizer step on a batch; batch-norm running statistics are
    /// updated with momentum 0.1. Returns the loss before the step.
    pub fn train_step(
        &mut self,
        opt: &mut AdamW,
        lr: f64,
        images: &Tensor,
        targets: &[GroundTruth],
        opts: &LossOptions,
    ) -> Result<LossBreakdown> {
        let (grads, bn, br) = {
            let g = Graph::new();
            let ctx = Ctx::new(&g, &self.store, true);
            let (loss, br) = self.loss(&ctx, g.constant(images.clone()), targets, opts)?;
            if !br.total.is_finite() {
                return Err(Error::Evaluation("loss is not finite".into()));
            }
            let grads = g.backward(loss);
            (ctx.param_grads(&grads), ctx.take_bn_updates(), br)
        };
        opt.step(&mut self.store, grads, lr)?;
        for (prefix, stats) in bn {
            for (key, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                let name = format!("{prefix}.{key}");
                let old = self.store.tensor(&name)?;
                let new = Tensor::from_fn(old.shape(), |i| 0.9 * old.data()[i] + 0.1 * batch[i]);
                self.store.set(&name, new)?;
            }
        }
        Ok(br)
    }
}

/// Inference pass with parameters from `store` (any precision): `(logits, boxes)` per image.
pub fn forward_store<T: Elem>(model: &Model, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    model.check_input(images.shape())?;
    let g = Graph::inference();
    let ctx = Ctx::new(&g, store, false);
    let outs = model.forward_graph(&ctx, g.constant(images.clone()), false)?;
    Ok(outs
        .into_iter()
        .map(|layers| {
            let (c, b) = *layers.last().expect("decoder emits at least one output");
            ((*c.value()).clone(), (*b.value()).clone())
        })
        .collect())
}

#[cfg(test)]
mod tests;
