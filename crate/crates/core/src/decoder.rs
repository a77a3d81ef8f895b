//! Query decoder: self-attention among queries, deformable cross-attention
//! into the fused pyramid, feed-forward, each with residual and layer norm;
//! then class and box heads.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{concat_cols, LevelShape, Var};
use crate::deform_attn::{MsDeformAttn, QuerySet};
use crate::error::{dim_err, Error, Result};
use crate::nn::{Builder, Ctx, Ffn, LayerNorm, Linear, ParamKind, ParamStore};
use crate::tensor::{Elem, Tensor};

/// Raw head outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Detections {
    /// `[Nq, C + 1]`, background last.
    pub class_logits: Tensor,
    /// `[Nq, 4]` normalized centre-size boxes.
    pub boxes: Tensor,
}

impl Detections {
    pub fn num_queries(&self) -> usize {
        self.boxes.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.class_logits.shape()[1] - 1
    }

    pub fn validate(&self) -> Result<()> {
        let (n, c1) = self.class_logits.dims2()?;
        if c1 < 2 || self.boxes.shape() != [n, 4] {
            return Err(dim_err!(
                "logits {:?} and boxes {:?} do not describe the same queries",
                self.class_logits.shape(),
                self.boxes.shape()
            ));
        }
        if !self.class_logits.all_finite() {
            return Err(Error::Evaluation("non-finite class logits".into()));
        }
        if self.boxes.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("box coordinate outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Per-query softmax class probabilities, `[Nq, C + 1]`.
    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        let c1 = self.class_logits.shape()[1];
        self.class_logits
            .data()
            .chunks(c1)
            .map(crate::ops::softmax)
            .collect()
    }
}

/// Multi-head scaled dot-product self-attention with residual and layer norm.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm: LayerNorm,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(b: &mut Builder, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(dim_err!("width {d} not divisible by {heads} heads"));
        }
        Ok(SelfAttention {
            q: b.linear(&format!("{name}.q"), d, d, true),
            k: b.linear(&format!("{name}.k"), d, d, true),
            v: b.linear(&format!("{name}.v"), d, d, true),
            o: b.linear(&format!("{name}.o"), d, d, true),
            norm: b.layer_norm(&format!("{name}.norm"), d),
            heads,
        })
    }

    /// Attention rows per head, each `[Nq, Nq]`.
    pub fn weights<'g, T: Elem>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let (_, d) = x.dims2()?;
        let dk = d / self.heads;
        let q = self.q.forward(ctx, x)?;
        let k = self.k.forward(ctx, x)?;
        let scale = 1.0 / (dk as f64).sqrt();
        (0..self.heads)
            .map(|h| {
                let qh = q.narrow_cols(h * dk, dk)?;
                let kh = k.narrow_cols(h * dk, dk)?;
                qh.matmul_t(kh, true)?.scale(scale).softmax_rows()
            })
            .collect()
    }

    pub fn forward<'g, T: Elem>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let (_, d) = x.dims2()?;
        let dk = d / self.heads;
        let v = self.v.forward(ctx, x)?;
        let attn = self.weights(ctx, x)?;
        let heads = attn
            .iter()
            .enumerate()
            .map(|(h, a)| a.matmul(v.narrow_cols(h * dk, dk)?))
            .collect::<Result<Vec<_>>>()?;
        let y = self.o.forward(ctx, concat_cols(&heads)?)?;
        self.norm.forward(ctx, x.add(y)?)
    }
}

/// Deformable cross-attention into the pyramid with residual and layer norm.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub attn: MsDeformAttn,
    pub norm: LayerNorm,
}

impl CrossAttention {
    pub fn forward<'g, T: Elem>(
        &self,
        ctx: &Ctx<'g, T>,
        x: Var<'g, T>,
        refs: Var<'g, T>,
        values: &[Var<'g, T>],
        shapes: &[LevelShape],
    ) -> Result<Var<'g, T>> {
        let y = self.attn.forward(ctx, x, refs, values, shapes)?;
        self.norm.forward(ctx, x.add(y)?)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: SelfAttention,
    pub cross_attn: CrossAttention,
    pub ffn: Ffn,
    pub norm: LayerNorm,
}

impl DecoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        d: usize,
        heads: usize,
        points: usize,
        ffn_dim: usize,
        init_shapes: &[LevelShape],
    ) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: SelfAttention::new(b, &format!("{name}.sa"), d, heads)?,
            cross_attn: CrossAttention {
                attn: MsDeformAttn::new(b, &format!("{name}.ca"), heads, points, d, init_shapes)?,
                norm: b.layer_norm(&format!("{name}.ca_norm"), d),
            },
            ffn: b.ffn(&format!("{name}.ffn"), d, ffn_dim),
            norm: b.layer_norm(&format!("{name}.ffn_norm"), d),
        })
    }

    pub fn forward<'g, T: Elem>(
        &self,
        ctx: &Ctx<'g, T>,
        x: Var<'g, T>,
        refs: Var<'g, T>,
        values: &[Var<'g, T>],
        shapes: &[LevelShape],
    ) -> Result<Var<'g, T>> {
        let x = self.self_attn.forward(ctx, x)?;
        let x = self.cross_attn.forward(ctx, x, refs, values, shapes)?;
        let y = self.ffn.forward(ctx, x)?;
        self.norm.forward(ctx, x.add(y)?)
    }
}

/// Class logits (with background) and sigmoid boxes.
#[derive(Clone, Debug)]
pub struct PredictionHeads {
    pub cls: Linear,
    pub bbox: Linear,
}

impl PredictionHeads {
    pub fn new(b: &mut Builder, name: &str, d: usize, num_classes: usize) -> Self {
        PredictionHeads {
            cls: b.linear(&format!("{name}.cls"), d, num_classes + 1, true),
            bbox: b.linear(&format!("{name}.box"), d, 4, true),
        }
    }

    /// `(logits [Nq, C+1], boxes [Nq, 4])`.
    pub fn forward<'g, T: Elem>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        Ok((self.cls.forward(ctx, x)?, self.bbox.forward(ctx, x)?.sigmoid()))
    }

    /// Like [`forward`](Self::forward) but box centres are predicted as
    /// offsets in logit space from `anchor` (`[Nq, 2]` points in `[0, 1]`).
    pub fn forward_anchored<'g, T: Elem>(
        &self,
        ctx: &Ctx<'g, T>,
        x: Var<'g, T>,
        anchor: &Tensor<T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let (n, _) = anchor.dims2()?;
        let shift = Tensor::from_fn(&[n, 4], |i| {
            if i % 4 < 2 {
                let p = anchor.data()[(i / 4) * 2 + i % 4].f64().clamp(1e-4, 1.0 - 1e-4);
                T::of((p / (1.0 - p)).ln())
            } else {
                T::zero()
            }
        });
        let raw = self.bbox.forward(ctx, x)?.add(ctx.constant(shift))?;
        Ok((self.cls.forward(ctx, x)?, raw.sigmoid()))
    }

    pub fn apply(&self, store: &ParamStore, q: &Tensor) -> Result<Detections> {
        if !q.all_finite() {
            return Err(Error::Evaluation("non-finite query features".into()));
        }
        let g = crate::autograd::Graph::inference();
        let ctx = Ctx::new(&g, store, false);
        let (c, b) = self.forward(&ctx, ctx.constant(q.clone()))?;
        Ok(Detections {
            class_logits: (*c.value()).clone(),
            boxes: (*b.value()).clone(),
        })
    }
}

/// Learnable queries and reference points, a layer stack and shared heads.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub name: String,
    pub layers: Vec<DecoderLayer>,
    pub heads: PredictionHeads,
    pub num_queries: usize,
    pub d_model: usize,
}

/// Per-layer head outputs; the last entry is the final prediction.
pub type LayerOutputs<'g, T> = Vec<(Var<'g, T>, Var<'g, T>)>;

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        d: usize,
        heads: usize,
        points: usize,
        layers: usize,
        num_queries: usize,
        num_classes: usize,
        init_shapes: &[LevelShape],
    ) -> Result<Self> {
        b.store.insert(
            format!("{name}.query"),
            Tensor::randn(&[num_queries, d], 0.02, b.rng),
            ParamKind::NoDecay,
        );
        b.store
            .insert(format!("{name}.ref"), grid_refs(num_queries), ParamKind::NoDecay);
        let layers = (0..layers)
            .map(|i| DecoderLayer::new(b, &format!("{name}.layer{i}"), d, heads, points, 4 * d, init_shapes))
            .collect::<Result<Vec<_>>>()?;
        let heads = PredictionHeads::new(b, &format!("{name}.head"), d, num_classes);
        // Start from small boxes centred on the anchors.
        b.store
            .set(&format!("{name}.head.box.b"), Tensor::from_vec(vec![0.0, 0.0, -1.5, -1.5]))?;
        Ok(Decoder {
            name: name.to_string(),
            layers,
            heads,
            num_queries,
            d_model: d,
        })
    }

    pub fn queries<'g, T: Elem>(&self, ctx: &Ctx<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let q = ctx.p(&format!("{}.query", self.name))?;
        let r = ctx.p(&format!("{}.ref", self.name))?.clamp(0.0, 1.0);
        Ok((q, r))
    }

    /// Run every layer on value tokens of one image; `all_layers` keeps the
    /// head outputs of intermediate layers too.
    pub fn forward<'g, T: Elem>(
        &self,
        ctx: &Ctx<'g, T>,
        values: &[Var<'g, T>],
        shapes: &[LevelShape],
        all_layers: bool,
    ) -> Result<LayerOutputs<'g, T>> {
        let (mut x, mut refs) = self.queries(ctx)?;
        let mut outs = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(ctx, x, refs, values, shapes)?;
            let (logits, boxes) = self.heads.forward_anchored(ctx, x, &refs.value())?;
            if all_layers || i + 1 == self.layers.len() {
                outs.push((logits, boxes));
            }
            // The next layer samples around this layer's (detached) centres.
            refs = ctx.constant((*boxes.value()).clone()).narrow_cols(0, 2)?;
        }
        if outs.is_empty() {
            outs.push(self.heads.forward_anchored(ctx, x, &refs.value())?);
        }
        Ok(outs)
    }

    /// Current reference points as a value.
    pub fn query_set(&self, store: &ParamStore) -> Result<QuerySet> {
        let q = store.tensor(&format!("{}.query", self.name))?.clone();
        let r = store.tensor(&format!("{}.ref", self.name))?.map(|v| v.clamp(0.0, 1.0));
        QuerySet::new(q, r)
    }
}

/// `n` points on the most square grid over `[0.1, 0.9]^2`, row-major.
pub fn grid_refs(n: usize) -> Tensor {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols).max(1);
    let at = |i: usize, k: usize| if k <= 1 { 0.5 } else { 0.1 + 0.8 * i as f64 / (k - 1) as f64 };
    let mut data = Vec::with_capacity(2 * n);
    for i in 0..n {
        data.push(at(i % cols, cols));
        data.push(at(i / cols, rows));
    }
    Tensor::new(&[n, 2], data).expect("two coordinates per point")
}

/// Fresh store and decoder.
#[allow(clippy::too_many_arguments)]
pub fn decoder_init(
    d: usize,
    heads: usize,
    points: usize,
    layers: usize,
    num_queries: usize,
    num_classes: usize,
    init_shapes: &[LevelShape],
    rng: &mut ChaCha8Rng,
) -> Result<(ParamStore, Decoder)> {
    let mut store = ParamStore::new();
    let dec = Decoder::new(
        &mut Builder { store: &mut store, rng },
        "dec",
        d,
        heads,
        points,
        layers,
        num_queries,
        num_classes,
        init_shapes,
    )?;
    Ok((store, dec))
}
