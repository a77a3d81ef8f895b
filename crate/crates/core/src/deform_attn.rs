//! Deformable attention: each query reads a handful of bilinear samples per
//! head and level around its reference point, at offsets and with weights
//! predicted from the query itself.
//!
//! Offsets are in normalized image units. A level's samples are read at the
//! same normalized point, mapped into that level's own pixel grid.

use std::f64::consts::TAU;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{concat0, ms_deform_sample, LevelShape, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::{eval_with, Builder, Ctx, Ffn, LayerNorm, ParamKind, ParamStore};
use crate::tensor::{Elem, Tensor};

/// Parameters of one deformable attention module as plain tensors.
///
/// Projections follow the `y = x W^T` convention. Head `m` owns rows
/// `m*dv..(m+1)*dv` of `value_proj` and columns `m*dv..(m+1)*dv` of
/// `out_proj`. Offset and weight heads are laid out head-major, then level,
/// then point (then x, y for offsets).
#[derive(Clone, Debug, PartialEq)]
pub struct DeformAttnParams {
    pub m_heads: usize,
    pub k_points: usize,
    pub l_levels: usize,
    pub d_model: usize,
    pub value_proj: Tensor,
    pub out_proj: Tensor,
    pub offset_w: Tensor,
    pub offset_b: Tensor,
    pub weight_w: Tensor,
    pub weight_b: Tensor,
}

/// Query embeddings `[Nq, d]` with reference points `[Nq, 2]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub embeddings: Tensor,
    pub ref_points: Tensor,
}

impl QuerySet {
    pub fn new(embeddings: Tensor, ref_points: Tensor) -> Result<QuerySet> {
        let (n, _) = embeddings.dims2()?;
        if ref_points.shape() != [n, 2] {
            return Err(dim_err!(
                "{n} queries need [{n}, 2] reference points, got {:?}",
                ref_points.shape()
            ));
        }
        if let Some(v) = ref_points.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("reference coordinate {v} outside [0, 1]")));
        }
        Ok(QuerySet {
            embeddings,
            ref_points,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl DeformAttnParams {
    /// Projections Xavier-initialised, weight head zero (uniform attention),
    /// offset head zero-weight with a bias placing each head's points on a
    /// one-pixel ring around the reference at every level.
    pub fn init(
        m_heads: usize,
        k_points: usize,
        d_model: usize,
        init_shapes: &[LevelShape],
        rng: &mut ChaCha8Rng,
    ) -> Result<DeformAttnParams> {
        let mut store = ParamStore::new();
        let layer = MsDeformAttn::new(
            &mut Builder { store: &mut store, rng },
            "a",
            m_heads,
            k_points,
            d_model,
            init_shapes,
        )?;
        layer.params(&store)
    }

    pub fn d_value(&self) -> usize {
        self.d_model / self.m_heads
    }

    /// Flat index of head `m`, level `l`, point `k`.
    pub fn slot(&self, m: usize, l: usize, k: usize) -> usize {
        (m * self.l_levels + l) * self.k_points + k
    }

    pub fn slots(&self) -> usize {
        self.m_heads * self.l_levels * self.k_points
    }

    pub fn validate(&self) -> Result<()> {
        let (m, k, l, d) = (self.m_heads, self.k_points, self.l_levels, self.d_model);
        if m == 0 || k == 0 || l == 0 || d == 0 {
            return Err(Error::Config("heads, points, levels and width must be positive".into()));
        }
        if d % m != 0 {
            return Err(dim_err!("width {d} is not divisible by {m} heads"));
        }
        let s = m * l * k;
        for (t, want, what) in [
            (&self.value_proj, vec![d, d], "value_proj"),
            (&self.out_proj, vec![d, d], "out_proj"),
            (&self.offset_w, vec![2 * s, d], "offset_w"),
            (&self.offset_b, vec![2 * s], "offset_b"),
            (&self.weight_w, vec![s, d], "weight_w"),
            (&self.weight_b, vec![s], "weight_b"),
        ] {
            if t.shape() != want.as_slice() {
                return Err(dim_err!("{what} has shape {:?}, expected {want:?}", t.shape()));
            }
        }
        Ok(())
    }

    /// Identity value/output projections, zero offsets and zero scores.
    pub fn identity(m_heads: usize, k_points: usize, l_levels: usize, d_model: usize) -> DeformAttnParams {
        let s = m_heads * l_levels * k_points;
        let eye = Tensor::from_fn(&[d_model, d_model], |i| {
            if i / d_model == i % d_model {
                1.0
            } else {
                0.0
            }
        });
        DeformAttnParams {
            m_heads,
            k_points,
            l_levels,
            d_model,
            value_proj: eye.clone(),
            out_proj: eye,
            offset_w: Tensor::zeros(&[2 * s, d_model]),
            offset_b: Tensor::zeros(&[2 * s]),
            weight_w: Tensor::zeros(&[s, d_model]),
            weight_b: Tensor::zeros(&[s]),
        }
    }

    fn store(&self) -> Result<(ParamStore, MsDeformAttn)> {
        self.validate()?;
        let mut store = ParamStore::new();
        let n = "a";
        store.insert(format!("{n}.value.w"), self.value_proj.clone(), ParamKind::Weight);
        store.insert(format!("{n}.out.w"), self.out_proj.clone(), ParamKind::Weight);
        store.insert(format!("{n}.offset.w"), self.offset_w.clone(), ParamKind::Weight);
        store.insert(format!("{n}.offset.b"), self.offset_b.clone(), ParamKind::NoDecay);
        store.insert(format!("{n}.weight.w"), self.weight_w.clone(), ParamKind::Weight);
        store.insert(format!("{n}.weight.b"), self.weight_b.clone(), ParamKind::NoDecay);
        let layer = MsDeformAttn {
            name: n.into(),
            m_heads: self.m_heads,
            k_points: self.k_points,
            l_levels: self.l_levels,
            d_model: self.d_model,
        };
        Ok((store, layer))
    }
}

fn query_row(params: &DeformAttnParams, z: &[f64]) -> Result<Tensor> {
    if z.len() != params.d_model {
        return Err(dim_err!("query has width {}, model width is {}", z.len(), params.d_model));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("query contains non-finite values".into()));
    }
    Ok(Tensor::new(&[1, z.len()], z.to_vec())?)
}

/// Sampling offsets for one query, indexed by [`DeformAttnParams::slot`].
pub fn predict_offsets(params: &DeformAttnParams, z: &[f64]) -> Result<Vec<[f64; 2]>> {
    let (store, layer) = params.store()?;
    let q = query_row(params, z)?;
    let t = eval_with(&store, |ctx| layer.offsets(ctx, ctx.constant(q)))?;
    Ok(t.data().chunks(2).map(|c| [c[0], c[1]]).collect())
}

/// Attention weights for one query, normalized per head over levels and
/// points, indexed by [`DeformAttnParams::slot`].
pub fn predict_weights(params: &DeformAttnParams, z: &[f64]) -> Result<Vec<f64>> {
    let (store, layer) = params.store()?;
    let q = query_row(params, z)?;
    Ok(eval_with(&store, |ctx| layer.weights(ctx, ctx.constant(q)))?.into_data())
}

/// Single-scale deformable attention over a `[1, d, H, W]` map.
pub fn deform_attn(params: &DeformAttnParams, z: &[f64], reference: [f64; 2], x_feat: &Tensor) -> Result<Vec<f64>> {
    if params.l_levels != 1 {
        return Err(Error::Config(format!(
            "single-scale attention needs one level, parameters have {}",
            params.l_levels
        )));
    }
    ms_deform_attn(params, z, reference, std::slice::from_ref(x_feat))
}

/// Multi-scale deformable attention over `[1, d, H_l, W_l]` maps.
pub fn ms_deform_attn(params: &DeformAttnParams, z: &[f64], reference: [f64; 2], levels: &[Tensor]) -> Result<Vec<f64>> {
    let (store, layer) = params.store()?;
    let q = query_row(params, z)?;
    let r = Tensor::new(&[1, 2], reference.to_vec())?;
    Ok(eval_with(&store, |ctx| {
        let maps: Vec<Var> = levels.iter().map(|t| ctx.constant(t.clone())).collect();
        layer.forward_maps(ctx, ctx.constant(q), ctx.constant(r), &maps)
    })?
    .into_data())
}

/// In-model deformable attention reading `{name}.value.w`, `{name}.out.w`,
/// `{name}.offset.{w,b}`, `{name}.weight.{w,b}`.
#[derive(Clone, Debug)]
pub struct MsDeformAttn {
    pub name: String,
    pub m_heads: usize,
    pub k_points: usize,
    pub l_levels: usize,
    pub d_model: usize,
}

impl MsDeformAttn {
    pub fn new(
        b: &mut Builder,
        name: &str,
        m_heads: usize,
        k_points: usize,
        d_model: usize,
        init_shapes: &[LevelShape],
    ) -> Result<MsDeformAttn> {
        let l_levels = init_shapes.len();
        if m_heads == 0 || k_points == 0 || l_levels == 0 || d_model % m_heads.max(1) != 0 {
            return Err(Error::Config(format!(
                "bad attention geometry: d = {d_model}, M = {m_heads}, K = {k_points}, L = {l_levels}"
            )));
        }
        let s = m_heads * l_levels * k_points;
        b.linear(&format!("{name}.value"), d_model, d_model, false);
        b.linear(&format!("{name}.out"), d_model, d_model, false);
        b.store
            .insert(format!("{name}.offset.w"), Tensor::zeros(&[2 * s, d_model]), ParamKind::Weight);
        let mut bias = Vec::with_capacity(2 * s);
        for m in 0..m_heads {
            for shape in init_shapes {
                for k in 0..k_points {
                    let theta = TAU * (k as f64 / k_points as f64 + m as f64 / (m_heads * k_points) as f64);
                    bias.push(theta.cos() / shape.w as f64);
                    bias.push(theta.sin() / shape.h as f64);
                }
            }
        }
        b.store
            .insert(format!("{name}.offset.b"), Tensor::from_vec(bias), ParamKind::NoDecay);
        b.store
            .insert(format!("{name}.weight.w"), Tensor::zeros(&[s, d_model]), ParamKind::Weight);
        b.store
            .insert(format!("{name}.weight.b"), Tensor::zeros(&[s]), ParamKind::NoDecay);
        Ok(MsDeformAttn {
            name: name.to_string(),
            m_heads,
            k_points,
            l_levels,
            d_model,
        })
    }

    /// Copy this layer's tensors out of `store`.
    pub fn params(&self, store: &ParamStore) -> Result<DeformAttnParams> {
        let t = |s: &str| -> Result<Tensor> { Ok(store.tensor(&format!("{}.{s}", self.name))?.clone()) };
        Ok(DeformAttnParams {
            m_heads: self.m_heads,
            k_points: self.k_points,
            l_levels: self.l_levels,
            d_model: self.d_model,
            value_proj: t("value.w")?,
            out_proj: t("out.w")?,
            offset_w: t("offset.w")?,
            offset_b: t("offset.b")?,
            weight_w: t("weight.w")?,
            weight_b: t("weight.b")?,
        })
    }

    fn p<'g, T: Elem>(&self, ctx: &Ctx<'g, T>, s: &str) -> Result<Var<'g, T>> {
        ctx.p(&format!("{}.{s}", self.name))
    }

    /// `[Nq, d] -> [Nq, 2*M*L*K]` offsets.
    pub fn offsets<'g, T: Elem>(&self, ctx: &Ctx<'g, T>, q: Var<'g, T>) -> Result<Var<'g, T>> {
        q.linear(self.p(ctx, "offset.w")?, Some(self.p(ctx, "offset.b")?))
    }

    /// `[Nq, d] -> [Nq, M*L*K]` weights, softmax per head.
    pub fn weights<'g, T: Elem>(&self, ctx: &Ctx<'g, T>, q: Var<'g, T>) -> Result<Var<'g, T>> {
        q.linear(self.p(ctx, "weight.w")?, Some(self.p(ctx, "weight.b")?))?
            .softmax_groups(self.l_levels * self.k_points)
    }

    /// Attention over value tokens `[H_l W_l, d]` (not yet projected).
    pub fn forward<'g, T: Elem>(
        &self,
        ctx: &Ctx<'g, T>,
        q: Var<'g, T>,
        refs: Var<'g, T>,
        values: &[Var<'g, T>],
        shapes: &[LevelShape],
    ) -> Result<Var<'g, T>> {
        if values.len() != self.l_levels || shapes.len() != self.l_levels {
            return Err(dim_err!(
                "attention configured for {} levels, got {} maps",
                self.l_levels,
                values.len()
            ));
        }
        let (_, d) = q.dims2()?;
        if d != self.d_model {
            return Err(dim_err!("query width {d}, attention width {}", self.d_model));
        }
        let vw = self.p(ctx, "value.w")?;
        let projected = values
            .iter()
            .map(|v| v.linear(vw, None))
            .collect::<Result<Vec<_>>>()?;
        let loc = self.offsets(ctx, q)?.add_ref_points(refs)?;
        let w = self.weights(ctx, q)?;
        let agg = ms_deform_sample(&projected, shapes, loc, w, self.m_heads, self.k_points)?;
        agg.linear(self.p(ctx, "out.w")?, None)
    }

    /// Attention over `[1, d, H_l, W_l]` maps.
    pub fn forward_maps<'g, T: Elem>(
        &self,
        ctx: &Ctx<'g, T>,
        q: Var<'g, T>,
        refs: Var<'g, T>,
        maps: &[Var<'g, T>],
    ) -> Result<Var<'g, T>> {
        let (tokens, shapes) = tokens_of(maps)?;
        self.forward(ctx, q, refs, &tokens, &shapes)
    }
}

/// Token matrices and shapes of `[1, C, H, W]` maps.
pub fn tokens_of<'g, T: Elem>(maps: &[Var<'g, T>]) -> Result<(Vec<Var<'g, T>>, Vec<LevelShape>)> {
    let mut tokens = Vec::with_capacity(maps.len());
    let mut shapes = Vec::with_capacity(maps.len());
    for m in maps {
        let (_, _, h, w) = m.dims4()?;
        tokens.push(m.to_tokens()?);
        shapes.push(LevelShape { h, w });
    }
    Ok((tokens, shapes))
}

/// Pixel-centre positions of every location of every level, `[sum HW, 2]`.
pub fn grid_reference_points<T: Elem>(shapes: &[LevelShape]) -> Tensor<T> {
    let mut data = Vec::new();
    for s in shapes {
        for y in 0..s.h {
            for x in 0..s.w {
                data.push(T::of((x as f64 + 0.5) / s.w as f64));
                data.push(T::of((y as f64 + 0.5) / s.h as f64));
            }
        }
    }
    let n = data.len() / 2;
    Tensor::new(&[n, 2], data).expect("two coordinates per point")
}

/// Encoder layer: every location of every level queries the pyramid with its
/// own position as reference; residual + layer norm, then feed-forward +
/// residual + layer norm.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MsDeformAttn,
    pub norm1: LayerNorm,
    pub ffn: Ffn,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(
        b: &mut Builder,
        name: &str,
        m_heads: usize,
        k_points: usize,
        d_model: usize,
        ffn_dim: usize,
        init_shapes: &[LevelShape],
    ) -> Result<EncoderLayer> {
        Ok(EncoderLayer {
            attn: MsDeformAttn::new(b, &format!("{name}.attn"), m_heads, k_points, d_model, init_shapes)?,
            norm1: b.layer_norm(&format!("{name}.norm1"), d_model),
            ffn: b.ffn(&format!("{name}.ffn"), d_model, ffn_dim),
            norm2: b.layer_norm(&format!("{name}.norm2"), d_model),
        })
    }

    /// `features[l]` is `[1, d, H_l, W_l]`; output has the same shapes.
    pub fn forward<'g, T: Elem>(&self, ctx: &Ctx<'g, T>, features: &[Var<'g, T>]) -> Result<Vec<Var<'g, T>>> {
        let (tokens, shapes) = tokens_of(features)?;
        let all = concat0(&tokens)?;
        let refs = ctx.constant(grid_reference_points(&shapes));
        let a = self.attn.forward(ctx, all, refs, &tokens, &shapes)?;
        let x = self.norm1.forward(ctx, all.add(a)?)?;
        let y = self.norm2.forward(ctx, x.add(self.ffn.forward(ctx, x)?)?)?;
        let mut out = Vec::with_capacity(shapes.len());
        let mut start = 0;
        for s in &shapes {
            let n = s.h * s.w;
            out.push(y.narrow0(start, n)?.from_tokens(s.h, s.w)?);
            start += n;
        }
        Ok(out)
    }

    /// Run the layer on concrete maps with parameters from `store`.
    pub fn apply(&self, store: &ParamStore, features: &[Tensor]) -> Result<Vec<Tensor>> {
        let g = crate::autograd::Graph::inference();
        let ctx = Ctx::new(&g, store, false);
        let maps: Vec<Var> = features.iter().map(|t| ctx.constant(t.clone())).collect();
        let out = self.forward(&ctx, &maps)?;
        Ok(out.iter().map(|v| (*v.value()).clone()).collect())
    }
}

/// Build an encoder layer with fresh parameters in a new store.
pub fn encoder_layer_init(
    m_heads: usize,
    k_points: usize,
    d_model: usize,
    ffn_dim: usize,
    init_shapes: &[LevelShape],
    rng: &mut ChaCha8Rng,
) -> Result<(ParamStore, EncoderLayer)> {
    let mut store = ParamStore::new();
    let layer = EncoderLayer::new(
        &mut Builder { store: &mut store, rng },
        "enc",
        m_heads,
        k_points,
        d_model,
        ffn_dim,
        init_shapes,
    )?;
    Ok((store, layer))
}
