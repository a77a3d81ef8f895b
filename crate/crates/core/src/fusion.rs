//! Cross-scale feature fusion: a top-down pass that pushes coarse semantics
//! into finer levels, a bottom-up pass that pushes detail back up, channel
//! attention gates, and the GSConv / VoVGSCSP blocks used as lightweight
//! fusion convolutions.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{concat_channels, ConvSpec, Graph, Var};
use crate::error::{dim_err, Result};
use crate::nn::{Act, Builder, ConvUnit, Ctx, Linear, ParamStore};
use crate::tensor::{Elem, Tensor};

/// Pyramid levels, finest first, each `[B, C, H_l, W_l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleFeatures {
    pub levels: Vec<Tensor>,
}

impl MultiScaleFeatures {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        check_pyramid_shapes(&levels.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>())?;
        Ok(MultiScaleFeatures { levels })
    }
}

fn check_pyramid_shapes(shapes: &[Vec<usize>]) -> Result<()> {
    let Some(first) = shapes.first() else {
        return Err(dim_err!("pyramid has no levels"));
    };
    if first.len() != 4 {
        return Err(dim_err!("pyramid levels must be rank 4, got {first:?}"));
    }
    for (l, pair) in shapes.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        if b.len() != 4 || a[0] != b[0] || a[1] != b[1] {
            return Err(dim_err!("level {} shape {b:?} incompatible with level {l} shape {a:?}", l + 1));
        }
        if a[2] != 2 * b[2] || a[3] != 2 * b[3] {
            return Err(dim_err!(
                "levels {l} and {} are not dyadic: {}x{} vs {}x{}",
                l + 1,
                a[2],
                a[3],
                b[2],
                b[3]
            ));
        }
    }
    Ok(())
}

fn check_pyramid<T: Elem>(levels: &[Var<'_, T>]) -> Result<()> {
    check_pyramid_shapes(&levels.iter().map(|v| v.shape()).collect::<Vec<_>>())
}

/// Normalization and activation used by every convolution in the neck.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvStyle {
    pub bn: bool,
    pub act: Act,
}

impl Default for ConvStyle {
    fn default() -> Self {
        ConvStyle {
            bn: true,
            act: Act::Silu,
        }
    }
}

impl ConvStyle {
    /// Plain biased convolution without normalization or activation.
    pub fn linear() -> Self {
        ConvStyle {
            bn: false,
            act: Act::Identity,
        }
    }
}

fn conv(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, spec: ConvSpec, s: ConvStyle) -> ConvUnit {
    b.conv_unit(name, cin, cout, k, spec, s.bn, s.act)
}

/// Squeeze-and-excitation style gate: `x * sigmoid(fc2(relu(fc1(gap(x)))))`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Hidden width of the gate: `C / r`, with `r` capped at `C`.
pub fn attention_hidden(channels: usize, reduction: usize) -> Result<usize> {
    let r = reduction.min(channels).max(1);
    if channels == 0 || channels % r != 0 {
        return Err(dim_err!("{channels} channels not divisible by reduction {r}"));
    }
    Ok(channels / r)
}

impl ChannelAttention {
    pub fn new(b: &mut Builder, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = attention_hidden(channels, reduction)?;
        Ok(ChannelAttention {
            fc1: b.linear(&format!("{name}.fc1"), channels, hidden, true),
            fc2: b.linear(&format!("{name}.fc2"), hidden, channels, true),
        })
    }

    pub fn gate<'g, T: Elem>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.global_avg_pool()?;
        let h = self.fc1.forward(ctx, s)?.relu();
        Ok(self.fc2.forward(ctx, h)?.sigmoid())
    }

    pub fn forward<'g, T: Elem>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = self.gate(ctx, x)?;
        x.mul_channel_gate(g)
    }
}

/// Pointwise conv to half the output width, depthwise 3x3 on that, concat,
/// two-group channel shuffle.
#[derive(Clone, Debug)]
pub struct GsConv {
    pub cv1: ConvUnit,
    pub dw: ConvUnit,
    pub out_channels: usize,
}

impl GsConv {
    pub fn new(b: &mut Builder, name: &str, cin: usize, out_channels: usize, style: ConvStyle) -> Result<Self> {
        if out_channels == 0 || out_channels % 2 != 0 {
            return Err(dim_err!("GSConv output width must be even, got {out_channels}"));
        }
        let half = out_channels / 2;
        Ok(GsConv {
            cv1: conv(b, &format!("{name}.cv1"), cin, half, 1, ConvSpec::new(1, 0), style),
            dw: conv(b, &format!("{name}.dw"), half, half, 3, ConvSpec::depthwise(1, 1, half), style),
            out_channels,
        })
    }

    pub fn forward<'g, T: Elem>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.cv1.forward(ctx, x)?;
        let d = self.dw.forward(ctx, h)?;
        concat_channels(&[h, d])?.channel_shuffle(2)
    }
}

/// Analytic parameter count of a GSConv (weights and per-channel affine terms).
pub fn gsconv_params(cin: usize, cout: usize, style: ConvStyle) -> usize {
    let half = cout / 2;
    let per_channel = if style.bn { 2 } else { 1 };
    cin * half + half * 9 + 2 * half * per_channel
}

/// Analytic parameter count of a dense `k x k` convolution.
pub fn conv_params(cin: usize, cout: usize, k: usize, style: ConvStyle) -> usize {
    let per_channel = if style.bn { 2 } else { 1 };
    cin * cout * k * k + cout * per_channel
}

/// Split channels in half, run the second half through a chain of GSConvs,
/// concat with the first half, project back with a 1x1 conv.
#[derive(Clone, Debug)]
pub struct VoVGsCsp {
    pub blocks: Vec<GsConv>,
    pub proj: ConvUnit,
    pub channels: usize,
}

impl VoVGsCsp {
    pub fn new(b: &mut Builder, name: &str, channels: usize, n_blocks: usize, style: ConvStyle) -> Result<Self> {
        if channels == 0 || channels % 2 != 0 {
            return Err(dim_err!("VoVGSCSP width must be even, got {channels}"));
        }
        if n_blocks == 0 {
            return Err(crate::Error::Config("VoVGSCSP needs at least one block".into()));
        }
        let half = channels / 2;
        let blocks = (0..n_blocks)
            .map(|i| GsConv::new(b, &format!("{name}.gs{i}"), half, half, style))
            .collect::<Result<Vec<_>>>()?;
        Ok(VoVGsCsp {
            blocks,
            proj: conv(b, &format!("{name}.proj"), channels, channels, 1, ConvSpec::new(1, 0), style),
            channels,
        })
    }

    pub fn forward<'g, T: Elem>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let (_, c, ..) = x.dims4()?;
        if c != self.channels {
            return Err(dim_err!("VoVGSCSP expects {} channels (axis 1), got {c}", self.channels));
        }
        let half = c / 2;
        let x1 = x.narrow_channels(0, half)?;
        let mut r = x.narrow_channels(half, half)?;
        for blk in &self.blocks {
            r = blk.forward(ctx, r)?;
        }
        self.proj.forward(ctx, concat_channels(&[x1, r])?)
    }
}

/// Which substitutions the neck uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeckVariant {
    /// VoVGSCSP in place of the pathway fusion convolutions.
    pub vov: bool,
    /// Channel attention on every fused level.
    pub attention: bool,
    pub n_blocks: usize,
    pub reduction: usize,
}

impl NeckVariant {
    pub fn plain() -> Self {
        NeckVariant {
            vov: false,
            attention: false,
            n_blocks: 2,
            reduction: 16,
        }
    }

    pub fn full() -> Self {
        NeckVariant {
            vov: true,
            attention: true,
            ..Self::plain()
        }
    }
}

#[derive(Clone, Debug)]
pub enum FusionBody {
    Conv(ConvUnit),
    Vov(VoVGsCsp),
}

/// The convolution applied after two levels are summed, plus optional gate.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub body: FusionBody,
    pub attn: Option<ChannelAttention>,
}

impl FusionBlock {
    fn new(b: &mut Builder, name: &str, c: usize, style: ConvStyle, v: NeckVariant) -> Result<Self> {
        let body = if v.vov {
            FusionBody::Vov(VoVGsCsp::new(b, &format!("{name}.vov"), c, v.n_blocks, style)?)
        } else {
            FusionBody::Conv(conv(b, &format!("{name}.conv"), c, c, 3, ConvSpec::new(1, 1), style))
        };
        let attn = if v.attention {
            Some(ChannelAttention::new(b, &format!("{name}.ca"), c, v.reduction)?)
        } else {
            None
        };
        Ok(FusionBlock { body, attn })
    }

    pub fn forward<'g, T: Elem>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = match &self.body {
            FusionBody::Conv(c) => c.forward(ctx, x)?,
            FusionBody::Vov(v) => v.forward(ctx, x)?,
        };
        match &self.attn {
            Some(a) => a.forward(ctx, y),
            None => Ok(y),
        }
    }
}

/// `P_L = conv1x1(F_L)`, `P_l = fuse(F_l + up2(P_{l+1}))`.
#[derive(Clone, Debug)]
pub struct TopDown {
    pub top: ConvUnit,
    /// `fuse[l]` produces level `l`, for `l < L - 1`.
    pub fuse: Vec<FusionBlock>,
}

impl TopDown {
    pub fn new(b: &mut Builder, name: &str, c: usize, levels: usize, style: ConvStyle, v: NeckVariant) -> Result<Self> {
        let top = conv(b, &format!("{name}.top"), c, c, 1, ConvSpec::new(1, 0), style);
        let fuse = (0..levels.saturating_sub(1))
            .map(|l| FusionBlock::new(b, &format!("{name}.fuse{l}"), c, style, v))
            .collect::<Result<Vec<_>>>()?;
        Ok(TopDown { top, fuse })
    }

    pub fn forward<'g, T: Elem>(&self, ctx: &Ctx<'g, T>, f: &[Var<'g, T>]) -> Result<Vec<Var<'g, T>>> {
        check_pyramid(f)?;
        if f.len() != self.fuse.len() + 1 {
            return Err(dim_err!("top-down built for {} levels, got {}", self.fuse.len() + 1, f.len()));
        }
        let n = f.len();
        let mut out = vec![self.top.forward(ctx, f[n - 1])?];
        for l in (0..n - 1).rev() {
            let up = out.last().expect("non-empty").upsample2x()?;
            out.push(self.fuse[l].forward(ctx, f[l].add(up)?)?);
        }
        out.reverse();
        Ok(out)
    }
}

/// `P_1 = P_1^td`, `P_l = fuse(P_l^td + down(P_{l-1}))` with a strided 3x3 down.
#[derive(Clone, Debug)]
pub struct BottomUp {
    /// `down[i]` and `fuse[i]` produce level `i + 1`.
    pub down: Vec<ConvUnit>,
    pub fuse: Vec<FusionBlock>,
}

impl BottomUp {
    pub fn new(b: &mut Builder, name: &str, c: usize, levels: usize, style: ConvStyle, v: NeckVariant) -> Result<Self> {
        let mut down = Vec::new();
        let mut fuse = Vec::new();
        for l in 1..levels {
            down.push(conv(b, &format!("{name}.down{l}"), c, c, 3, ConvSpec::new(2, 1), style));
            fuse.push(FusionBlock::new(b, &format!("{name}.fuse{l}"), c, style, v)?);
        }
        Ok(BottomUp { down, fuse })
    }

    pub fn forward<'g, T: Elem>(&self, ctx: &Ctx<'g, T>, td: &[Var<'g, T>]) -> Result<Vec<Var<'g, T>>> {
        check_pyramid(td)?;
        if td.len() != self.fuse.len() + 1 {
            return Err(dim_err!("bottom-up built for {} levels, got {}", self.fuse.len() + 1, td.len()));
        }
        let mut out = vec![td[0]];
        for l in 1..td.len() {
            let d = self.down[l - 1].forward(ctx, out[l - 1])?;
            out.push(self.fuse[l - 1].forward(ctx, td[l].add(d)?)?);
        }
        Ok(out)
    }
}

/// Top-down, then (optionally) bottom-up.
#[derive(Clone, Debug)]
pub struct FusionNeck {
    pub td: TopDown,
    pub bu: Option<BottomUp>,
}

impl FusionNeck {
    pub fn new(
        b: &mut Builder,
        name: &str,
        c: usize,
        levels: usize,
        style: ConvStyle,
        v: NeckVariant,
        bottom_up: bool,
    ) -> Result<Self> {
        let td = TopDown::new(b, &format!("{name}.td"), c, levels, style, v)?;
        let bu = if bottom_up {
            Some(BottomUp::new(b, &format!("{name}.bu"), c, levels, style, v)?)
        } else {
            None
        };
        Ok(FusionNeck { td, bu })
    }

    pub fn forward<'g, T: Elem>(&self, ctx: &Ctx<'g, T>, f: &[Var<'g, T>]) -> Result<Vec<Var<'g, T>>> {
        let td = self.td.forward(ctx, f)?;
        match &self.bu {
            Some(bu) => bu.forward(ctx, &td),
            None => Ok(td),
        }
    }

    /// Run on concrete tensors with parameters from `store`.
    pub fn apply(&self, store: &ParamStore, f: &MultiScaleFeatures) -> Result<MultiScaleFeatures> {
        apply_pyramid(store, &f.levels, |ctx, v| self.forward(ctx, v))
    }
}

/// Evaluate a pyramid-to-pyramid function on concrete tensors in inference mode.
pub fn apply_pyramid<F>(store: &ParamStore, levels: &[Tensor], f: F) -> Result<MultiScaleFeatures>
where
    F: for<'g> FnOnce(&Ctx<'g, f64>, &[Var<'g, f64>]) -> Result<Vec<Var<'g, f64>>>,
{
    let g = Graph::inference();
    let ctx = Ctx::new(&g, store, false);
    let vars: Vec<Var> = levels.iter().map(|t| ctx.constant(t.clone())).collect();
    let out = f(&ctx, &vars)?;
    Ok(MultiScaleFeatures {
        levels: out.iter().map(|v| (*v.value()).clone()).collect(),
    })
}

/// Fresh store and neck with the given geometry.
pub fn neck_init(
    c: usize,
    levels: usize,
    style: ConvStyle,
    v: NeckVariant,
    bottom_up: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(ParamStore, FusionNeck)> {
    let mut store = ParamStore::new();
    let neck = FusionNeck::new(&mut Builder { store: &mut store, rng }, "neck", c, levels, style, v, bottom_up)?;
    Ok((store, neck))
}
