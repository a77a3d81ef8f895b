//! Re-parameterizable 3x3 blocks: a 3x3 branch, a 1x1 branch and (when the
//! shape allows) an identity branch, each with its own batch norm, summed and
//! passed through SiLU. After training the three branches collapse into one
//! 3x3 convolution with bias.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvSpec, Var};
use crate::error::{dim_err, Result};
use crate::nn::{batch_norm, bn_params, eval_with, insert_bn, Ctx, ParamKind, ParamStore};
use crate::ops::{conv2d, fold_bn, BnParams};
use crate::tensor::{Elem, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct RepBlock {
    pub w3: Tensor,
    pub w1: Tensor,
    pub has_identity: bool,
    pub bn3: BnParams,
    pub bn1: BnParams,
    pub bnid: Option<BnParams>,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedBlock {
    pub w: Tensor,
    pub b: Vec<f64>,
    pub stride: usize,
}

impl RepBlock {
    /// Checks shapes and the identity-branch rule.
    pub fn validate(&self) -> Result<(usize, usize)> {
        let (co, ci, kh, kw) = self.w3.dims4()?;
        if (kh, kw) != (3, 3) {
            return Err(dim_err!("w3 must be 3x3, got {kh}x{kw}"));
        }
        let (co1, ci1, ..) = self.w1.dims4()?;
        if (co1, ci1) != (co, ci) {
            return Err(dim_err!("w1 is {co1}x{ci1}, w3 is {co}x{ci}"));
        }
        expand_1x1(&self.w1)?;
        if self.stride != 1 && self.stride != 2 {
            return Err(crate::Error::Domain(format!("stride must be 1 or 2, got {}", self.stride)));
        }
        if self.has_identity != self.bnid.is_some() {
            return Err(crate::Error::Domain("identity flag and identity batch norm disagree".into()));
        }
        if self.has_identity && (ci != co || self.stride != 1) {
            return Err(crate::Error::Domain(format!(
                "identity branch needs in = out and stride 1, got {ci} -> {co} at stride {}",
                self.stride
            )));
        }
        for bn in [Some(&self.bn3), Some(&self.bn1), self.bnid.as_ref()].into_iter().flatten() {
            bn.validate()?;
            if bn.channels() != co {
                return Err(dim_err!("batch norm has {} channels, block outputs {co}", bn.channels()));
            }
        }
        Ok((ci, co))
    }

    /// Random block with non-trivial batch norm statistics.
    pub fn random(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> RepBlock {
        let has_identity = cin == cout && stride == 1;
        let bn = |rng: &mut ChaCha8Rng| BnParams {
            gamma: (0..cout).map(|_| rng.random_range(0.5..1.5)).collect(),
            beta: (0..cout).map(|_| rng.random_range(-0.5..0.5)).collect(),
            mu: (0..cout).map(|_| rng.random_range(-0.5..0.5)).collect(),
            sigma2: (0..cout).map(|_| rng.random_range(0.5..2.0)).collect(),
            eps: crate::ops::BN_EPS,
        };
        RepBlock {
            w3: Tensor::randn(&[cout, cin, 3, 3], 0.3, rng),
            w1: Tensor::randn(&[cout, cin, 1, 1], 0.3, rng),
            has_identity,
            bn3: bn(rng),
            bn1: bn(rng),
            bnid: if has_identity { Some(bn(rng)) } else { None },
            stride,
        }
    }

    /// Store holding this block under `name`, plus the layer that reads it.
    pub fn to_store(&self, name: &str) -> Result<(ParamStore, RepConv)> {
        let (ci, co) = self.validate()?;
        let mut store = ParamStore::new();
        store.insert(format!("{name}.w3"), self.w3.clone(), ParamKind::Weight);
        insert_bn(&mut store, &format!("{name}.bn3"), &self.bn3);
        store.insert(format!("{name}.w1"), self.w1.clone(), ParamKind::Weight);
        insert_bn(&mut store, &format!("{name}.bn1"), &self.bn1);
        if let Some(bn) = &self.bnid {
            insert_bn(&mut store, &format!("{name}.bnid"), bn);
        }
        let layer = RepConv {
            name: name.to_string(),
            cin: ci,
            cout: co,
            stride: self.stride,
            has_identity: self.has_identity,
            fused: false,
        };
        Ok((store, layer))
    }

    /// Analytic FLOPs of the three-branch forward on an `h x w` input.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (co, ci, ..) = self.w3.dims4().unwrap_or((0, 0, 0, 0));
        let ho = (h + 2 - 3) / self.stride + 1;
        let wo = (w + 2 - 3) / self.stride + 1;
        let px = (ho * wo) as u64;
        let (co, ci) = (co as u64, ci as u64);
        let branches = if self.has_identity { 3 } else { 2 };
        // convs, per-branch affine, branch sums, activation
        2 * co * ci * 9 * px + 2 * co * ci * px + branches * 2 * co * px + (branches - 1) * co * px + 4 * co * px
    }
}

impl FusedBlock {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = Tensor::from_vec(self.b.clone());
        let y = conv2d(x, &self.w, Some(&b), self.stride, 1)?;
        Ok(y.map(|v| v / (1.0 + (-v).exp())))
    }

    /// Analytic FLOPs of the fused forward on an `h x w` input.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (co, ci, ..) = self.w.dims4().unwrap_or((0, 0, 0, 0));
        let ho = (h + 2 - 3) / self.stride + 1;
        let wo = (w + 2 - 3) / self.stride + 1;
        let px = (ho * wo) as u64;
        let (co, ci) = (co as u64, ci as u64);
        2 * co * ci * 9 * px + co * px + 4 * co * px
    }

    /// The same map written as a single-branch block whose batch norm has
    /// unit scale and carries the bias as its shift.
    pub fn as_rep_block(&self) -> Result<RepBlock> {
        let (co, ci, ..) = self.w.dims4()?;
        let eps = crate::ops::BN_EPS;
        let carry = BnParams {
            gamma: vec![(1.0 + eps).sqrt(); co],
            beta: self.b.clone(),
            mu: vec![0.0; co],
            sigma2: vec![1.0; co],
            eps,
        };
        Ok(RepBlock {
            w3: self.w.clone(),
            w1: Tensor::zeros(&[co, ci, 1, 1]),
            has_identity: false,
            bn3: carry,
            bn1: BnParams::identity(co),
            bnid: None,
            stride: self.stride,
        })
    }
}

/// Three-branch forward with each branch normalized by its own parameters.
pub fn rep_forward_train(block: &RepBlock, x: &Tensor) -> Result<Tensor> {
    let (store, layer) = block.to_store("rep")?;
    eval_with(&store, |ctx| layer.forward(ctx, ctx.constant(x.clone())))
}

/// Zero-pad a 1x1 kernel to 3x3 with the weight at the center tap.
pub fn expand_1x1(w1: &Tensor) -> Result<Tensor> {
    let (co, ci, kh, kw) = w1.dims4()?;
    if (kh, kw) != (1, 1) {
        return Err(dim_err!("expand_1x1 needs a 1x1 kernel, got {kh}x{kw}"));
    }
    let mut out = Tensor::zeros(&[co, ci, 3, 3]);
    for (i, &v) in w1.data().iter().enumerate() {
        out.data_mut()[i * 9 + 4] = v;
    }
    Ok(out)
}

/// 3x3 kernel whose convolution (padding 1, stride 1) is the identity.
pub fn identity_kernel(channels: usize) -> Tensor {
    let mut k = Tensor::zeros(&[channels, channels, 3, 3]);
    for c in 0..channels {
        k.data_mut()[(c * channels + c) * 9 + 4] = 1.0;
    }
    k
}

pub fn fuse(block: &RepBlock) -> Result<FusedBlock> {
    let (_, co) = block.validate()?;
    let zero = vec![0.0; co];
    let (mut w, mut b) = fold_bn(&block.w3, &zero, &block.bn3)?;
    let mut add = |(k, kb): (Tensor, Vec<f64>)| {
        w.add_assign(&k);
        b.iter_mut().zip(kb).for_each(|(x, y)| *x += y);
    };
    add(fold_bn(&expand_1x1(&block.w1)?, &zero, &block.bn1)?);
    if let Some(bnid) = &block.bnid {
        add(fold_bn(&identity_kernel(co), &zero, bnid)?);
    }
    Ok(FusedBlock {
        w,
        b,
        stride: block.stride,
    })
}

/// In-model re-parameterizable convolution, reading its parameters by name.
///
/// Unfused: `{name}.w3`, `{name}.w1` and batch norms `{name}.bn3`,
/// `{name}.bn1`, `{name}.bnid`. Fused: `{name}.w`, `{name}.b`.
#[derive(Clone, Debug)]
pub struct RepConv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub has_identity: bool,
    pub fused: bool,
}

impl RepConv {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, stride: usize) -> RepConv {
        let has_identity = cin == cout && stride == 1;
        store.insert(
            format!("{name}.w3"),
            Tensor::randn(&[cout, cin, 3, 3], (2.0 / (9 * cin) as f64).sqrt(), rng),
            ParamKind::Weight,
        );
        insert_bn(store, &format!("{name}.bn3"), &BnParams::identity(cout));
        store.insert(
            format!("{name}.w1"),
            Tensor::randn(&[cout, cin, 1, 1], (2.0 / cin as f64).sqrt(), rng),
            ParamKind::Weight,
        );
        insert_bn(store, &format!("{name}.bn1"), &BnParams::identity(cout));
        if has_identity {
            insert_bn(store, &format!("{name}.bnid"), &BnParams::identity(cout));
        }
        RepConv {
            name: name.to_string(),
            cin,
            cout,
            stride,
            has_identity,
            fused: false,
        }
    }

    pub fn forward<'g, T: Elem>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let (_, c, ..) = x.dims4()?;
        if c != self.cin {
            return Err(dim_err!("{}: input has {c} channels, block expects {} (axis 1)", self.name, self.cin));
        }
        let n = &self.name;
        if self.fused {
            let w = ctx.p(&format!("{n}.w"))?;
            let b = ctx.p(&format!("{n}.b"))?;
            return Ok(x.conv2d(w, Some(b), ConvSpec::new(self.stride, 1))?.silu());
        }
        let y3 = x.conv2d(ctx.p(&format!("{n}.w3"))?, None, ConvSpec::new(self.stride, 1))?;
        let y3 = batch_norm(ctx, &format!("{n}.bn3"), y3)?;
        let y1 = x.conv2d(ctx.p(&format!("{n}.w1"))?, None, ConvSpec::new(self.stride, 0))?;
        let y1 = batch_norm(ctx, &format!("{n}.bn1"), y1)?;
        let mut y = y3.add(y1)?;
        if self.has_identity {
            y = y.add(batch_norm(ctx, &format!("{n}.bnid"), x)?)?;
        }
        Ok(y.silu())
    }

    /// Read the unfused branches back out as a value object.
    pub fn block(&self, store: &ParamStore) -> Result<RepBlock> {
        let n = &self.name;
        Ok(RepBlock {
            w3: store.tensor(&format!("{n}.w3"))?.clone(),
            w1: store.tensor(&format!("{n}.w1"))?.clone(),
            has_identity: self.has_identity,
            bn3: bn_params(store, &format!("{n}.bn3"))?,
            bn1: bn_params(store, &format!("{n}.bn1"))?,
            bnid: if self.has_identity {
                Some(bn_params(store, &format!("{n}.bnid"))?)
            } else {
                None
            },
            stride: self.stride,
        })
    }

    /// Replace the branch parameters in `store` with the merged kernel.
    pub fn fuse_in_place(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.fused {
            return Ok(());
        }
        let fused = fuse(&self.block(store)?)?;
        let n = self.name.clone();
        for part in ["w3", "w1", "bn3.", "bn1.", "bnid."] {
            store.remove_prefix(&format!("{n}.{part}"));
        }
        store.insert(format!("{n}.w"), fused.w, ParamKind::Weight);
        store.insert(format!("{n}.b"), Tensor::from_vec(fused.b), ParamKind::NoDecay);
        self.fused = true;
        Ok(())
    }
}
