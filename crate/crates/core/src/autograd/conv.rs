//! 2-D cross-correlation via im2col and GEMM, with grouped (depthwise) support.

use std::sync::Arc;

use super::Var;
use crate::error::{dim_err, Result};
use crate::tensor::{gemm, Elem, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn depthwise(stride: usize, padding: usize, channels: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            groups: channels,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Geom {
    fn cig(&self) -> usize {
        self.ci / self.groups
    }
    fn cog(&self) -> usize {
        self.co / self.groups
    }
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
    fn flops(&self) -> u64 {
        2 * (self.b * self.co * self.ho * self.wo * self.cig() * self.kh * self.kw) as u64
    }
}

fn geometry(x: &[usize], k: &[usize], spec: ConvSpec) -> Result<Geom> {
    let [b, ci, h, w] = x[..] else {
        return Err(dim_err!("conv2d input must be rank 4, got {:?}", x));
    };
    let [co, cig, kh, kw] = k[..] else {
        return Err(dim_err!("conv2d kernel must be rank 4, got {:?}", k));
    };
    if spec.stride == 0 {
        return Err(dim_err!("conv2d stride must be >= 1"));
    }
    if spec.groups == 0 || ci % spec.groups != 0 || co % spec.groups != 0 {
        return Err(dim_err!(
            "conv2d groups {} must divide input channels {ci} and output channels {co}",
            spec.groups
        ));
    }
    if cig != ci / spec.groups {
        return Err(dim_err!(
            "conv2d channel mismatch: input channels (axis 1) = {ci} but kernel in-channels (axis 1) = {cig} with {} groups",
            spec.groups
        ));
    }
    if h + 2 * spec.padding < kh || w + 2 * spec.padding < kw {
        return Err(dim_err!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{} (height/width axes)",
            h + 2 * spec.padding,
            w + 2 * spec.padding
        ));
    }
    let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
    let wo = (w + 2 * spec.padding - kw) / spec.stride + 1;
    Ok(Geom {
        b,
        ci,
        h,
        w,
        co,
        kh,
        kw,
        ho,
        wo,
        stride: spec.stride,
        pad: spec.padding,
        groups: spec.groups,
    })
}

/// Unroll channels `c0..c0+cn` of one image into `[cn*kh*kw, ho*wo]`.
fn im2col<T: Elem>(img: &[T], g: &Geom, c0: usize, cn: usize, col: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..cn {
        let plane = &img[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the transpose of [`im2col`].
fn col2im<T: Elem>(col: &[T], g: &Geom, c0: usize, cn: usize, img: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..cn {
        let plane = &mut img[(c0 + c) * g.h * g.w..(c0 + c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward<T: Elem>(x: &Tensor<T>, k: &Tensor<T>, bias: Option<&Tensor<T>>, g: &Geom) -> Tensor<T> {
    let (cig, cog) = (g.cig(), g.cog());
    let hw = g.ho * g.wo;
    let kk = cig * g.kh * g.kw;
    let mut out = Tensor::zeros(&[g.b, g.co, g.ho, g.wo]);
    let mut col = if g.pointwise() { Vec::new() } else { vec![T::zero(); kk * hw] };
    let in_img = g.ci * g.h * g.w;
    let out_img = g.co * hw;
    for bi in 0..g.b {
        let img = &x.data()[bi * in_img..(bi + 1) * in_img];
        let od = &mut out.data_mut()[bi * out_img..(bi + 1) * out_img];
        for gi in 0..g.groups {
            let wk = &k.data()[gi * cog * kk..(gi + 1) * cog * kk];
            let dst = &mut od[gi * cog * hw..(gi + 1) * cog * hw];
            if g.pointwise() {
                let src = &img[gi * cig * hw..(gi + 1) * cig * hw];
                gemm(wk, false, src, false, dst, cog, kk, hw, false);
            } else {
                im2col(img, g, gi * cig, cig, &mut col);
                gemm(wk, false, &col, false, dst, cog, kk, hw, false);
            }
        }
        if let Some(bias) = bias {
            for (c, plane) in od.chunks_mut(hw).enumerate() {
                let bv = bias.data()[c];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of input and kernel.
fn backward<T: Elem>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    gy: &Tensor<T>,
    g: &Geom,
    need_x: bool,
    need_k: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (cig, cog) = (g.cig(), g.cog());
    let hw = g.ho * g.wo;
    let kk = cig * g.kh * g.kw;
    let in_img = g.ci * g.h * g.w;
    let out_img = g.co * hw;
    let mut dx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut dk = need_k.then(|| Tensor::zeros(k.shape()));
    let mut col = vec![T::zero(); if g.pointwise() { 0 } else { kk * hw }];
    let mut dcol = vec![T::zero(); if need_x && !g.pointwise() { kk * hw } else { 0 }];
    for bi in 0..g.b {
        let img = &x.data()[bi * in_img..(bi + 1) * in_img];
        let gimg = &gy.data()[bi * out_img..(bi + 1) * out_img];
        for gi in 0..g.groups {
            let wk = &k.data()[gi * cog * kk..(gi + 1) * cog * kk];
            let gsl = &gimg[gi * cog * hw..(gi + 1) * cog * hw];
            if let Some(dk) = dk.as_mut() {
                let dst = &mut dk.data_mut()[gi * cog * kk..(gi + 1) * cog * kk];
                if g.pointwise() {
                    let src = &img[gi * cig * hw..(gi + 1) * cig * hw];
                    gemm(gsl, false, src, true, dst, cog, hw, kk, true);
                } else {
                    im2col(img, g, gi * cig, cig, &mut col);
                    gemm(gsl, false, &col, true, dst, cog, hw, kk, true);
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dimg = &mut dx.data_mut()[bi * in_img..(bi + 1) * in_img];
                if g.pointwise() {
                    let dst = &mut dimg[gi * cig * hw..(gi + 1) * cig * hw];
                    gemm(wk, true, gsl, false, dst, kk, cog, hw, true);
                } else {
                    gemm(wk, true, gsl, false, &mut dcol, kk, cog, hw, false);
                    col2im(&dcol, g, gi * cig, cig, dimg);
                }
            }
        }
    }
    (dx, dk)
}

/// Output spatial size of a convolution.
pub fn conv_out_size(size: usize, k: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - k) / stride + 1
}

impl<'g, T: Elem> Var<'g, T> {
    /// Cross-correlation of a `[B, Ci, H, W]` input with a
    /// `[Co, Ci/groups, kh, kw]` kernel plus optional per-output-channel bias.
    pub fn conv2d(
        self,
        kernel: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        spec: ConvSpec,
    ) -> Result<Var<'g, T>> {
        let x: Arc<Tensor<T>> = self.value();
        let k = kernel.value();
        let geo = geometry(x.shape(), k.shape(), spec)?;
        let bv = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [geo.co] {
                    return Err(dim_err!(
                        "conv2d bias shape {:?} does not match out-channels {}",
                        bv.shape(),
                        geo.co
                    ));
                }
                Some(bv)
            }
            None => None,
        };
        let out = forward(&x, &k, bv.as_deref(), &geo);
        self.graph.add_flops(geo.flops());
        let mut parents = vec![self, kernel];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        Ok(self.graph.op(out, &parents, move |gy, need| {
            let (dx, dk) = backward(&x, &k, gy, &geo, need[0], need[1]);
            let mut res = vec![dx, dk];
            if has_bias {
                let db = need[2].then(|| {
                    let hw = geo.ho * geo.wo;
                    let mut db = vec![T::zero(); geo.co];
                    for (i, plane) in gy.data().chunks(hw).enumerate() {
                        db[i % geo.co] += plane.iter().fold(T::zero(), |a, &v| a + v);
                    }
                    Tensor::from_vec(db)
                });
                res.push(db);
            }
            res
        }))
    }
}
