//! Bilinear sampling at continuous normalized locations and the fused
//! multi-scale deformable aggregation kernel.

use std::sync::Arc;

use super::Var;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Elem, Tensor};

/// Spatial size of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelShape {
    pub h: usize,
    pub w: usize,
}

/// The four bilinear taps for normalized point `(x, y)` on an `h x w` grid.
/// Pixel coordinates are `x * w - 0.5`; taps outside the grid are `None`
/// (they read as zero). Also returns the fractional parts `(lx, ly)`.
#[inline]
pub(crate) fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> ([(Option<usize>, f64); 4], f64, f64) {
    let px = x * w as f64 - 0.5;
    let py = y * h as f64 - 0.5;
    let fx = px.floor();
    let fy = py.floor();
    let (lx, ly) = (px - fx, py - fy);
    let idx = |xi: f64, yi: f64| -> Option<usize> {
        if xi >= 0.0 && yi >= 0.0 && xi < w as f64 && yi < h as f64 {
            Some(yi as usize * w + xi as usize)
        } else {
            None
        }
    };
    (
        [
            (idx(fx, fy), (1.0 - lx) * (1.0 - ly)),
            (idx(fx + 1.0, fy), lx * (1.0 - ly)),
            (idx(fx, fy + 1.0), (1.0 - lx) * ly),
            (idx(fx + 1.0, fy + 1.0), lx * ly),
        ],
        lx,
        ly,
    )
}

/// Derivatives of the four tap weights with respect to pixel x and y.
#[inline]
fn tap_derivs(lx: f64, ly: f64) -> [(f64, f64); 4] {
    [
        (-(1.0 - ly), -(1.0 - lx)),
        (1.0 - ly, -lx),
        (-ly, 1.0 - lx),
        (ly, lx),
    ]
}

impl<'g, T: Elem> Var<'g, T> {
    /// `loc[q, 2p + j] = ref[q, j] + offsets[q, 2p + j]`.
    pub fn add_ref_points(self, refs: Var<'g, T>) -> Result<Var<'g, T>> {
        let off = self.value();
        let r = refs.value();
        let (nq, w) = off.dims2()?;
        if r.shape() != [nq, 2] || w % 2 != 0 {
            return Err(dim_err!(
                "reference points {:?} incompatible with offsets {:?}",
                r.shape(),
                off.shape()
            ));
        }
        let mut out = (*off).clone();
        for q in 0..nq {
            for p in 0..w / 2 {
                out.data_mut()[q * w + 2 * p] += r.data()[2 * q];
                out.data_mut()[q * w + 2 * p + 1] += r.data()[2 * q + 1];
            }
        }
        Ok(self.graph.op(out, &[self, refs], move |g, need| {
            let dr = need[1].then(|| {
                let mut dr = Tensor::zeros(&[nq, 2]);
                for q in 0..nq {
                    for p in 0..w / 2 {
                        dr.data_mut()[2 * q] += g.data()[q * w + 2 * p];
                        dr.data_mut()[2 * q + 1] += g.data()[q * w + 2 * p + 1];
                    }
                }
                dr
            });
            vec![Some(g.clone()), dr]
        }))
    }
}

/// Multi-scale deformable aggregation.
///
/// * `values[l]`: `[H_l * W_l, d]` projected value tokens of level `l`, head
///   `m` owning columns `m*d/M .. (m+1)*d/M`.
/// * `locations`: `[Nq, M*L*K*2]` normalized sampling points, ordered
///   head-major then level then point then (x, y).
/// * `weights`: `[Nq, M*L*K]` attention weights in the same order.
///
/// Output `[Nq, d]`: for each head the weighted sum of bilinear samples.
pub fn ms_deform_sample<'g, T: Elem>(
    values: &[Var<'g, T>],
    shapes: &[LevelShape],
    locations: Var<'g, T>,
    weights: Var<'g, T>,
    heads: usize,
    points: usize,
) -> Result<Var<'g, T>> {
    let levels = values.len();
    if levels == 0 || shapes.len() != levels {
        return Err(dim_err!(
            "level count mismatch: {} value maps, {} shapes",
            levels,
            shapes.len()
        ));
    }
    let vals: Vec<Arc<Tensor<T>>> = values.iter().map(|v| v.value()).collect();
    let d = vals[0].dims2()?.1;
    if heads == 0 || d % heads != 0 {
        return Err(dim_err!("value width {d} not divisible by {heads} heads"));
    }
    for (v, s) in vals.iter().zip(shapes) {
        let (n, dv) = v.dims2()?;
        if n != s.h * s.w || dv != d {
            return Err(dim_err!(
                "value map {:?} does not match level {}x{} with width {d}",
                v.shape(),
                s.h,
                s.w
            ));
        }
    }
    let loc = locations.value();
    let att = weights.value();
    let (nq, lw) = loc.dims2()?;
    let slots = heads * levels * points;
    if lw != 2 * slots || att.shape() != [nq, slots] {
        return Err(dim_err!(
            "sampling locations {:?} / weights {:?} do not match {heads} heads x {levels} levels x {points} points",
            loc.shape(),
            att.shape()
        ));
    }
    if !loc.all_finite() || !att.all_finite() {
        return Err(Error::Evaluation("non-finite sampling location or weight".into()));
    }
    let dv = d / heads;
    let mut out = Tensor::<T>::zeros(&[nq, d]);
    {
        let od = out.data_mut();
        for q in 0..nq {
            for m in 0..heads {
                let orow = &mut od[q * d + m * dv..q * d + (m + 1) * dv];
                for l in 0..levels {
                    let s = shapes[l];
                    let vd = vals[l].data();
                    for k in 0..points {
                        let slot = (m * levels + l) * points + k;
                        let a = att.data()[q * slots + slot];
                        let x = loc.data()[q * lw + 2 * slot].f64();
                        let y = loc.data()[q * lw + 2 * slot + 1].f64();
                        let (taps, _, _) = bilinear_taps(x, y, s.h, s.w);
                        for (idx, tw) in taps {
                            let Some(idx) = idx else { continue };
                            let c = a * T::of(tw);
                            let vrow = &vd[idx * d + m * dv..idx * d + (m + 1) * dv];
                            for (o, &v) in orow.iter_mut().zip(vrow) {
                                *o += c * v;
                            }
                        }
                    }
                }
            }
        }
    }
    let graph = locations.graph();
    graph.add_sample_reads((nq * slots * 4) as u64);
    graph.add_flops((nq * slots * 4 * dv * 2) as u64);
    let mut parents: Vec<Var<'g, T>> = values.to_vec();
    parents.push(locations);
    parents.push(weights);
    let shapes = shapes.to_vec();
    Ok(graph.op(out, &parents, move |g, need| {
        let need_loc = need[levels];
        let need_att = need[levels + 1];
        let mut dvals: Vec<Option<Tensor<T>>> = (0..levels)
            .map(|l| need[l].then(|| Tensor::zeros(vals[l].shape())))
            .collect();
        let mut dloc = need_loc.then(|| Tensor::<T>::zeros(&[nq, lw]));
        let mut datt = need_att.then(|| Tensor::<T>::zeros(&[nq, slots]));
        for q in 0..nq {
            for m in 0..heads {
                let grow = &g.data()[q * d + m * dv..q * d + (m + 1) * dv];
                for l in 0..levels {
                    let s = shapes[l];
                    let vd = vals[l].data();
                    for k in 0..points {
                        let slot = (m * levels + l) * points + k;
                        let a = att.data()[q * slots + slot];
                        let x = loc.data()[q * lw + 2 * slot].f64();
                        let y = loc.data()[q * lw + 2 * slot + 1].f64();
                        let (taps, lx, ly) = bilinear_taps(x, y, s.h, s.w);
                        let derivs = tap_derivs(lx, ly);
                        let mut dsum = T::zero();
                        let (mut dpx, mut dpy) = (T::zero(), T::zero());
                        for ((idx, tw), (ddx, ddy)) in taps.into_iter().zip(derivs) {
                            let Some(idx) = idx else { continue };
                            let vrow = &vd[idx * d + m * dv..idx * d + (m + 1) * dv];
                            let gv = grow
                                .iter()
                                .zip(vrow)
                                .fold(T::zero(), |acc, (&gg, &vv)| acc + gg * vv);
                            dsum += T::of(tw) * gv;
                            dpx += T::of(ddx) * gv;
                            dpy += T::of(ddy) * gv;
                            if let Some(dv_l) = dvals[l].as_mut() {
                                let c = a * T::of(tw);
                                let drow = &mut dv_l.data_mut()[idx * d + m * dv..idx * d + (m + 1) * dv];
                                for (o, &gg) in drow.iter_mut().zip(grow) {
                                    *o += c * gg;
                                }
                            }
                        }
                        if let Some(da) = datt.as_mut() {
                            da.data_mut()[q * slots + slot] = dsum;
                        }
                        if let Some(dl) = dloc.as_mut() {
                            dl.data_mut()[q * lw + 2 * slot] = a * dpx * T::of(s.w as f64);
                            dl.data_mut()[q * lw + 2 * slot + 1] = a * dpy * T::of(s.h as f64);
                        }
                    }
                }
            }
        }
        let mut res = dvals;
        res.push(dloc);
        res.push(datt);
        res
    }))
}
