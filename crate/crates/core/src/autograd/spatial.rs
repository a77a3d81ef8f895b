use super::Var;
use crate::error::{dim_err, Result};
use crate::tensor::{Elem, Tensor};

/// Source taps of a half-pixel-centred linear resize along one axis, with the
/// source index clamped at the borders.
fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let l = s - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

/// Inverse of `channel_shuffle`'s index map: output channel -> input channel.
fn shuffle_source(c: usize, groups: usize) -> Vec<usize> {
    let per = c / groups;
    // out index i * groups + j takes input j * per + i
    let mut src = vec![0; c];
    for i in 0..per {
        for j in 0..groups {
            src[i * groups + j] = j * per + i;
        }
    }
    src
}

fn permute_channels<T: Elem>(x: &Tensor<T>, src: &[usize], inverse: bool) -> Tensor<T> {
    let (b, c, h, w) = x.dims4().expect("rank 4");
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for bi in 0..b {
        for (o, &s) in src.iter().enumerate() {
            let (dst_c, src_c) = if inverse { (s, o) } else { (o, s) };
            let d0 = (bi * c + dst_c) * hw;
            let s0 = (bi * c + src_c) * hw;
            out.data_mut()[d0..d0 + hw].copy_from_slice(&x.data()[s0..s0 + hw]);
        }
    }
    out
}

impl<'g, T: Elem> Var<'g, T> {
    /// Bilinear 2x upsampling (half-pixel centres, borders clamped).
    pub fn upsample2x(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        if h == 0 || w == 0 {
            return Err(dim_err!("upsample of empty spatial extent"));
        }
        let (ho, wo) = (2 * h, 2 * w);
        let ty = resize_taps(h, ho);
        let tx = resize_taps(w, wo);
        let mut out = Tensor::zeros(&[b, c, ho, wo]);
        for (p, src) in x.data().chunks(h * w).enumerate() {
            let dst = &mut out.data_mut()[p * ho * wo..(p + 1) * ho * wo];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let v = src[y0 * w + x0].f64() * wy0 * wx0
                        + src[y0 * w + x1].f64() * wy0 * wx1
                        + src[y1 * w + x0].f64() * wy1 * wx0
                        + src[y1 * w + x1].f64() * wy1 * wx1;
                    dst[oy * wo + ox] = T::of(v);
                }
            }
        }
        self.graph.add_flops(8 * out.len() as u64);
        Ok(self.graph.op(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&[b, c, h, w]);
            for (p, gsrc) in g.data().chunks(ho * wo).enumerate() {
                let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let gv = gsrc[oy * wo + ox];
                        dst[y0 * w + x0] += gv * T::of(wy0 * wx0);
                        dst[y0 * w + x1] += gv * T::of(wy0 * wx1);
                        dst[y1 * w + x0] += gv * T::of(wy1 * wx0);
                        dst[y1 * w + x1] += gv * T::of(wy1 * wx1);
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Spatial mean per (batch, channel): `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        let hw = h * w;
        if hw == 0 {
            return Err(dim_err!("global average pool over empty spatial extent (height {h}, width {w})"));
        }
        let inv = T::of(1.0 / hw as f64);
        let data = x
            .data()
            .chunks(hw)
            .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        let out = Tensor::from_parts(vec![b, c], data);
        Ok(self.graph.op(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&[b, c, h, w]);
            for (p, plane) in dx.data_mut().chunks_mut(hw).enumerate() {
                let v = g.data()[p] * inv;
                plane.iter_mut().for_each(|o| *o = v);
            }
            vec![Some(dx)]
        }))
    }

    /// Reshape channels to `(groups, C/groups)`, transpose, flatten.
    pub fn channel_shuffle(self, groups: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let (_, c, _, _) = x.dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(dim_err!("channel count {c} not divisible by shuffle groups {groups}"));
        }
        let src = shuffle_source(c, groups);
        let out = permute_channels(&x, &src, false);
        Ok(self
            .graph
            .op(out, &[self], move |g, _| vec![Some(permute_channels(g, &src, true))]))
    }

    /// Channels `start..start+len` of a rank-4 tensor.
    pub fn narrow_channels(self, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        if start + len > c {
            return Err(dim_err!("channel range {start}..{} exceeds {c} channels", start + len));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(b * len * hw);
        for bi in 0..b {
            data.extend_from_slice(&x.data()[(bi * c + start) * hw..(bi * c + start + len) * hw]);
        }
        let out = Tensor::from_parts(vec![b, len, h, w], data);
        Ok(self.graph.op(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&[b, c, h, w]);
            for bi in 0..b {
                dx.data_mut()[(bi * c + start) * hw..(bi * c + start + len) * hw]
                    .copy_from_slice(&g.data()[bi * len * hw..(bi + 1) * len * hw]);
            }
            vec![Some(dx)]
        }))
    }

    /// Batch items `start..start+len`.
    pub fn narrow_batch(self, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        if start + len > b {
            return Err(dim_err!("batch range {start}..{} exceeds batch {b}", start + len));
        }
        let per = c * h * w;
        let out = x.narrow0(start, len);
        Ok(self.graph.op(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&[b, c, h, w]);
            dx.data_mut()[start * per..(start + len) * per].copy_from_slice(g.data());
            vec![Some(dx)]
        }))
    }

    /// `[1, C, H, W] -> [H*W, C]`, one row per spatial location.
    pub fn to_tokens(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let (b, c, h, w) = x.dims4()?;
        if b != 1 {
            return Err(dim_err!("to_tokens expects batch 1, got {b}"));
        }
        self.reshape(&[c, h * w])?.transpose()
    }

    /// `[H*W, C] -> [1, C, H, W]`.
    pub fn from_tokens(self, h: usize, w: usize) -> Result<Var<'g, T>> {
        let (n, c) = self.dims2()?;
        if n != h * w {
            return Err(dim_err!("{n} tokens cannot form a {h}x{w} map"));
        }
        self.transpose()?.reshape(&[1, c, h, w])
    }
}

/// Concatenate rank-4 tensors along channels.
pub fn concat_channels<'g, T: Elem>(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    concat_axis(parts, 1)
}

/// Concatenate rank-4 tensors along the batch axis.
pub fn concat_batch<'g, T: Elem>(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    concat_axis(parts, 0)
}

fn concat_axis<'g, T: Elem>(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
    let first = parts
        .first()
        .ok_or_else(|| dim_err!("cannot concatenate zero tensors"))?;
    let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let (b, _, h, w) = vals[0].dims4()?;
    let c0 = vals[0].dims4()?.1;
    let mut sizes = Vec::new();
    for v in &vals {
        let (vb, vc, vh, vw) = v.dims4()?;
        let ok = if axis == 1 {
            vb == b && vh == h && vw == w
        } else {
            vc == c0 && vh == h && vw == w
        };
        if !ok {
            return Err(dim_err!(
                "concat along axis {axis}: shape {:?} incompatible with {:?}",
                v.shape(),
                vals[0].shape()
            ));
        }
        sizes.push(if axis == 1 { vc } else { vb });
    }
    let total: usize = sizes.iter().sum();
    let (outer, inner) = if axis == 1 { (b, h * w) } else { (1, c0 * h * w) };
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &s) in vals.iter().zip(&sizes) {
            data.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
        }
    }
    let shape = if axis == 1 {
        vec![b, total, h, w]
    } else {
        vec![total, c0, h, w]
    };
    let out = Tensor::from_parts(shape, data);
    Ok(first.graph.op(out, parts, move |g, need| {
        let mut off = 0;
        sizes
            .iter()
            .zip(need)
            .map(|(&s, &nd)| {
                let res = nd.then(|| {
                    let mut d = Vec::with_capacity(outer * s * inner);
                    for o in 0..outer {
                        let base = (o * total + off) * inner;
                        d.extend_from_slice(&g.data()[base..base + s * inner]);
                    }
                    let shape = if axis == 1 {
                        vec![b, s, h, w]
                    } else {
                        vec![s, c0, h, w]
                    };
                    Tensor::from_parts(shape, d)
                });
                off += s;
                res
            })
            .collect()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_source_small() {
        assert_eq!(shuffle_source(4, 2), vec![0, 2, 1, 3]);
        assert_eq!(shuffle_source(6, 3), vec![0, 2, 4, 1, 3, 5]);
        assert_eq!(shuffle_source(4, 1), vec![0, 1, 2, 3]);
    }

    #[test]
    fn resize_taps_are_convex() {
        for (s, d) in [(2, 4), (3, 6), (1, 2)] {
            for (i0, i1, a, b) in resize_taps(s, d) {
                assert!(i0 < s && i1 < s);
                assert!((a + b - 1.0).abs() < 1e-15 && a >= 0.0 && b >= 0.0);
            }
        }
    }
}
