use super::Var;
use crate::error::{dim_err, Result};
use crate::tensor::{Elem, Tensor};

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance estimate, as used for running averages.
    pub var: Vec<f64>,
}

fn check_channel_vec<T: Elem>(v: &Tensor<T>, c: usize, what: &str) -> Result<()> {
    if v.shape() != [c] {
        return Err(dim_err!(
            "{what} shape {:?} does not match channel count {c}",
            v.shape()
        ));
    }
    Ok(())
}

impl<'g, T: Elem> Var<'g, T> {
    /// `y[b, c] = x[b, c] * scale[c] + shift[c]` on a rank-4 tensor.
    pub fn channel_affine(self, scale: Var<'g, T>, shift: Var<'g, T>) -> Result<Var<'g, T>> {
        let x = self.value();
        let (s, t) = (scale.value(), shift.value());
        let (_, c, h, w) = x.dims4()?;
        check_channel_vec(&s, c, "affine scale")?;
        check_channel_vec(&t, c, "affine shift")?;
        let hw = h * w;
        let mut out = Tensor::zeros(x.shape());
        for (i, (o, xi)) in out
            .data_mut()
            .chunks_mut(hw)
            .zip(x.data().chunks(hw))
            .enumerate()
        {
            let (sv, tv) = (s.data()[i % c], t.data()[i % c]);
            for (ov, &xv) in o.iter_mut().zip(xi) {
                *ov = xv * sv + tv;
            }
        }
        self.graph.add_flops(2 * out.len() as u64);
        Ok(self.graph.op(out, &[self, scale, shift], move |g, need| {
            let dx = need[0].then(|| {
                let mut dx = Tensor::zeros(x.shape());
                for (i, (o, gi)) in dx
                    .data_mut()
                    .chunks_mut(hw)
                    .zip(g.data().chunks(hw))
                    .enumerate()
                {
                    let sv = s.data()[i % c];
                    for (ov, &gv) in o.iter_mut().zip(gi) {
                        *ov = gv * sv;
                    }
                }
                dx
            });
            let mut ds = vec![T::zero(); c];
            let mut dt = vec![T::zero(); c];
            if need[1] || need[2] {
                for (i, (gi, xi)) in g.data().chunks(hw).zip(x.data().chunks(hw)).enumerate() {
                    for (&gv, &xv) in gi.iter().zip(xi) {
                        ds[i % c] += gv * xv;
                        dt[i % c] += gv;
                    }
                }
            }
            vec![
                dx,
                need[1].then(|| Tensor::from_vec(ds)),
                need[2].then(|| Tensor::from_vec(dt)),
            ]
        }))
    }

    /// Batch normalization with statistics over batch and spatial axes.
    /// Returns the normalized output and the batch statistics.
    pub fn batch_norm_train(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        eps: f64,
    ) -> Result<(Var<'g, T>, BatchStats)> {
        let x = self.value();
        let (gm, bt) = (gamma.value(), beta.value());
        let (b, c, h, w) = x.dims4()?;
        check_channel_vec(&gm, c, "batch norm gamma")?;
        check_channel_vec(&bt, c, "batch norm beta")?;
        let hw = h * w;
        let n = b * hw;
        if n == 0 {
            return Err(dim_err!("batch norm over empty batch/spatial extent"));
        }
        let mut mean = vec![0.0f64; c];
        let mut m2 = vec![0.0f64; c];
        for (i, xi) in x.data().chunks(hw).enumerate() {
            mean[i % c] += xi.iter().map(|v| v.f64()).sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for (i, xi) in x.data().chunks(hw).enumerate() {
            let m = mean[i % c];
            m2[i % c] += xi.iter().map(|v| (v.f64() - m).powi(2)).sum::<f64>();
        }
        let var_b: Vec<f64> = m2.iter().map(|s| s / n as f64).collect();
        let inv_std: Vec<T> = var_b.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        for (i, ((xh, o), xi)) in xhat
            .data_mut()
            .chunks_mut(hw)
            .zip(out.data_mut().chunks_mut(hw))
            .zip(x.data().chunks(hw))
            .enumerate()
        {
            let ch = i % c;
            let (m, is, gv, bv) = (mean_t[ch], inv_std[ch], gm.data()[ch], bt.data()[ch]);
            for ((xhv, ov), &xv) in xh.iter_mut().zip(o.iter_mut()).zip(xi) {
                *xhv = (xv - m) * is;
                *ov = *xhv * gv + bv;
            }
        }
        self.graph.add_flops(6 * out.len() as u64);
        let stats = BatchStats {
            mean,
            var: m2
                .iter()
                .map(|s| if n > 1 { s / (n - 1) as f64 } else { 0.0 })
                .collect(),
        };
        let var = self.graph.op(out, &[self, gamma, beta], move |g, need| {
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for (i, (gi, xi)) in g.data().chunks(hw).zip(xhat.data().chunks(hw)).enumerate() {
                for (&gv, &xv) in gi.iter().zip(xi) {
                    sum_g[i % c] += gv;
                    sum_gx[i % c] += gv * xv;
                }
            }
            let dx = need[0].then(|| {
                let nt = T::of(n as f64);
                let mut dx = Tensor::zeros(xhat.shape());
                for (i, ((o, gi), xi)) in dx
                    .data_mut()
                    .chunks_mut(hw)
                    .zip(g.data().chunks(hw))
                    .zip(xhat.data().chunks(hw))
                    .enumerate()
                {
                    let ch = i % c;
                    let k = gm.data()[ch] * inv_std[ch];
                    let mg = sum_g[ch] / nt;
                    let mgx = sum_gx[ch] / nt;
                    for ((ov, &gv), &xv) in o.iter_mut().zip(gi).zip(xi) {
                        *ov = k * (gv - mg - xv * mgx);
                    }
                }
                dx
            });
            vec![
                dx,
                need[1].then(|| Tensor::from_vec(sum_gx.clone())),
                need[2].then(|| Tensor::from_vec(sum_g.clone())),
            ]
        });
        Ok((var, stats))
    }

    /// Layer normalization over the last axis of a `[N, D]` tensor.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let x = self.value();
        let (n, d) = x.dims2()?;
        let (gm, bt) = (gamma.value(), beta.value());
        check_channel_vec(&gm, d, "layer norm gamma")?;
        check_channel_vec(&bt, d, "layer norm beta")?;
        let dt = T::of(d as f64);
        let eps = T::of(eps);
        let mut xhat = Tensor::zeros(&[n, d]);
        let mut inv = vec![T::zero(); n];
        let mut out = Tensor::zeros(&[n, d]);
        for r in 0..n {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dt;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / dt;
            let is = T::one() / (var + eps).sqrt();
            inv[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat.data_mut()[r * d + j] = xh;
                out.data_mut()[r * d + j] = xh * gm.data()[j] + bt.data()[j];
            }
        }
        self.graph.add_flops(8 * (n * d) as u64);
        Ok(self.graph.op(out, &[self, gamma, beta], move |g, need| {
            let mut dg = vec![T::zero(); d];
            let mut db = vec![T::zero(); d];
            let mut dx = need[0].then(|| Tensor::zeros(&[n, d]));
            for r in 0..n {
                let gr = &g.data()[r * d..(r + 1) * d];
                let xr = &xhat.data()[r * d..(r + 1) * d];
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for j in 0..d {
                    dg[j] += gr[j] * xr[j];
                    db[j] += gr[j];
                    let gh = gr[j] * gm.data()[j];
                    s1 += gh;
                    s2 += gh * xr[j];
                }
                if let Some(dx) = dx.as_mut() {
                    let (m1, m2) = (s1 / dt, s2 / dt);
                    let dr = &mut dx.data_mut()[r * d..(r + 1) * d];
                    for j in 0..d {
                        dr[j] = inv[r] * (gr[j] * gm.data()[j] - m1 - xr[j] * m2);
                    }
                }
            }
            vec![
                dx,
                need[1].then(|| Tensor::from_vec(dg)),
                need[2].then(|| Tensor::from_vec(db)),
            ]
        }))
    }
}
