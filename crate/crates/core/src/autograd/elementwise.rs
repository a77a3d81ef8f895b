use super::{same_shape, Var};
use crate::error::{dim_err, Result};
use crate::tensor::{Elem, Tensor};

#[inline]
fn sigmoid<T: Elem>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'g, T: Elem> Var<'g, T> {
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add")?;
        let out = a.zip_map(&b, |x, y| x + y);
        self.graph.add_flops(out.len() as u64);
        Ok(self
            .graph
            .op(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub")?;
        let out = a.zip_map(&b, |x, y| x - y);
        Ok(self.graph.op(out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        }))
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul")?;
        let out = a.zip_map(&b, |x, y| x * y);
        self.graph.add_flops(out.len() as u64);
        Ok(self.graph.op(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |gv, bv| gv * bv)),
                need[1].then(|| g.zip_map(&a, |gv, av| gv * av)),
            ]
        }))
    }

    pub fn scale(self, s: f64) -> Var<'g, T> {
        let s = T::of(s);
        let out = self.value().scale(s);
        self.graph
            .op(out, &[self], move |g, _| vec![Some(g.scale(s))])
    }

    pub fn add_scalar(self, s: f64) -> Var<'g, T> {
        let s = T::of(s);
        let out = self.value().map(|v| v + s);
        self.graph.op(out, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn silu(self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| v * sigmoid(v));
        self.graph.add_flops(4 * out.len() as u64);
        self.graph.op(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, v| {
                let s = sigmoid(v);
                gv * s * (T::one() + v * (T::one() - s))
            }))]
        })
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let out = self.value().map(sigmoid);
        let y = out.clone();
        self.graph.op(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&y, |gv, s| gv * s * (T::one() - s)))]
        })
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g, T> {
        let x = self.value();
        let (lo, hi) = (T::of(lo), T::of(hi));
        let out = x.map(|v| v.max(lo).min(hi));
        self.graph.op(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, v| if v > lo && v < hi { gv } else { T::zero() }))]
        })
    }

    pub fn relu(self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| v.max(T::zero()));
        self.graph.op(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, v| if v > T::zero() { gv } else { T::zero() }))]
        })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'g, T> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let out = Tensor::scalar(v.sum());
        self.graph.op(out, &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// `x[b, c, :, :] * gate[b, c]`.
    pub fn mul_channel_gate(self, gate: Var<'g, T>) -> Result<Var<'g, T>> {
        let x = self.value();
        let gt = gate.value();
        let (b, c, h, w) = x.dims4()?;
        if gt.shape() != [b, c] {
            return Err(dim_err!(
                "channel gate shape {:?} does not match (batch {b}, channels {c})",
                gt.shape()
            ));
        }
        let hw = h * w;
        let mut out = Tensor::zeros(x.shape());
        {
            let od = out.data_mut();
            for (i, chunk) in x.data().chunks(hw).enumerate() {
                let s = gt.data()[i];
                for (o, &v) in od[i * hw..(i + 1) * hw].iter_mut().zip(chunk) {
                    *o = v * s;
                }
            }
        }
        self.graph.add_flops(out.len() as u64);
        Ok(self.graph.op(out, &[self, gate], move |g, need| {
            let dx = need[0].then(|| {
                let mut dx = Tensor::zeros(x.shape());
                for (i, (o, gc)) in dx
                    .data_mut()
                    .chunks_mut(hw)
                    .zip(g.data().chunks(hw))
                    .enumerate()
                {
                    let s = gt.data()[i];
                    for (ov, &gv) in o.iter_mut().zip(gc) {
                        *ov = gv * s;
                    }
                }
                dx
            });
            let dg = need[1].then(|| {
                let data = x
                    .data()
                    .chunks(hw)
                    .zip(g.data().chunks(hw))
                    .map(|(xc, gc)| xc.iter().zip(gc).fold(T::zero(), |a, (&xv, &gv)| a + xv * gv))
                    .collect();
                Tensor::from_parts(vec![b, c], data)
            });
            vec![dx, dg]
        }))
    }
}
