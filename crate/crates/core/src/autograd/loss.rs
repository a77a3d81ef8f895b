use super::matrix::softmax_in_place;
use super::Var;
use crate::boxes::{box_convert, giou_grad, xyxy_grad_to_cxcywh, CxCyWh};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Elem, Tensor};

/// Lower clamp applied to the target probability before taking its log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Focal term `-alpha (1 - p)^gamma log p` and its derivative in `p`.
pub(crate) fn focal_term(p: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let pc = p.max(PROB_FLOOR);
    let q = (1.0 - p).max(0.0);
    let lp = pc.ln();
    let loss = -alpha * q.powf(gamma) * lp;
    let mut d = -alpha * q.powf(gamma) / pc;
    if gamma != 0.0 && q > 0.0 {
        d += alpha * gamma * q.powf(gamma - 1.0) * lp;
    }
    (loss, d)
}

impl<'g, T: Elem> Var<'g, T> {
    /// Mean over rows of the focal loss of softmax(`logits`) against
    /// per-row target indices.
    pub fn focal_loss(self, targets: &[usize], alpha: f64, gamma: f64) -> Result<Var<'g, T>> {
        let z = self.value();
        let (n, k) = z.dims2()?;
        if targets.len() != n {
            return Err(dim_err!("{} targets for {n} logit rows", targets.len()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(dim_err!("target class {t} out of range for {k} logits"));
        }
        let mut probs = vec![0.0f64; n * k];
        let mut total = 0.0;
        let mut dps = vec![0.0f64; n];
        for r in 0..n {
            let row = &mut probs[r * k..(r + 1) * k];
            for (p, zv) in row.iter_mut().zip(&z.data()[r * k..(r + 1) * k]) {
                *p = zv.f64();
            }
            softmax_in_place(row);
            let (l, d) = focal_term(row[targets[r]], alpha, gamma);
            total += l;
            dps[r] = d;
        }
        let inv_n = if n > 0 { 1.0 / n as f64 } else { 0.0 };
        let out = Tensor::scalar(T::of(total * inv_n));
        let targets = targets.to_vec();
        Ok(self.graph.op(out, &[self], move |g, _| {
            let s = g.data()[0].f64() * inv_n;
            let mut dz = Tensor::zeros(&[n, k]);
            for r in 0..n {
                let row = &probs[r * k..(r + 1) * k];
                let t = targets[r];
                let pt = row[t];
                for j in 0..k {
                    let delta = if j == t { 1.0 } else { 0.0 };
                    dz.data_mut()[r * k + j] = T::of(s * dps[r] * pt * (delta - row[j]));
                }
            }
            vec![Some(dz)]
        }))
    }

    /// Mean over rows of `sum_j |pred - target|` for `[N, 4]` boxes.
    pub fn l1_loss(self, target: &Tensor<T>) -> Result<Var<'g, T>> {
        let p = self.value();
        if p.shape() != target.shape() {
            return Err(dim_err!(
                "l1 loss shapes {:?} and {:?} differ",
                p.shape(),
                target.shape()
            ));
        }
        let n = p.shape()[0].max(1);
        let total = p
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |a, (&x, &y)| a + (x - y).abs());
        let out = Tensor::scalar(total / T::of(n as f64));
        let t = target.clone();
        Ok(self.graph.op(out, &[self], move |g, _| {
            let s = g.data()[0] / T::of(n as f64);
            vec![Some(p.zip_map(&t, |x, y| {
                if x > y {
                    s
                } else if x < y {
                    -s
                } else {
                    T::zero()
                }
            }))]
        }))
    }

    /// Mean over rows of `1 - GIoU(pred, target)` for `[N, 4]` centre-size boxes.
    pub fn giou_loss(self, target: &Tensor<T>) -> Result<Var<'g, T>> {
        let p = self.value();
        let (n, four) = p.dims2()?;
        if four != 4 || target.shape() != p.shape() {
            return Err(dim_err!(
                "giou loss expects matching [N, 4] boxes, got {:?} and {:?}",
                p.shape(),
                target.shape()
            ));
        }
        let mut total = 0.0;
        let mut grads = vec![0.0f64; n * 4];
        for r in 0..n {
            let row = |t: &Tensor<T>| -> [f64; 4] { std::array::from_fn(|j| t.data()[r * 4 + j].f64()) };
            let a = box_convert(CxCyWh(row(&p)))?;
            let b = box_convert(CxCyWh(row(target)))?;
            let (gv, gxy) = giou_grad(&a, &b);
            if !gv.is_finite() {
                return Err(Error::Evaluation("non-finite GIoU".into()));
            }
            total += 1.0 - gv;
            let gc = xyxy_grad_to_cxcywh(gxy);
            for j in 0..4 {
                grads[r * 4 + j] = -gc[j];
            }
        }
        let inv_n = 1.0 / n.max(1) as f64;
        let out = Tensor::scalar(T::of(total * inv_n));
        Ok(self.graph.op(out, &[self], move |g, _| {
            let s = g.data()[0].f64() * inv_n;
            let data = grads.iter().map(|&v| T::of(v * s)).collect();
            vec![Some(Tensor::from_parts(vec![n, 4], data))]
        }))
    }
}
