use super::Var;
use crate::error::{dim_err, Result};
use crate::tensor::{gemm, Elem, Tensor};

/// Numerically stable softmax of one slice, in place.
pub(crate) fn softmax_in_place<T: Elem>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

impl<'g, T: Elem> Var<'g, T> {
    /// `a [N, K] x b [K, M]`, or `a x b^T` with `b [M, K]` when `transpose_b`.
    pub fn matmul_t(self, other: Var<'g, T>, transpose_b: bool) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let (n, k) = a.dims2()?;
        let (br, bc) = b.dims2()?;
        let (kb, m) = if transpose_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(dim_err!(
                "matmul inner dimensions differ: lhs cols {k}, rhs {} {kb}",
                if transpose_b { "cols" } else { "rows" }
            ));
        }
        let mut out = Tensor::zeros(&[n, m]);
        gemm(a.data(), false, b.data(), transpose_b, out.data_mut(), n, k, m, false);
        self.graph.add_flops(2 * (n * k * m) as u64);
        Ok(self.graph.op(out, &[self, other], move |g, need| {
            let da = need[0].then(|| {
                let mut da = Tensor::zeros(&[n, k]);
                // dA = dC * B^T (or dC * B when b was transposed)
                gemm(g.data(), false, b.data(), !transpose_b, da.data_mut(), n, m, k, false);
                da
            });
            let db = need[1].then(|| {
                if transpose_b {
                    // b is [M, K]: dB = dC^T * A
                    let mut db = Tensor::zeros(&[m, k]);
                    gemm(g.data(), true, a.data(), false, db.data_mut(), m, n, k, false);
                    db
                } else {
                    let mut db = Tensor::zeros(&[k, m]);
                    gemm(a.data(), true, g.data(), false, db.data_mut(), k, n, m, false);
                    db
                }
            });
            vec![da, db]
        }))
    }

    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul_t(other, false)
    }

    /// `x [N, in] W^T + b` with `W [out, in]`.
    pub fn linear(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let y = self.matmul_t(weight, true)?;
        match bias {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }

    /// Add a `[D]` vector to every row of a `[N, D]` matrix.
    pub fn add_row(self, row: Var<'g, T>) -> Result<Var<'g, T>> {
        let x = self.value();
        let r = row.value();
        let (n, d) = x.dims2()?;
        if r.shape() != [d] {
            return Err(dim_err!("row vector {:?} does not match width {d}", r.shape()));
        }
        let mut out = (*x).clone();
        for chunk in out.data_mut().chunks_mut(d) {
            for (o, &v) in chunk.iter_mut().zip(r.data()) {
                *o += v;
            }
        }
        self.graph.add_flops((n * d) as u64);
        Ok(self.graph.op(out, &[self, row], move |g, need| {
            let dr = need[1].then(|| {
                let mut acc = vec![T::zero(); d];
                for chunk in g.data().chunks(d) {
                    for (a, &v) in acc.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                Tensor::from_vec(acc)
            });
            vec![Some(g.clone()), dr]
        }))
    }

    /// Softmax over contiguous groups of `width` elements along the last axis.
    pub fn softmax_groups(self, width: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let last = *x.shape().last().unwrap_or(&0);
        if width == 0 || last % width != 0 {
            return Err(dim_err!("softmax group width {width} does not divide last axis {last}"));
        }
        let mut out = (*x).clone();
        for chunk in out.data_mut().chunks_mut(width) {
            softmax_in_place(chunk);
        }
        let y = out.clone();
        self.graph.add_flops(4 * out.len() as u64);
        Ok(self.graph.op(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(y.shape());
            for ((dc, gc), yc) in dx
                .data_mut()
                .chunks_mut(width)
                .zip(g.data().chunks(width))
                .zip(y.data().chunks(width))
            {
                let dot = gc.iter().zip(yc).fold(T::zero(), |a, (&gv, &yv)| a + gv * yv);
                for ((d, &gv), &yv) in dc.iter_mut().zip(gc).zip(yc) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Row-wise softmax of a `[N, D]` matrix.
    pub fn softmax_rows(self) -> Result<Var<'g, T>> {
        let (_, d) = self.dims2()?;
        self.softmax_groups(d)
    }

    pub fn transpose(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let (n, d) = x.dims2()?;
        let out = transpose_data(&x, n, d);
        Ok(self
            .graph
            .op(out, &[self], move |g, _| vec![Some(transpose_data(g, d, n))]))
    }

    /// Columns `start..start+len` of a `[N, D]` matrix.
    pub fn narrow_cols(self, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let (n, d) = x.dims2()?;
        if start + len > d {
            return Err(dim_err!("column range {start}..{} exceeds width {d}", start + len));
        }
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&x.data()[r * d + start..r * d + start + len]);
        }
        let out = Tensor::from_parts(vec![n, len], data);
        Ok(self.graph.op(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&[n, d]);
            for r in 0..n {
                dx.data_mut()[r * d + start..r * d + start + len]
                    .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            vec![Some(dx)]
        }))
    }

    /// Rows selected by index (repeats allowed).
    pub fn select_rows(self, idx: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let (n, d) = x.dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(dim_err!("row index {bad} out of range for {n} rows"));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
        }
        let idx = idx.to_vec();
        let out = Tensor::from_parts(vec![idx.len(), d], data);
        Ok(self.graph.op(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&[n, d]);
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..d {
                    dx.data_mut()[i * d + j] += g.data()[k * d + j];
                }
            }
            vec![Some(dx)]
        }))
    }
}

fn transpose_data<T: Elem>(x: &Tensor<T>, n: usize, d: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); n * d];
    for r in 0..n {
        for c in 0..d {
            out[c * n + r] = x.data()[r * d + c];
        }
    }
    Tensor::from_parts(vec![d, n], out)
}

/// Concatenate `[N, D_i]` matrices along columns.
pub fn concat_cols<'g, T: Elem>(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let first = parts
        .first()
        .ok_or_else(|| dim_err!("cannot concatenate zero matrices"))?;
    let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let n = vals[0].dims2()?.0;
    let mut widths = Vec::with_capacity(vals.len());
    for v in &vals {
        let (r, c) = v.dims2()?;
        if r != n {
            return Err(dim_err!("column concat: row counts {r} and {n} differ"));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(n * total);
    for r in 0..n {
        for (v, &w) in vals.iter().zip(&widths) {
            data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
        }
    }
    let out = Tensor::from_parts(vec![n, total], data);
    Ok(first.graph.op(out, parts, move |g, need| {
        let mut off = 0;
        widths
            .iter()
            .zip(need)
            .map(|(&w, &nd)| {
                let res = nd.then(|| {
                    let mut d = Vec::with_capacity(n * w);
                    for r in 0..n {
                        d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    Tensor::from_parts(vec![n, w], d)
                });
                off += w;
                res
            })
            .collect()
    }))
}


/// Concatenate along the leading axis (rows of matrices, items of batches).
pub fn concat0<'g, T: Elem>(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let first = parts
        .first()
        .ok_or_else(|| dim_err!("cannot concatenate zero tensors"))?;
    let vals: Vec<Tensor<T>> = parts.iter().map(|p| (*p.value()).clone()).collect();
    let sizes: Vec<usize> = vals.iter().map(|v| v.len()).collect();
    let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
    let out = Tensor::cat0(&vals)?;
    Ok(first.graph.op(out, parts, move |g, need| {
        let mut off = 0;
        sizes
            .iter()
            .zip(&shapes)
            .zip(need)
            .map(|((&n, s), &nd)| {
                let res = nd.then(|| Tensor::from_parts(s.clone(), g.data()[off..off + n].to_vec()));
                off += n;
                res
            })
            .collect()
    }))
}

impl<'g, T: Elem> Var<'g, T> {
    /// Leading-axis slice `start..start+len`.
    pub fn narrow0(self, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let n = *x.shape().first().unwrap_or(&0);
        if start + len > n {
            return Err(dim_err!("range {start}..{} exceeds leading axis {n}", start + len));
        }
        let shape = x.shape().to_vec();
        let inner = x.len() / n.max(1);
        let out = x.narrow0(start, len);
        Ok(self.graph.op(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&shape);
            dx.data_mut()[start * inner..(start + len) * inner].copy_from_slice(g.data());
            vec![Some(dx)]
        }))
    }
}
