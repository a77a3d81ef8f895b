//! Central-difference verification of analytic gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max over all coordinates of all inputs of
/// `|analytic - numeric| / max(1, |analytic|)`.
///
/// `f` maps leaf variables (one per input, in order) to a scalar.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    let g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &leaves)?;
    let v = out.value();
    if v.len() != 1 || !v.all_finite() {
        return Err(Error::Evaluation(format!(
            "gradient check needs a finite scalar output, got shape {:?}",
            v.shape()
        )));
    }
    let grads = g.backward(out);
    let analytic: Vec<Tensor> = leaves.iter().map(|&l| grads.get_or_zeros(l)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let g = Graph::inference();
        let leaves: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&g, &leaves)?.value().data()[0];
        if !y.is_finite() {
            return Err(Error::Evaluation("non-finite output during finite differences".into()));
        }
        Ok(y)
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i].data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, input: &Tensor, h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(input), h)
}
