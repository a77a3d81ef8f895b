//! Value-level tensor primitives: convolution, batch-norm folding,
//! bilinear sampling, softmax, pooling and channel shuffling.
//!
//! These wrap the differentiable operations of [`crate::autograd`] in a
//! non-recording graph, so both paths share one implementation.

use serde::{Deserialize, Serialize};

use crate::autograd::{bilinear_taps, softmax_in_place, ConvSpec, Graph};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Elem, Tensor};

/// Default batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Inference-time batch normalization parameters for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub eps: f64,
}

impl BnParams {
    /// `gamma = 1, beta = 0, mu = 0, sigma2 = 1`.
    pub fn identity(channels: usize) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mu: vec![0.0; channels],
            sigma2: vec![1.0; channels],
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.mu.len() != c || self.sigma2.len() != c {
            return Err(dim_err!(
                "batch norm parameter lengths differ: gamma {c}, beta {}, mu {}, sigma2 {}",
                self.beta.len(),
                self.mu.len(),
                self.sigma2.len()
            ));
        }
        if let Some((ch, v)) = self
            .sigma2
            .iter()
            .enumerate()
            .find(|(_, &v)| !(v + self.eps > 0.0))
        {
            return Err(Error::Domain(format!(
                "sigma2 + eps must be positive, channel {ch} has sigma2 = {v}, eps = {}",
                self.eps
            )));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` such that `bn(x) = scale * x + shift`.
    pub fn scale_shift(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self
            .gamma
            .iter()
            .zip(&self.sigma2)
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.mu)
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        (scale, shift)
    }
}

/// Plain convolution of concrete tensors.
pub fn conv2d<T: Elem>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    conv2d_grouped(input, kernel, bias, ConvSpec::new(stride, padding))
}

pub fn conv2d_grouped<T: Elem>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = Graph::<T>::inference();
    let x = g.constant(input.clone());
    let k = g.constant(kernel.clone());
    let b = bias.map(|b| g.constant(b.clone()));
    let y = x.conv2d(k, b, spec)?;
    Ok((*y.value()).clone())
}

/// Absorb a batch norm that follows a convolution into its kernel and bias.
pub fn fold_bn(kernel: &Tensor, bias: &[f64], bn: &BnParams) -> Result<(Tensor, Vec<f64>)> {
    bn.validate()?;
    let (co, ..) = kernel.dims4()?;
    if bn.channels() != co || bias.len() != co {
        return Err(dim_err!(
            "fold_bn: kernel has {co} out-channels, bias {} and batch norm {}",
            bias.len(),
            bn.channels()
        ));
    }
    let (scale, _) = bn.scale_shift();
    let per = kernel.len() / co.max(1);
    let mut k = kernel.clone();
    for (o, chunk) in k.data_mut().chunks_mut(per.max(1)).enumerate().take(co) {
        chunk.iter_mut().for_each(|v| *v *= scale[o]);
    }
    let b = (0..co)
        .map(|o| bn.beta[o] - bn.gamma[o] * bn.mu[o] / (bn.sigma2[o] + bn.eps).sqrt() + scale[o] * bias[o])
        .collect();
    Ok((k, b))
}

/// Bilinear read of a `[1, C, H, W]` map at normalized `(x, y)`; locations
/// outside the map contribute zero.
pub fn bilinear_sample<T: Elem>(feature: &Tensor<T>, x: f64, y: f64) -> Result<Vec<T>> {
    let (b, c, h, w) = feature.dims4()?;
    if b != 1 {
        return Err(dim_err!("bilinear_sample expects batch 1, got {b}"));
    }
    let (taps, _, _) = bilinear_taps(x, y, h, w);
    let mut out = vec![T::zero(); c];
    for (idx, tw) in taps {
        let Some(idx) = idx else { continue };
        for (ch, o) in out.iter_mut().enumerate() {
            *o += T::of(tw) * feature.data()[ch * h * w + idx];
        }
    }
    Ok(out)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut v = logits.to_vec();
    if !v.is_empty() {
        softmax_in_place(&mut v);
    }
    v
}

/// Spatial mean per `(batch, channel)`, shape `[B, C]`.
pub fn global_avg_pool<T: Elem>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let g = Graph::<T>::inference();
    Ok((*g.constant(x.clone()).global_avg_pool()?.value()).clone())
}

pub fn channel_shuffle<T: Elem>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let g = Graph::<T>::inference();
    Ok((*g.constant(x.clone()).channel_shuffle(groups)?.value()).clone())
}
