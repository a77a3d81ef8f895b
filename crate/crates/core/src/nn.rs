//! Named parameter storage, the per-pass parameter binding context, and the
//! small layers (conv units, linear, layer norm) everything else is built from.

use std::cell::RefCell;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, ConvSpec, Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::ops::{BnParams, BN_EPS};
use crate::tensor::{Elem, Tensor};

/// How the optimizer treats a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Trainable, with weight decay.
    Weight,
    /// Trainable, no weight decay (biases, norm affine terms, embeddings).
    NoDecay,
    /// Not trained by gradient (batch-norm running statistics).
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

#[derive(Clone, Debug)]
pub struct Param<T: Elem = f64> {
    pub value: Arc<Tensor<T>>,
    pub kind: ParamKind,
}

/// Ordered map from parameter name to tensor.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Elem = f64> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Elem> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) {
        self.params.insert(
            name.into(),
            Param {
                value: Arc::new(value),
                kind,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Replace the value of an existing parameter, keeping its kind.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {name}: shape {:?} cannot take {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Remove every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn get_index_mut(&mut self, i: usize) -> Option<(&String, &mut Param<T>)> {
        self.params.get_index_mut(i).map(|(k, v)| (&*k, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<U: Elem>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: Arc::new(p.value.cast()),
                            kind: p.kind,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Binds stored parameters to graph leaves for one forward pass.
pub struct Ctx<'g, T: Elem = f64> {
    pub graph: &'g Graph<T>,
    pub store: &'g ParamStore<T>,
    /// Training mode: batch statistics in batch norm, gradients on trainable
    /// parameters.
    pub train: bool,
    leaves: RefCell<Vec<Option<Var<'g, T>>>>,
    bn_updates: RefCell<Vec<(String, BatchStats)>>,
}

impl<'g, T: Elem> Ctx<'g, T> {
    pub fn new(graph: &'g Graph<T>, store: &'g ParamStore<T>, train: bool) -> Self {
        Ctx {
            graph,
            store,
            train,
            leaves: RefCell::new(vec![None; store.len()]),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    /// Leaf for the named parameter (created on first use).
    pub fn p(&self, name: &str) -> Result<Var<'g, T>> {
        let idx = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))?;
        if let Some(v) = self.leaves.borrow()[idx] {
            return Ok(v);
        }
        let (_, param) = self.store.params.get_index(idx).expect("index in range");
        let v = self
            .graph
            .leaf_arc(param.value.clone(), self.train && param.kind.trainable());
        self.leaves.borrow_mut()[idx] = Some(v);
        Ok(v)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'g, T> {
        self.graph.constant(t)
    }

    pub(crate) fn record_bn(&self, prefix: &str, stats: BatchStats) {
        self.bn_updates.borrow_mut().push((prefix.to_string(), stats));
    }

    pub fn take_bn_updates(&self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }

    /// Gradients of every bound trainable parameter, indexed by store position.
    pub fn param_grads(&self, grads: &Grads<T>) -> Vec<(usize, Tensor<T>)> {
        self.leaves
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| grads.get(v).map(|g| (i, g.clone()))))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Act {
    Silu,
    Relu,
    Identity,
}

impl Act {
    pub fn apply<'g, T: Elem>(self, x: Var<'g, T>) -> Var<'g, T> {
        match self {
            Act::Silu => x.silu(),
            Act::Relu => x.relu(),
            Act::Identity => x,
        }
    }
}

/// Batch norm over the named parameters `{prefix}.gamma/.beta/.running_mean/.running_var`.
pub fn batch_norm<'g, T: Elem>(ctx: &Ctx<'g, T>, prefix: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let gamma = ctx.p(&format!("{prefix}.gamma"))?;
    let beta = ctx.p(&format!("{prefix}.beta"))?;
    if ctx.train {
        let (y, stats) = x.batch_norm_train(gamma, beta, BN_EPS)?;
        ctx.record_bn(prefix, stats);
        return Ok(y);
    }
    let mean = ctx.store.tensor(&format!("{prefix}.running_mean"))?;
    let var = ctx.store.tensor(&format!("{prefix}.running_var"))?;
    let inv = var.map(|v| T::one() / (v + T::of(BN_EPS)).sqrt());
    let mu_inv = mean.zip_map(&inv, |m, i| m * i);
    let scale = gamma.mul(ctx.constant(inv))?;
    let shift = beta.sub(gamma.mul(ctx.constant(mu_inv))?)?;
    x.channel_affine(scale, shift)
}

/// Read a batch norm's inference parameters out of a store.
pub fn bn_params<T: Elem>(store: &ParamStore<T>, prefix: &str) -> Result<BnParams> {
    let v = |s: &str| -> Result<Vec<f64>> {
        Ok(store
            .tensor(&format!("{prefix}.{s}"))?
            .data()
            .iter()
            .map(|x| x.f64())
            .collect())
    };
    Ok(BnParams {
        gamma: v("gamma")?,
        beta: v("beta")?,
        mu: v("running_mean")?,
        sigma2: v("running_var")?,
        eps: BN_EPS,
    })
}

pub fn insert_bn(store: &mut ParamStore, prefix: &str, bn: &BnParams) {
    store.insert(format!("{prefix}.gamma"), Tensor::from_vec(bn.gamma.clone()), ParamKind::NoDecay);
    store.insert(format!("{prefix}.beta"), Tensor::from_vec(bn.beta.clone()), ParamKind::NoDecay);
    store.insert(format!("{prefix}.running_mean"), Tensor::from_vec(bn.mu.clone()), ParamKind::Buffer);
    store.insert(format!("{prefix}.running_var"), Tensor::from_vec(bn.sigma2.clone()), ParamKind::Buffer);
}

/// Convolution, optional batch norm, activation.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub name: String,
    pub spec: ConvSpec,
    pub bias: bool,
    pub bn: bool,
    pub act: Act,
}

impl ConvUnit {
    pub fn forward<'g, T: Elem>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let w = ctx.p(&format!("{}.w", self.name))?;
        let b = if self.bias {
            Some(ctx.p(&format!("{}.b", self.name))?)
        } else {
            None
        };
        let mut y = x.conv2d(w, b, self.spec)?;
        if self.bn {
            y = batch_norm(ctx, &format!("{}.bn", self.name), y)?;
        }
        Ok(self.act.apply(y))
    }
}

/// `x W^T + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub bias: bool,
}

impl Linear {
    pub fn forward<'g, T: Elem>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let w = ctx.p(&format!("{}.w", self.name))?;
        let b = if self.bias {
            Some(ctx.p(&format!("{}.b", self.name))?)
        } else {
            None
        };
        x.linear(w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
}

impl LayerNorm {
    pub fn forward<'g, T: Elem>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = ctx.p(&format!("{}.gamma", self.name))?;
        let b = ctx.p(&format!("{}.beta", self.name))?;
        x.layer_norm(g, b, 1e-5)
    }
}

/// Two-layer feed-forward block `Linear -> SiLU -> Linear`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn forward<'g, T: Elem>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.fc1.forward(ctx, x)?.silu();
        self.fc2.forward(ctx, h)
    }
}

/// Registers freshly initialised parameters.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    pub fn conv_unit(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: ConvSpec,
        bn: bool,
        act: Act,
    ) -> ConvUnit {
        let cig = cin / spec.groups;
        let fan_in = (cig * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        self.store.insert(
            format!("{name}.w"),
            Tensor::randn(&[cout, cig, k, k], std, self.rng),
            ParamKind::Weight,
        );
        let bias = !bn;
        if bias {
            self.store
                .insert(format!("{name}.b"), Tensor::zeros(&[cout]), ParamKind::NoDecay);
        } else {
            insert_bn(self.store, &format!("{name}.bn"), &BnParams::identity(cout));
        }
        ConvUnit {
            name: name.to_string(),
            spec,
            bias,
            bn,
            act,
        }
    }

    /// Linear layer with Xavier-uniform weights and zero bias.
    pub fn linear(&mut self, name: &str, din: usize, dout: usize, bias: bool) -> Linear {
        let a = (6.0 / (din + dout) as f64).sqrt();
        self.store.insert(
            format!("{name}.w"),
            Tensor::rand_uniform(&[dout, din], -a, a, self.rng),
            ParamKind::Weight,
        );
        if bias {
            self.store
                .insert(format!("{name}.b"), Tensor::zeros(&[dout]), ParamKind::NoDecay);
        }
        Linear {
            name: name.to_string(),
            bias,
        }
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> LayerNorm {
        self.store
            .insert(format!("{name}.gamma"), Tensor::ones(&[d]), ParamKind::NoDecay);
        self.store
            .insert(format!("{name}.beta"), Tensor::zeros(&[d]), ParamKind::NoDecay);
        LayerNorm {
            name: name.to_string(),
        }
    }

    pub fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> Ffn {
        Ffn {
            fc1: self.linear(&format!("{name}.fc1"), d, hidden, true),
            fc2: self.linear(&format!("{name}.fc2"), hidden, d, true),
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }
}

/// Run `f` on a non-recording graph in inference mode and return its value.
pub fn eval_with<T: Elem, F>(store: &ParamStore<T>, f: F) -> Result<Tensor<T>>
where
    F: for<'g> FnOnce(&Ctx<'g, T>) -> Result<Var<'g, T>>,
{
    let g = Graph::inference();
    let ctx = Ctx::new(&g, store, false);
    let y = f(&ctx)?;
    Ok((*y.value()).clone())
}
