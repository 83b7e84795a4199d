//! Forward and backward passes of a [`ModelSpec`] over a [`ParamSet`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::spec::{LayerKind, ModelSpec};
use crate::nnkernel::activation::{DropoutCache, ReluCache};
use crate::nnkernel::conv::ConvCache;
use crate::nnkernel::fc::FcCache;
use crate::nnkernel::pool::PoolCache;
use crate::nnkernel::{
    conv2d_backward, conv2d_forward, dropout_backward, dropout_forward, fc_backward, fc_forward,
    maxpool_forward, pool_backward, relu_backward, relu_forward, ConvGeometry, Mode, ParamSet,
    Tensor,
};

#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv(ConvCache),
    Pool(PoolCache),
    Relu(ReluCache),
    Dropout(DropoutCache),
    Fc(FcCache),
}

/// Cached state of one training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    caches: Vec<LayerCache>,
}

fn param<'a>(params: &'a ParamSet, layer: &str, what: &str) -> Result<&'a Tensor> {
    params
        .get(&format!("{layer}.{what}"))
        .map(|e| &e.weight)
        .ok_or_else(|| Error::Validation(format!("missing parameter `{layer}.{what}`")))
}

fn check_input(spec: &ModelSpec, batch: &Tensor) -> Result<()> {
    if batch.rank() != 4 || batch.shape()[1..] != spec.input {
        return Err(Error::Shape(format!(
            "batch {:?} does not match model input [N, {}, {}, {}]",
            batch.shape(),
            spec.input[0],
            spec.input[1],
            spec.input[2]
        )));
    }
    Ok(())
}

/// Run layers `0..=stop` (all when `stop` is `None`). `dropout_override`
/// replaces every dropout layer's rate when given.
fn run<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Tensor,
    mode: Mode,
    dropout_override: Option<f64>,
    rng: &mut R,
    stop: Option<usize>,
    mut record: Option<&mut Vec<LayerCache>>,
) -> Result<Tensor> {
    check_input(spec, batch)?;
    let last = stop.unwrap_or(spec.layers.len() - 1);
    let mut x = batch.clone();
    for l in &spec.layers[..=last] {
        let (y, cache) = match &l.kind {
            LayerKind::Conv { stride, pad, groups, .. } => {
                let geom = ConvGeometry { stride: *stride, pad: *pad, groups: *groups };
                let (y, c) = conv2d_forward(&x, param(params, &l.name, "weight")?, param(params, &l.name, "bias")?, geom)?;
                (y, LayerCache::Conv(c))
            }
            LayerKind::MaxPool { window, stride } => {
                let (y, c) = maxpool_forward(&x, *window, *stride)?;
                (y, LayerCache::Pool(c))
            }
            LayerKind::Relu => {
                let (y, c) = relu_forward(&x);
                (y, LayerCache::Relu(c))
            }
            LayerKind::Dropout { rate } => {
                let (y, c) = dropout_forward(&x, dropout_override.unwrap_or(*rate), mode, rng)?;
                (y, LayerCache::Dropout(c))
            }
            LayerKind::Fc { .. } => {
                let (y, c) = fc_forward(&x, param(params, &l.name, "weight")?, param(params, &l.name, "bias")?)?;
                (y, LayerCache::Fc(c))
            }
        };
        if let Some(rec) = record.as_deref_mut() {
            rec.push(cache);
        }
        x = y;
    }
    Ok(x)
}

/// Training-mode forward pass; returns logits and the trace for [`backward`].
pub fn forward_train<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Tensor,
    dropout_override: Option<f64>,
    rng: &mut R,
) -> Result<(Tensor, ForwardTrace)> {
    let mut caches = Vec::with_capacity(spec.layers.len());
    let logits = run(spec, params, batch, Mode::Train, dropout_override, rng, None, Some(&mut caches))?;
    Ok((logits, ForwardTrace { caches }))
}

/// Eval-mode logits. Dropout is the identity, so no randomness is consumed.
pub fn forward_logits(spec: &ModelSpec, params: &ParamSet, batch: &Tensor) -> Result<Tensor> {
    let mut rng = crate::rng::rng_from_seed(0);
    run(spec, params, batch, Mode::Eval, None, &mut rng, None, None)
}

/// Eval-mode activations at the output of `layer`, flattened to `[N, D]`.
pub fn forward_to_layer(spec: &ModelSpec, params: &ParamSet, batch: &Tensor, layer: &str) -> Result<Tensor> {
    let idx = spec
        .layers
        .iter()
        .position(|l| l.name == layer)
        .ok_or_else(|| Error::Validation(format!("unknown layer `{layer}`")))?;
    let mut rng = crate::rng::rng_from_seed(0);
    let out = run(spec, params, batch, Mode::Eval, None, &mut rng, Some(idx), None)?;
    let n = out.shape()[0];
    let d = out.len() / n;
    out.reshape(&[n, d])
}

/// Backpropagate `d_logits` through the trace, adding parameter gradients
/// into `params` and returning the gradient with respect to the input.
pub fn backward(spec: &ModelSpec, params: &mut ParamSet, trace: &ForwardTrace, d_logits: &Tensor) -> Result<Tensor> {
    if trace.caches.len() != spec.layers.len() {
        return Err(Error::Validation(format!(
            "trace holds {} layer caches, model has {} layers",
            trace.caches.len(),
            spec.layers.len()
        )));
    }
    let mut g = d_logits.clone();
    for (l, cache) in spec.layers.iter().zip(&trace.caches).rev() {
        g = match (&l.kind, cache) {
            (LayerKind::Conv { .. }, LayerCache::Conv(c)) => {
                let grads = conv2d_backward(c, param(params, &l.name, "weight")?, &g)?;
                accumulate(params, &l.name, &grads.kernels, &grads.bias);
                grads.input
            }
            (LayerKind::Fc { .. }, LayerCache::Fc(c)) => {
                let grads = fc_backward(c, param(params, &l.name, "weight")?, &g)?;
                accumulate(params, &l.name, &grads.weight, &grads.bias);
                grads.input
            }
            (LayerKind::MaxPool { .. }, LayerCache::Pool(c)) => pool_backward(c, &g)?,
            (LayerKind::Relu, LayerCache::Relu(c)) => relu_backward(c, &g)?,
            (LayerKind::Dropout { .. }, LayerCache::Dropout(c)) => dropout_backward(c, &g)?,
            _ => {
                return Err(Error::Validation(format!("cache kind does not match layer `{}`", l.name)))
            }
        };
    }
    Ok(g)
}

fn accumulate(params: &mut ParamSet, layer: &str, dw: &Tensor, db: &Tensor) {
    for (what, d) in [("weight", dw), ("bias", db)] {
        let e = params.get_mut(&format!("{layer}.{what}")).expect("looked up during forward");
        for (a, b) in e.grad.data_mut().iter_mut().zip(d.data()) {
            *a += b;
        }
    }
}
