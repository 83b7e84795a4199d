//! Model assembly, checkpoints and the output-head swap between training
//! phases.

pub mod checkpoint;
pub mod network;
pub mod spec;

use rand_distr::{Distribution, Normal};

pub use checkpoint::{Checkpoint, PhaseTag};
pub use network::{backward, forward_logits, forward_to_layer, forward_train, ForwardTrace};
pub use spec::{LayerKind, LayerSpec, ModelSpec, ParamShape};

use crate::error::{Error, Result};
use crate::nnkernel::{ParamEntry, ParamSet, Tensor};
use crate::rng::{derive_seed, rng_from_seed, rng_state_bytes, SeededRng};
use crate::taxonomy::LabelMap;

fn gaussian(shape: &[usize], std: f64, rng: &mut SeededRng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape matches")
}

fn layer_of(param_name: &str) -> &str {
    param_name.rsplit_once('.').map(|(l, _)| l).unwrap_or(param_name)
}

/// Fresh model: Gaussian weights (`spec.init_std`), zero biases, iteration 0.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Checkpoint> {
    spec.validate()?;
    let mut init_rng = rng_from_seed(derive_seed(seed, "init", 0));
    let mut params = ParamSet::new();
    for p in spec.param_shapes()? {
        let weight = if p.name.ends_with(".bias") {
            Tensor::zeros(&p.shape)
        } else {
            gaussian(&p.shape, spec.init_std, &mut init_rng)
        };
        let mut e = ParamEntry::new(p.name.clone(), weight);
        e.lr_mult = spec.lr_mult_map.get(layer_of(&p.name)).copied().unwrap_or(1.0);
        params.push(e)?;
    }
    let train_rng = rng_from_seed(derive_seed(seed, "train", 0));
    Ok(Checkpoint {
        spec: spec.clone(),
        params,
        iteration: 0,
        phase_tag: PhaseTag::Basic,
        rng_state: rng_state_bytes(&train_rng),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadInit {
    Random,
    Replicate,
}

/// Swap the output head for one with `n_new_outputs` units.
///
/// In `Replicate` mode subordinate output `j` starts as an exact copy of the
/// weight row and bias of basic output `basic_index(j)`. Body parameters and
/// their momentum are carried over untouched; the new head's momentum is zero.
pub fn replace_head(
    ckpt: &Checkpoint,
    n_new_outputs: usize,
    init: HeadInit,
    labelmap: &LabelMap,
    seed: u64,
) -> Result<Checkpoint> {
    if n_new_outputs == 0 {
        return Err(Error::InvalidArgument("new head needs at least one output".into()));
    }
    let head = ckpt.spec.head().name.clone();
    let (w_name, b_name) = (format!("{head}.weight"), format!("{head}.bias"));
    let old_w = &ckpt.params.get(&w_name).ok_or_else(|| Error::Validation(format!("missing `{w_name}`")))?.weight;
    let old_b = &ckpt.params.get(&b_name).ok_or_else(|| Error::Validation(format!("missing `{b_name}`")))?.weight;
    let (old_units, width) = (old_w.shape()[0], old_w.shape()[1]);

    let (new_w, new_b) = match init {
        HeadInit::Replicate => {
            if old_units != labelmap.basic_names().len() || n_new_outputs != labelmap.sub_names().len() {
                return Err(Error::Validation(format!(
                    "replicate needs a {}-wide basic head and {} subordinate outputs; got head width {old_units} and {n_new_outputs} outputs",
                    labelmap.basic_names().len(),
                    labelmap.sub_names().len()
                )));
            }
            let mut w = Vec::with_capacity(n_new_outputs * width);
            let mut b = Vec::with_capacity(n_new_outputs);
            for basic in labelmap.sub_to_basic() {
                w.extend_from_slice(old_w.row(basic));
                b.push(old_b.data()[basic]);
            }
            (Tensor::from_vec(&[n_new_outputs, width], w)?, Tensor::from_vec(&[n_new_outputs], b)?)
        }
        HeadInit::Random => {
            let mut rng = rng_from_seed(derive_seed(seed, "head", 0));
            (gaussian(&[n_new_outputs, width], ckpt.spec.init_std, &mut rng), Tensor::zeros(&[n_new_outputs]))
        }
    };

    let mut spec = ckpt.spec.clone();
    spec.n_outputs = n_new_outputs;
    if let Some(LayerSpec { kind: LayerKind::Fc { units }, .. }) = spec.layers.last_mut() {
        *units = n_new_outputs;
    }
    let mut params = ParamSet::new();
    for e in ckpt.params.iter() {
        let replacement = if e.name == w_name {
            Some(&new_w)
        } else if e.name == b_name {
            Some(&new_b)
        } else {
            None
        };
        match replacement {
            Some(t) => {
                let mut fresh = ParamEntry::new(e.name.clone(), t.clone());
                fresh.lr_mult = e.lr_mult;
                params.push(fresh)?;
            }
            None => params.push(e.clone())?,
        }
    }
    let out = Checkpoint {
        spec,
        params,
        iteration: ckpt.iteration,
        phase_tag: ckpt.phase_tag.next(),
        rng_state: ckpt.rng_state.clone(),
    };
    out.check_shapes()?;
    Ok(out)
}

/// Give the first `prefix_count` conv layers learning-rate multiplier
/// `mult` and every other layer 1.0.
pub fn set_layer_lr_mults(ckpt: &Checkpoint, prefix_count: usize, mult: f64) -> Result<Checkpoint> {
    let convs: Vec<String> = ckpt.spec.conv_layer_names().into_iter().map(str::to_string).collect();
    if prefix_count > convs.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot lower {prefix_count} conv layers, model has {}",
            convs.len()
        )));
    }
    if !(mult >= 0.0 && mult.is_finite()) {
        return Err(Error::InvalidArgument(format!("lr multiplier {mult} must be non-negative")));
    }
    let lowered = &convs[..prefix_count];
    let mut out = ckpt.clone();
    out.spec.lr_mult_map = lowered.iter().map(|l| (l.clone(), mult)).collect();
    for e in out.params.iter_mut() {
        let layer = layer_of(&e.name);
        e.lr_mult = if lowered.iter().any(|l| l == layer) { mult } else { 1.0 };
    }
    Ok(out)
}

/// Eval-mode logits for a `[N, C, H, W]` batch.
pub fn forward_eval(ckpt: &Checkpoint, batch: &Tensor) -> Result<Tensor> {
    forward_logits(&ckpt.spec, &ckpt.params, batch)
}
