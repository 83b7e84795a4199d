//! Central finite-difference gradient checks shared by the `gradcheck` and
//! `acceptance` targets.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use hiercurric::model::{backward, build_model, forward_to_layer, forward_train, LayerKind, ModelSpec};
use hiercurric::nnkernel::{
    conv2d_backward, conv2d_forward, dropout_backward, dropout_forward, fc_backward, fc_forward, maxpool_forward,
    pool_backward, relu_backward, relu_forward, softmax_xent, ConvGeometry, Mode, ParamSet, Tensor,
};
use hiercurric::rng::{rng_from_seed, SeededRng};

pub const EPS: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const MIN_COORDS: usize = 20;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub coords: usize,
    /// Number of entries in the checked tensor.
    pub len: usize,
    /// Coordinates passed over because the stencil crossed a kink.
    pub skipped: usize,
    pub max_rel: f64,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.max_rel < TOL
    }

    /// Whether the check covered `MIN_COORDS` coordinates, or the whole
    /// tensor when it is smaller.
    pub fn covered(&self) -> bool {
        self.coords >= MIN_COORDS.min(self.len)
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compare `analytic` with central differences of `f` around `x` on
/// `MIN_COORDS` random coordinates (all of them for smaller tensors).
pub fn check(name: &str, x: &Tensor, analytic: &Tensor, f: impl Fn(&Tensor) -> f64, rng: &mut SeededRng) -> GradReport {
    check_smooth(name, x, analytic, f, |_, _| true, rng)
}

/// [`check`] restricted to coordinates where `smooth(x+ε, x−ε)` holds, that
/// is where the function is differentiable across the whole stencil.
pub fn check_smooth(
    name: &str,
    x: &Tensor,
    analytic: &Tensor,
    f: impl Fn(&Tensor) -> f64,
    smooth: impl Fn(&Tensor, &Tensor) -> bool,
    rng: &mut SeededRng,
) -> GradReport {
    assert_eq!(x.shape(), analytic.shape(), "{name}");
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.shuffle(rng);
    let (mut coords, mut skipped, mut max_rel) = (0, 0, 0.0f64);
    for i in idx {
        if coords == MIN_COORDS {
            break;
        }
        let mut xp = x.clone();
        xp.data_mut()[i] += EPS;
        let mut xm = x.clone();
        xm.data_mut()[i] -= EPS;
        if !smooth(&xp, &xm) {
            skipped += 1;
            continue;
        }
        let numeric = (f(&xp) - f(&xm)) / (2.0 * EPS);
        max_rel = max_rel.max(rel_err(analytic.data()[i], numeric));
        coords += 1;
    }
    GradReport { name: name.to_string(), coords, len: x.len(), skipped, max_rel }
}

fn normal(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

/// Values at least `gap` away from zero, so no ±EPS step crosses the kink.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut SeededRng) -> Tensor {
    let mut t = normal(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + gap);
    }
    t
}

/// A shuffled ladder of distinct values with spacing `gap`.
fn distinct(shape: &[usize], gap: f64, rng: &mut SeededRng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * gap - n as f64 * gap / 2.0).collect();
    v.shuffle(rng);
    Tensor::from_vec(shape, v).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

pub fn conv_layer(seed: u64) -> Vec<GradReport> {
    let mut rng = rng_from_seed(seed);
    let geom = ConvGeometry { stride: 2, pad: 1, groups: 2 };
    let x = normal(&[2, 4, 7, 7], &mut rng);
    let w = normal(&[6, 2, 3, 3], &mut rng);
    let b = normal(&[6], &mut rng);
    let (y, cache) = conv2d_forward(&x, &w, &b, geom).unwrap();
    let r = normal(y.shape(), &mut rng);
    let g = conv2d_backward(&cache, &w, &r).unwrap();
    let loss = |x: &Tensor, w: &Tensor, b: &Tensor| dot(&conv2d_forward(x, w, b, geom).unwrap().0, &r);
    vec![
        check("conv input", &x, &g.input, |t| loss(t, &w, &b), &mut rng),
        check("conv kernels", &w, &g.kernels, |t| loss(&x, t, &b), &mut rng),
        check("conv bias", &b, &g.bias, |t| loss(&x, &w, t), &mut rng),
    ]
}

pub fn fc_layer(seed: u64) -> Vec<GradReport> {
    let mut rng = rng_from_seed(seed);
    let x = normal(&[3, 2, 3, 3], &mut rng);
    let w = normal(&[5, 18], &mut rng);
    let b = normal(&[5], &mut rng);
    let (y, cache) = fc_forward(&x, &w, &b).unwrap();
    let r = normal(y.shape(), &mut rng);
    let g = fc_backward(&cache, &w, &r).unwrap();
    let loss = |x: &Tensor, w: &Tensor, b: &Tensor| dot(&fc_forward(x, w, b).unwrap().0, &r);
    vec![
        check("fc input", &x, &g.input, |t| loss(t, &w, &b), &mut rng),
        check("fc weight", &w, &g.weight, |t| loss(&x, t, &b), &mut rng),
        check("fc bias", &b, &g.bias, |t| loss(&x, &w, t), &mut rng),
    ]
}

pub fn relu_layer(seed: u64) -> Vec<GradReport> {
    let mut rng = rng_from_seed(seed);
    let x = away_from_zero(&[2, 3, 4, 4], 4.0 * EPS, &mut rng);
    let (y, cache) = relu_forward(&x);
    let r = normal(y.shape(), &mut rng);
    let g = relu_backward(&cache, &r).unwrap();
    vec![check("relu input", &x, &g, |t| dot(&relu_forward(t).0, &r), &mut rng)]
}

pub fn pool_layer(seed: u64) -> Vec<GradReport> {
    let mut rng = rng_from_seed(seed);
    // Overlapping 3/2 windows, as in the large model.
    let x = distinct(&[2, 2, 7, 7], 10.0 * EPS, &mut rng);
    let (y, cache) = maxpool_forward(&x, 3, 2).unwrap();
    let r = normal(y.shape(), &mut rng);
    let g = pool_backward(&cache, &r).unwrap();
    vec![check("maxpool input", &x, &g, |t| dot(&maxpool_forward(t, 3, 2).unwrap().0, &r), &mut rng)]
}

pub fn dropout_layer(seed: u64) -> Vec<GradReport> {
    let mut rng = rng_from_seed(seed);
    let x = normal(&[4, 16], &mut rng);
    let fwd = |t: &Tensor| dropout_forward(t, 0.5, Mode::Train, &mut rng_from_seed(seed + 1)).unwrap();
    let (y, cache) = fwd(&x);
    let r = normal(y.shape(), &mut rng);
    let g = dropout_backward(&cache, &r).unwrap();
    vec![check("dropout input", &x, &g, |t| dot(&fwd(t).0, &r), &mut rng)]
}

pub fn softmax_loss(seed: u64) -> Vec<GradReport> {
    let mut rng = rng_from_seed(seed);
    let x = normal(&[5, 7], &mut rng).reshape(&[5, 7]).unwrap();
    let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..7)).collect();
    let (_, g) = softmax_xent(&x, &labels).unwrap();
    vec![check("softmax cross-entropy logits", &x, &g, |t| softmax_xent(t, &labels).unwrap().0, &mut rng)]
}

/// ReLU sign patterns and max-pool winners of every nonlinearity.
fn kink_pattern(spec: &ModelSpec, params: &ParamSet, x: &Tensor) -> Vec<usize> {
    let shapes: BTreeMap<String, Vec<usize>> = spec.shape_chain().unwrap().into_iter().collect();
    let n = x.shape()[0];
    let mut out = Vec::new();
    for l in &spec.layers {
        match l.kind {
            LayerKind::Relu => {
                let a = forward_to_layer(spec, params, x, &l.name).unwrap();
                out.extend(a.data().iter().map(|&v| (v > 0.0) as usize));
            }
            LayerKind::MaxPool { window, stride } => {
                let prev = &spec.layers[spec.layers.iter().position(|m| m.name == l.name).unwrap() - 1].name;
                let mut shape = vec![n];
                shape.extend(&shapes[prev]);
                let a = forward_to_layer(spec, params, x, prev).unwrap().reshape(&shape).unwrap();
                out.extend(maxpool_forward(&a, window, stride).unwrap().1.argmax());
            }
            _ => {}
        }
    }
    out
}

/// Every parameter tensor and the input of the desk layer stack at toy
/// input size, dropout active with a fixed mask.
pub fn desk_network(seed: u64) -> Vec<GradReport> {
    let mut rng = rng_from_seed(seed);
    let spec = ModelSpec { init_std: 0.1, ..ModelSpec::desk_with_input([3, 8, 8], 5) };
    let mut params = build_model(&spec, seed).unwrap().params;
    for e in params.iter_mut() {
        if e.name.ends_with(".bias") {
            e.weight = Tensor::from_vec(e.weight.shape(), (0..e.weight.len()).map(|_| rng.random::<f64>() * 0.2 - 0.1).collect())
                .unwrap();
        }
    }
    let x = normal(&[1, 3, 8, 8], &mut rng);
    let labels = [3usize];
    let mask_seed = seed + 17;
    let loss = |params: &ParamSet, x: &Tensor| {
        let (logits, _) = forward_train(&spec, params, x, None, &mut rng_from_seed(mask_seed)).unwrap();
        softmax_xent(&logits, &labels).unwrap().0
    };
    let (logits, trace) = forward_train(&spec, &params, &x, None, &mut rng_from_seed(mask_seed)).unwrap();
    let (_, d_logits) = softmax_xent(&logits, &labels).unwrap();
    let mut grads = params.clone();
    grads.zero_grads();
    let d_input = backward(&spec, &mut grads, &trace, &d_logits).unwrap();
    let base = kink_pattern(&spec, &params, &x);

    let smooth_x = |xp: &Tensor, xm: &Tensor| kink_pattern(&spec, &params, xp) == base && kink_pattern(&spec, &params, xm) == base;
    let mut out = vec![check_smooth("desk net input", &x, &d_input, |t| loss(&params, t), smooth_x, &mut rng)];
    for (i, e) in grads.iter().enumerate() {
        let with = |t: &Tensor| {
            let mut p = params.clone();
            p.entry_mut(i).weight = t.clone();
            p
        };
        let f = |t: &Tensor| loss(&with(t), &x);
        let smooth = |tp: &Tensor, tm: &Tensor| kink_pattern(&spec, &with(tp), &x) == base && kink_pattern(&spec, &with(tm), &x) == base;
        out.push(check_smooth(&format!("desk net {}", e.name), &params.entry(i).weight, &e.grad, f, smooth, &mut rng));
    }
    out
}

pub fn full_suite() -> Vec<GradReport> {
    let mut all = Vec::new();
    all.extend(conv_layer(1));
    all.extend(fc_layer(2));
    all.extend(relu_layer(3));
    all.extend(pool_layer(4));
    all.extend(dropout_layer(5));
    all.extend(softmax_loss(6));
    all.extend(desk_network(7));
    all
}
