//! ReLU and inverted dropout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkernel::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct ReluCache {
    active: Vec<bool>,
    shape: Vec<usize>,
}

pub fn relu_forward(input: &Tensor) -> (Tensor, ReluCache) {
    let mut out = input.clone();
    let mut active = Vec::with_capacity(input.len());
    for v in out.data_mut() {
        let on = *v > 0.0;
        if !on {
            *v = 0.0;
        }
        active.push(on);
    }
    (out, ReluCache { active, shape: input.shape().to_vec() })
}

pub fn relu_backward(cache: &ReluCache, upstream: &Tensor) -> Result<Tensor> {
    if upstream.shape() != cache.shape.as_slice() {
        return Err(Error::Shape(format!(
            "relu backward: upstream {:?} vs cached {:?}",
            upstream.shape(),
            cache.shape
        )));
    }
    let mut g = upstream.clone();
    for (v, &on) in g.data_mut().iter_mut().zip(&cache.active) {
        if !on {
            *v = 0.0;
        }
    }
    Ok(g)
}

#[derive(Debug, Clone)]
pub struct DropoutCache {
    /// Per-unit multiplier (0 or 1/(1-rate)); `None` when the layer was an identity.
    scale: Option<Vec<f64>>,
    shape: Vec<usize>,
}

/// Inverted dropout: in training each unit is zeroed with probability `rate`
/// and survivors are scaled by `1/(1-rate)`; evaluation is the identity.
pub fn dropout_forward<R: Rng + ?Sized>(
    input: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor, DropoutCache)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} not in [0,1)")));
    }
    let shape = input.shape().to_vec();
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((input.clone(), DropoutCache { scale: None, shape }));
    }
    let keep = 1.0 / (1.0 - rate);
    let scale: Vec<f64> = (0..input.len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mut out = input.clone();
    for (v, s) in out.data_mut().iter_mut().zip(&scale) {
        *v *= s;
    }
    Ok((out, DropoutCache { scale: Some(scale), shape }))
}

pub fn dropout_backward(cache: &DropoutCache, upstream: &Tensor) -> Result<Tensor> {
    if upstream.shape() != cache.shape.as_slice() {
        return Err(Error::Shape(format!(
            "dropout backward: upstream {:?} vs cached {:?}",
            upstream.shape(),
            cache.shape
        )));
    }
    let mut g = upstream.clone();
    if let Some(scale) = &cache.scale {
        for (v, s) in g.data_mut().iter_mut().zip(scale) {
            *v *= s;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_clamps_and_masks_gradient() {
        let x = Tensor::from_vec(&[4], vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let (y, cache) = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 0.5, 2.0]);
        let g = relu_backward(&cache, &Tensor::full(&[4], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 1.0]);
        assert!(relu_backward(&cache, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn eval_mode_and_zero_rate_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let (y, _) = dropout_forward(&x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y, x);
        for mode in [Mode::Train, Mode::Eval] {
            let (y, _) = dropout_forward(&x, 0.0, mode, &mut rng).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn survivor_fraction_and_mean_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let x = Tensor::full(&[n], 1.0);
        let (y, _) = dropout_forward(&x, 0.5, Mode::Train, &mut rng).unwrap();
        let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        let mean = y.data().iter().sum::<f64>() / n as f64;
        assert!((survivors - 0.5).abs() <= 0.01, "survivor fraction {survivors}");
        assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn backward_reuses_the_forward_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::full(&[50], 1.0);
        let (y, cache) = dropout_forward(&x, 0.3, Mode::Train, &mut rng).unwrap();
        let g = dropout_backward(&cache, &Tensor::full(&[50], 1.0)).unwrap();
        assert_eq!(g, y);
    }

    #[test]
    fn rate_one_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(dropout_forward(&Tensor::zeros(&[1]), 1.0, Mode::Train, &mut rng).is_err());
    }
}
