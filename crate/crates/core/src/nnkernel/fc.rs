//! Fully connected layer. Inputs of any rank are flattened to `[N, D]`.

use crate::error::{Error, Result};
use crate::nnkernel::linalg::{gemm, Op};
use crate::nnkernel::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct FcCache {
    input: Tensor,
    weight_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FcGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// `out = x·Wᵀ + b` with `weight: [units, D]`.
pub fn fc_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(Tensor, FcCache)> {
    if weight.rank() != 2 || input.rank() < 2 {
        return Err(Error::Shape(format!(
            "fc expects input [N,..] and weight [U,D], got {:?} and {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    let n = input.shape()[0];
    let d = input.len() / n;
    let (units, wd) = (weight.shape()[0], weight.shape()[1]);
    if wd != d || bias.shape() != [units] {
        return Err(Error::Shape(format!(
            "fc input {:?} (flattened width {d}) vs weight {:?} and bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, units]);
    for row in out.data_mut().chunks_exact_mut(units) {
        row.copy_from_slice(bias.data());
    }
    gemm(n, d, units, input.data(), Op::N, weight.data(), Op::T, 1.0, out.data_mut());
    Ok((out, FcCache { input: input.clone(), weight_shape: weight.shape().to_vec() }))
}

pub fn fc_backward(cache: &FcCache, weight: &Tensor, upstream: &Tensor) -> Result<FcGrads> {
    let n = cache.input.shape()[0];
    let d = cache.input.len() / n;
    let units = cache.weight_shape[0];
    if weight.shape() != cache.weight_shape.as_slice() || upstream.shape() != [n, units] {
        return Err(Error::Shape(format!(
            "fc backward: upstream {:?} / weight {:?} vs cached input {:?} and weight {:?}",
            upstream.shape(),
            weight.shape(),
            cache.input.shape(),
            cache.weight_shape
        )));
    }
    let mut d_input = Tensor::zeros(cache.input.shape());
    gemm(n, units, d, upstream.data(), Op::N, weight.data(), Op::N, 0.0, d_input.data_mut());
    let mut d_weight = Tensor::zeros(weight.shape());
    gemm(units, n, d, upstream.data(), Op::T, cache.input.data(), Op::N, 0.0, d_weight.data_mut());
    let mut d_bias = Tensor::zeros(&[units]);
    for row in upstream.data().chunks_exact(units) {
        for (b, g) in d_bias.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok(FcGrads { input: d_input, weight: d_weight, bias: d_bias })
}
