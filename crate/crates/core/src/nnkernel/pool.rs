use crate::error::{Error, Result};
use crate::nnkernel::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct PoolCache {
    input_shape: Vec<usize>,
    out_shape: Vec<usize>,
    /// Linear index into the input of each output cell's maximum.
    argmax: Vec<usize>,
}

impl PoolCache {
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

pub fn pool_output_dim(input: usize, window: usize, stride: usize) -> Option<usize> {
    if window == 0 || stride == 0 || input < window {
        return None;
    }
    Some((input - window) / stride + 1)
}

/// Max pooling over `window`×`window` cells. Ties go to the lowest linear index.
pub fn maxpool_forward(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, PoolCache)> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("maxpool expects [N,C,H,W], got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = match (pool_output_dim(h, window, stride), pool_output_dim(w, window, stride)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Shape(format!(
                "maxpool window {window} stride {stride} does not fit input {shape:?}"
            )))
        }
    };
    let out_shape = vec![n, c, oh, ow];
    let mut out = Tensor::zeros(&out_shape);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let x = input.data();
    let o = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best_idx = base + y * stride * w + xo * stride;
                let mut best = x[best_idx];
                for i in 0..window {
                    let row = base + (y * stride + i) * w + xo * stride;
                    for j in 0..window {
                        let v = x[row + j];
                        if v > best {
                            best = v;
                            best_idx = row + j;
                        }
                    }
                }
                let oi = (plane * oh + y) * ow + xo;
                o[oi] = best;
                argmax[oi] = best_idx;
            }
        }
    }
    Ok((out, PoolCache { input_shape: shape.to_vec(), out_shape, argmax }))
}

pub fn pool_backward(cache: &PoolCache, upstream: &Tensor) -> Result<Tensor> {
    if upstream.shape() != cache.out_shape.as_slice() {
        return Err(Error::Shape(format!(
            "maxpool backward: upstream {:?} vs cached output {:?}",
            upstream.shape(),
            cache.out_shape
        )));
    }
    let mut d_input = Tensor::zeros(&cache.input_shape);
    let d = d_input.data_mut();
    for (&idx, &g) in cache.argmax.iter().zip(upstream.data()) {
        d[idx] += g;
    }
    Ok(d_input)
}
