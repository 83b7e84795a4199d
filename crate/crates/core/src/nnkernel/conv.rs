//! 2-D convolution (cross-correlation, no kernel flip) via im2col + gemm.

use crate::error::{Error, Result};
use crate::nnkernel::linalg::{gemm, Op};
use crate::nnkernel::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    /// Channel groups; input and output channels are split evenly.
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, pad: usize) -> Self {
        ConvGeometry { stride, pad, groups: 1 }
    }
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry::new(1, 0)
    }
}

/// Output spatial extent, or `None` when the kernel does not fit.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    input: Tensor,
    kernel_shape: Vec<usize>,
    geom: ConvGeometry,
    out_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

struct Dims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cg: usize,
    kg: usize,
}

fn check_dims(input: &[usize], kernels: &[usize], bias: &[usize], geom: ConvGeometry) -> Result<Dims> {
    if input.len() != 4 || kernels.len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d expects input [N,C,H,W] and kernels [K,C,kh,kw], got {input:?} and {kernels:?}"
        )));
    }
    let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
    let (k, ck, kh, kw) = (kernels[0], kernels[1], kernels[2], kernels[3]);
    let g = geom.groups;
    if g == 0 || c % g != 0 || k % g != 0 || ck * g != c {
        return Err(Error::Shape(format!(
            "conv2d channels: input {input:?} vs kernels {kernels:?} with {g} group(s)"
        )));
    }
    if bias != [k] {
        return Err(Error::Shape(format!("conv2d bias {bias:?} vs kernels {kernels:?}")));
    }
    let oh = conv_output_dim(h, kh, geom.stride, geom.pad);
    let ow = conv_output_dim(w, kw, geom.stride, geom.pad);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(Dims { n, c, h, w, k, kh, kw, oh, ow, cg: ck, kg: k / g }),
        _ => Err(Error::Shape(format!(
            "conv2d kernel {kernels:?} (stride {}, pad {}) does not fit input {input:?}",
            geom.stride, geom.pad
        ))),
    }
}

/// Unfold channels `c0..c0+d.cg` of one image into a `[cg·kh·kw, oh·ow]` matrix.
fn im2col(img: &[f64], d: &Dims, c0: usize, geom: ConvGeometry, col: &mut [f64]) {
    let plane = d.oh * d.ow;
    let (s, p) = (geom.stride as isize, geom.pad as isize);
    for cc in 0..d.cg {
        let chan = &img[(c0 + cc) * d.h * d.w..(c0 + cc + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = &mut col[((cc * d.kh + i) * d.kw + j) * plane..][..plane];
                for y in 0..d.oh {
                    let iy = y as isize * s + i as isize - p;
                    let dst = &mut row[y * d.ow..(y + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &chan[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (x, v) in dst.iter_mut().enumerate() {
                        let ix = x as isize * s + j as isize - p;
                        *v = if ix < 0 || ix >= d.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Inverse of [`im2col`]: scatter-add a column matrix back onto image channels.
fn col2im(col: &[f64], d: &Dims, c0: usize, geom: ConvGeometry, img: &mut [f64]) {
    let plane = d.oh * d.ow;
    let (s, p) = (geom.stride as isize, geom.pad as isize);
    for cc in 0..d.cg {
        let chan = &mut img[(c0 + cc) * d.h * d.w..(c0 + cc + 1) * d.h * d.w];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = &col[((cc * d.kh + i) * d.kw + j) * plane..][..plane];
                for y in 0..d.oh {
                    let iy = y as isize * s + i as isize - p;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for x in 0..d.ow {
                        let ix = x as isize * s + j as isize - p;
                        if ix >= 0 && ix < d.w as isize {
                            chan[iy as usize * d.w + ix as usize] += row[y * d.ow + x];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    geom: ConvGeometry,
) -> Result<(Tensor, ConvCache)> {
    let d = check_dims(input.shape(), kernels.shape(), bias.shape(), geom)?;
    let plane = d.oh * d.ow;
    let patch = d.cg * d.kh * d.kw;
    let out_shape = vec![d.n, d.k, d.oh, d.ow];
    let mut out = Tensor::zeros(&out_shape);
    let mut col = vec![0.0; patch * plane];
    let img_len = d.c * d.h * d.w;
    for n in 0..d.n {
        let img = &input.data()[n * img_len..(n + 1) * img_len];
        let out_n = &mut out.data_mut()[n * d.k * plane..(n + 1) * d.k * plane];
        for g in 0..geom.groups {
            im2col(img, &d, g * d.cg, geom, &mut col);
            let wg = &kernels.data()[g * d.kg * patch..(g + 1) * d.kg * patch];
            let og = &mut out_n[g * d.kg * plane..(g + 1) * d.kg * plane];
            for (k, chunk) in og.chunks_exact_mut(plane).enumerate() {
                chunk.fill(bias.data()[g * d.kg + k]);
            }
            gemm(d.kg, patch, plane, wg, Op::N, &col, Op::N, 1.0, og);
        }
    }
    let cache = ConvCache {
        input: input.clone(),
        kernel_shape: kernels.shape().to_vec(),
        geom,
        out_shape: out_shape.clone(),
    };
    Ok((out, cache))
}

pub fn conv2d_backward(cache: &ConvCache, kernels: &Tensor, upstream: &Tensor) -> Result<ConvGrads> {
    if kernels.shape() != cache.kernel_shape.as_slice() {
        return Err(Error::Shape(format!(
            "conv2d backward: kernels {:?} vs cached {:?}",
            kernels.shape(),
            cache.kernel_shape
        )));
    }
    if upstream.shape() != cache.out_shape.as_slice() {
        return Err(Error::Shape(format!(
            "conv2d backward: upstream {:?} vs cached output {:?}",
            upstream.shape(),
            cache.out_shape
        )));
    }
    let geom = cache.geom;
    let d = check_dims(cache.input.shape(), kernels.shape(), &[kernels.shape()[0]], geom)?;
    let plane = d.oh * d.ow;
    let patch = d.cg * d.kh * d.kw;
    let img_len = d.c * d.h * d.w;
    let mut d_input = Tensor::zeros(cache.input.shape());
    let mut d_kernels = Tensor::zeros(kernels.shape());
    let mut d_bias = Tensor::zeros(&[d.k]);
    let mut col = vec![0.0; patch * plane];
    let mut d_col = vec![0.0; patch * plane];
    for n in 0..d.n {
        let img = &cache.input.data()[n * img_len..(n + 1) * img_len];
        let up_n = &upstream.data()[n * d.k * plane..(n + 1) * d.k * plane];
        for (k, chunk) in up_n.chunks_exact(plane).enumerate() {
            d_bias.data_mut()[k] += chunk.iter().sum::<f64>();
        }
        for g in 0..geom.groups {
            let up_g = &up_n[g * d.kg * plane..(g + 1) * d.kg * plane];
            im2col(img, &d, g * d.cg, geom, &mut col);
            let dw = &mut d_kernels.data_mut()[g * d.kg * patch..(g + 1) * d.kg * patch];
            gemm(d.kg, plane, patch, up_g, Op::N, &col, Op::T, 1.0, dw);
            let wg = &kernels.data()[g * d.kg * patch..(g + 1) * d.kg * patch];
            gemm(patch, d.kg, plane, wg, Op::T, up_g, Op::N, 0.0, &mut d_col);
            let dimg = &mut d_input.data_mut()[n * img_len..(n + 1) * img_len];
            col2im(&d_col, &d, g * d.cg, geom, dimg);
        }
    }
    Ok(ConvGrads { input: d_input, kernels: d_kernels, bias: d_bias })
}
