//! Per-sample forward and backward kernels.
//!
//! Weight layouts:
//!
//! | layer            | weight                          | bias      |
//! |------------------|---------------------------------|-----------|
//! | conv             | `[out][in][k][k]`               | `[out]`   |
//! | conv_transpose   | `[in][out][k][k]`               | `[out]`   |
//! | channelwise_fc   | `[channel][hw_out][hw_in]`      | `[c][hw]` |
//! | dense            | `[out][in]`                     | `[out]`   |

use super::spec::{Activation, LayerSpec};
use super::LayerParams;
use crate::tensor::{Shape, Tensor};

/// Output positions `o` in `0..out_len` for which `o * stride + offset - pad`
/// lands inside `0..in_len`.
#[inline]
fn valid_range(
    offset: usize,
    pad: usize,
    stride: usize,
    in_len: usize,
    out_len: usize,
) -> (usize, usize) {
    // o * stride + offset >= pad
    let start = if offset >= pad {
        0
    } else {
        (pad - offset).div_ceil(stride)
    };
    // o * stride + offset - pad < in_len
    let limit = in_len + pad;
    let end = if limit <= offset {
        0
    } else {
        ((limit - offset - 1) / stride + 1).min(out_len)
    };
    (start.min(end), end)
}

pub(crate) fn forward(
    layer: &LayerSpec,
    params: &LayerParams,
    input: &Tensor,
    out_shape: Shape,
) -> Tensor {
    match *layer {
        LayerSpec::Conv {
            kernel,
            stride,
            padding,
            ..
        } => conv_forward(params, input, out_shape, kernel, stride, padding),
        LayerSpec::ConvTranspose {
            kernel,
            stride,
            padding,
            ..
        } => conv_transpose_forward(params, input, out_shape, kernel, stride, padding),
        LayerSpec::ChannelwiseFc => channelwise_forward(params, input),
        LayerSpec::Dense { .. } => dense_forward(params, input, out_shape),
        LayerSpec::Activation(act) => activation_forward(act, input),
    }
}

/// Accumulates parameter gradients into `grads` and returns the gradient
/// with respect to the layer input.
pub(crate) fn backward(
    layer: &LayerSpec,
    params: &LayerParams,
    input: &Tensor,
    output: &Tensor,
    grad_out: &Tensor,
    grads: &mut LayerParams,
) -> Tensor {
    match *layer {
        LayerSpec::Conv {
            kernel,
            stride,
            padding,
            ..
        } => conv_backward(params, input, grad_out, grads, kernel, stride, padding),
        LayerSpec::ConvTranspose {
            kernel,
            stride,
            padding,
            ..
        } => conv_transpose_backward(params, input, grad_out, grads, kernel, stride, padding),
        LayerSpec::ChannelwiseFc => channelwise_backward(params, input, grad_out, grads),
        LayerSpec::Dense { .. } => dense_backward(params, input, grad_out, grads),
        LayerSpec::Activation(act) => activation_backward(act, input, output, grad_out),
    }
}

fn conv_forward(
    p: &LayerParams,
    input: &Tensor,
    out_shape: Shape,
    k: usize,
    s: usize,
    pad: usize,
) -> Tensor {
    let is = input.shape();
    let (oh, ow) = (out_shape.height, out_shape.width);
    let mut out = Tensor::zeros(out_shape);
    let x = input.data();
    let y = out.data_mut();
    for o in 0..out_shape.channels {
        let plane = &mut y[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(p.bias[o]);
        for i in 0..is.channels {
            let xin = &x[i * is.plane()..(i + 1) * is.plane()];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, pad, s, is.height, oh);
                for kx in 0..k {
                    let w = p.weight[((o * is.channels + i) * k + ky) * k + kx];
                    let (x0, x1) = valid_range(kx, pad, s, is.width, ow);
                    for oy in y0..y1 {
                        let iy = oy * s + ky - pad;
                        let row_in = &xin[iy * is.width..(iy + 1) * is.width];
                        let row_out = &mut plane[oy * ow..(oy + 1) * ow];
                        for ox in x0..x1 {
                            row_out[ox] += w * row_in[ox * s + kx - pad];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    p: &LayerParams,
    input: &Tensor,
    grad_out: &Tensor,
    grads: &mut LayerParams,
    k: usize,
    s: usize,
    pad: usize,
) -> Tensor {
    let is = input.shape();
    let os = grad_out.shape();
    let (oh, ow) = (os.height, os.width);
    let mut grad_in = Tensor::zeros(is);
    let x = input.data();
    let g = grad_out.data();
    for o in 0..os.channels {
        let gplane = &g[o * oh * ow..(o + 1) * oh * ow];
        grads.bias[o] += gplane.iter().sum::<f64>();
        for i in 0..is.channels {
            let xin = &x[i * is.plane()..(i + 1) * is.plane()];
            let gin_off = i * is.plane();
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, pad, s, is.height, oh);
                for kx in 0..k {
                    let widx = ((o * is.channels + i) * k + ky) * k + kx;
                    let w = p.weight[widx];
                    let (x0, x1) = valid_range(kx, pad, s, is.width, ow);
                    let mut dw = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * s + ky - pad;
                        let row_in = &xin[iy * is.width..(iy + 1) * is.width];
                        let row_g = &gplane[oy * ow..(oy + 1) * ow];
                        let gin_row = &mut grad_in.data_mut()
                            [gin_off + iy * is.width..gin_off + (iy + 1) * is.width];
                        for ox in x0..x1 {
                            let ix = ox * s + kx - pad;
                            dw += row_g[ox] * row_in[ix];
                            gin_row[ix] += w * row_g[ox];
                        }
                    }
                    grads.weight[widx] += dw;
                }
            }
        }
    }
    grad_in
}

fn conv_transpose_forward(
    p: &LayerParams,
    input: &Tensor,
    out_shape: Shape,
    k: usize,
    s: usize,
    pad: usize,
) -> Tensor {
    let is = input.shape();
    let oc = out_shape.channels;
    let (oh, ow) = (out_shape.height, out_shape.width);
    let mut out = Tensor::zeros(out_shape);
    let x = input.data();
    let y = out.data_mut();
    for o in 0..oc {
        y[o * oh * ow..(o + 1) * oh * ow].fill(p.bias[o]);
    }
    // out[o][iy*s + ky - pad][ix*s + kx - pad] += w[i][o][ky][kx] * in[i][iy][ix]
    for i in 0..is.channels {
        let xin = &x[i * is.plane()..(i + 1) * is.plane()];
        for o in 0..oc {
            let plane = &mut y[o * oh * ow..(o + 1) * oh * ow];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, pad, s, oh, is.height);
                for kx in 0..k {
                    let w = p.weight[((i * oc + o) * k + ky) * k + kx];
                    let (x0, x1) = valid_range(kx, pad, s, ow, is.width);
                    for iy in y0..y1 {
                        let oy = iy * s + ky - pad;
                        let row_in = &xin[iy * is.width..(iy + 1) * is.width];
                        let row_out = &mut plane[oy * ow..(oy + 1) * ow];
                        for ix in x0..x1 {
                            row_out[ix * s + kx - pad] += w * row_in[ix];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_transpose_backward(
    p: &LayerParams,
    input: &Tensor,
    grad_out: &Tensor,
    grads: &mut LayerParams,
    k: usize,
    s: usize,
    pad: usize,
) -> Tensor {
    let is = input.shape();
    let os = grad_out.shape();
    let oc = os.channels;
    let (oh, ow) = (os.height, os.width);
    let mut grad_in = Tensor::zeros(is);
    let x = input.data();
    let g = grad_out.data();
    for o in 0..oc {
        grads.bias[o] += g[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
    }
    for i in 0..is.channels {
        let xin = &x[i * is.plane()..(i + 1) * is.plane()];
        let gin_off = i * is.plane();
        for o in 0..oc {
            let gplane = &g[o * oh * ow..(o + 1) * oh * ow];
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, pad, s, oh, is.height);
                for kx in 0..k {
                    let widx = ((i * oc + o) * k + ky) * k + kx;
                    let w = p.weight[widx];
                    let (x0, x1) = valid_range(kx, pad, s, ow, is.width);
                    let mut dw = 0.0;
                    for iy in y0..y1 {
                        let oy = iy * s + ky - pad;
                        let row_in = &xin[iy * is.width..(iy + 1) * is.width];
                        let row_g = &gplane[oy * ow..(oy + 1) * ow];
                        let gin_row = &mut grad_in.data_mut()
                            [gin_off + iy * is.width..gin_off + (iy + 1) * is.width];
                        for ix in x0..x1 {
                            let gv = row_g[ix * s + kx - pad];
                            dw += gv * row_in[ix];
                            gin_row[ix] += w * gv;
                        }
                    }
                    grads.weight[widx] += dw;
                }
            }
        }
    }
    grad_in
}

fn channelwise_forward(p: &LayerParams, input: &Tensor) -> Tensor {
    let shape = input.shape();
    let hw = shape.plane();
    let mut out = Tensor::zeros(shape);
    for c in 0..shape.channels {
        let xin = input.channel(c);
        let w = &p.weight[c * hw * hw..(c + 1) * hw * hw];
        let y = &mut out.data_mut()[c * hw..(c + 1) * hw];
        for (j, yj) in y.iter_mut().enumerate() {
            let row = &w[j * hw..(j + 1) * hw];
            *yj = p.bias[c * hw + j] + row.iter().zip(xin).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    out
}

fn channelwise_backward(
    p: &LayerParams,
    input: &Tensor,
    grad_out: &Tensor,
    grads: &mut LayerParams,
) -> Tensor {
    let shape = input.shape();
    let hw = shape.plane();
    let mut grad_in = Tensor::zeros(shape);
    for c in 0..shape.channels {
        let xin = input.channel(c);
        let g = grad_out.channel(c);
        let w = &p.weight[c * hw * hw..(c + 1) * hw * hw];
        let dw = &mut grads.weight[c * hw * hw..(c + 1) * hw * hw];
        let gin = &mut grad_in.data_mut()[c * hw..(c + 1) * hw];
        for j in 0..hw {
            let gj = g[j];
            grads.bias[c * hw + j] += gj;
            let row = &w[j * hw..(j + 1) * hw];
            let drow = &mut dw[j * hw..(j + 1) * hw];
            for k in 0..hw {
                drow[k] += gj * xin[k];
                gin[k] += row[k] * gj;
            }
        }
    }
    grad_in
}

fn dense_forward(p: &LayerParams, input: &Tensor, out_shape: Shape) -> Tensor {
    let n_in = input.len();
    let x = input.data();
    let data = (0..out_shape.len())
        .map(|j| {
            p.bias[j]
                + p.weight[j * n_in..(j + 1) * n_in]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect();
    Tensor::from_vec(out_shape, data).expect("dense output shape")
}

fn dense_backward(
    p: &LayerParams,
    input: &Tensor,
    grad_out: &Tensor,
    grads: &mut LayerParams,
) -> Tensor {
    let n_in = input.len();
    let x = input.data();
    let mut grad_in = Tensor::zeros(input.shape());
    for (j, &gj) in grad_out.data().iter().enumerate() {
        grads.bias[j] += gj;
        let row = &p.weight[j * n_in..(j + 1) * n_in];
        let drow = &mut grads.weight[j * n_in..(j + 1) * n_in];
        let gin = grad_in.data_mut();
        for k in 0..n_in {
            drow[k] += gj * x[k];
            gin[k] += row[k] * gj;
        }
    }
    grad_in
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn activation_forward(act: Activation, input: &Tensor) -> Tensor {
    match act {
        Activation::Relu => input.map(|v| v.max(0.0)),
        Activation::LeakyRelu { slope } => input.map(|v| if v > 0.0 { v } else { slope * v }),
        Activation::Tanh => input.map(f64::tanh),
        Activation::Sigmoid => input.map(sigmoid),
    }
}

fn activation_backward(
    act: Activation,
    input: &Tensor,
    output: &Tensor,
    grad_out: &Tensor,
) -> Tensor {
    let g = grad_out.data();
    let data: Vec<f64> = match act {
        Activation::Relu => input
            .data()
            .iter()
            .zip(g)
            .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
            .collect(),
        Activation::LeakyRelu { slope } => input
            .data()
            .iter()
            .zip(g)
            .map(|(&x, &gv)| if x > 0.0 { gv } else { slope * gv })
            .collect(),
        Activation::Tanh => output
            .data()
            .iter()
            .zip(g)
            .map(|(&y, &gv)| (1.0 - y * y) * gv)
            .collect(),
        Activation::Sigmoid => output
            .data()
            .iter()
            .zip(g)
            .map(|(&y, &gv)| y * (1.0 - y) * gv)
            .collect(),
    };
    Tensor::from_vec(input.shape(), data).expect("activation gradient shape")
}
