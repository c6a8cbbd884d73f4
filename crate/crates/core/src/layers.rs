//! Layer specifications and their forward/backward kernels.
//!
//! Six layer kinds cover the desk-scale models: Dense, Conv2d, ReLU,
//! MaxPool2d, Flatten, Softmax. Each kind knows its output shape, its
//! parameter shapes, and how to run forward and backward. Kernels are plain
//! nested loops with a fixed iteration order; that order is part of the
//! determinism contract (bit-identical outputs for identical inputs).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    ReLU,
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    Flatten,
    Softmax,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "Dense",
            LayerSpec::Conv2d { .. } => "Conv2d",
            LayerSpec::ReLU => "ReLU",
            LayerSpec::MaxPool2d { .. } => "MaxPool2d",
            LayerSpec::Flatten => "Flatten",
            LayerSpec::Softmax => "Softmax",
        }
    }

    /// Check the kind-specific parameter invariants (dimensions ≥ 1).
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => in_features >= 1 && out_features >= 1,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                ..
            } => in_channels >= 1 && out_channels >= 1 && kernel_h >= 1 && kernel_w >= 1 && stride >= 1,
            LayerSpec::MaxPool2d { window, stride } => window >= 1 && stride >= 1,
            LayerSpec::ReLU | LayerSpec::Flatten | LayerSpec::Softmax => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{} has a zero dimension parameter",
                self.kind_name()
            )))
        }
    }

    /// Output shape as a function of the input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |context| Error::ShapeMismatch {
            expected: vec![],
            got: input.to_vec(),
            context,
        };
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                if input == [in_features] {
                    Ok(vec![out_features])
                } else {
                    Err(Error::ShapeMismatch {
                        expected: vec![in_features],
                        got: input.to_vec(),
                        context: "Dense input",
                    })
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                let [c, h, w] = *input else {
                    return Err(mismatch("Conv2d input rank"));
                };
                if c != in_channels {
                    return Err(Error::ShapeMismatch {
                        expected: vec![in_channels, h, w],
                        got: input.to_vec(),
                        context: "Conv2d channels",
                    });
                }
                let h_eff = h + 2 * padding;
                let w_eff = w + 2 * padding;
                if h_eff < kernel_h || w_eff < kernel_w {
                    return Err(mismatch("Conv2d kernel larger than padded input"));
                }
                Ok(vec![
                    out_channels,
                    (h_eff - kernel_h) / stride + 1,
                    (w_eff - kernel_w) / stride + 1,
                ])
            }
            LayerSpec::ReLU => Ok(input.to_vec()),
            LayerSpec::MaxPool2d { window, stride } => {
                let [c, h, w] = *input else {
                    return Err(mismatch("MaxPool2d input rank"));
                };
                if h < window || w < window {
                    return Err(mismatch("MaxPool2d window larger than input"));
                }
                Ok(vec![c, (h - window) / stride + 1, (w - window) / stride + 1])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Softmax => {
                if input.len() == 1 {
                    Ok(input.to_vec())
                } else {
                    Err(mismatch("Softmax input rank"))
                }
            }
        }
    }
}

/// Per-layer trainable parameters. Parameterless kinds carry `Empty`; the
/// same enum doubles as the gradient container since gradient shapes mirror
/// parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Empty,
    Dense { weight: Tensor, bias: Tensor },
    Conv { weight: Tensor, bias: Tensor },
}

impl LayerParams {
    /// Zero-valued parameters shaped for `spec` (gradient accumulators).
    pub fn zeros_like_spec(spec: &LayerSpec) -> LayerParams {
        match *spec {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => LayerParams::Dense {
                weight: Tensor::zeros(vec![out_features, in_features]),
                bias: Tensor::zeros(vec![out_features]),
            },
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => LayerParams::Conv {
                weight: Tensor::zeros(vec![out_channels, in_channels, kernel_h, kernel_w]),
                bias: Tensor::zeros(vec![out_channels]),
            },
            _ => LayerParams::Empty,
        }
    }

    /// Accumulate `other` into `self` elementwise. Shapes must match.
    pub fn add_assign(&mut self, other: &LayerParams) {
        match (self, other) {
            (LayerParams::Empty, LayerParams::Empty) => {}
            (
                LayerParams::Dense { weight, bias },
                LayerParams::Dense {
                    weight: ow,
                    bias: ob,
                },
            )
            | (
                LayerParams::Conv { weight, bias },
                LayerParams::Conv {
                    weight: ow,
                    bias: ob,
                },
            ) => {
                for (a, b) in weight.data_mut().iter_mut().zip(ow.data()) {
                    *a += b;
                }
                for (a, b) in bias.data_mut().iter_mut().zip(ob.data()) {
                    *a += b;
                }
            }
            _ => unreachable!("parameter kinds diverged from layer specs"),
        }
    }

    /// SGD step: self -= rate * grad.
    pub fn step(&mut self, grad: &LayerParams, rate: f64) {
        match (self, grad) {
            (LayerParams::Empty, LayerParams::Empty) => {}
            (
                LayerParams::Dense { weight, bias },
                LayerParams::Dense {
                    weight: gw,
                    bias: gb,
                },
            )
            | (
                LayerParams::Conv { weight, bias },
                LayerParams::Conv {
                    weight: gw,
                    bias: gb,
                },
            ) => {
                for (p, g) in weight.data_mut().iter_mut().zip(gw.data()) {
                    *p -= rate * g;
                }
                for (p, g) in bias.data_mut().iter_mut().zip(gb.data()) {
                    *p -= rate * g;
                }
            }
            _ => unreachable!("parameter kinds diverged from layer specs"),
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            LayerParams::Empty => true,
            LayerParams::Dense { weight, bias } | LayerParams::Conv { weight, bias } => {
                weight.all_finite() && bias.all_finite()
            }
        }
    }
}

/// Initialize parameters for one layer.
///
/// Weight matrices draw uniformly from [-s, s] with s = sqrt(6/(fan_in+fan_out))
/// in flat index order; biases start at zero. Conv fans count the full
/// receptive field (channels × kernel area).
pub fn init_layer_params(spec: &LayerSpec, rng: &mut SplitMix64) -> LayerParams {
    match *spec {
        LayerSpec::Dense {
            in_features,
            out_features,
        } => {
            let s = (6.0 / (in_features + out_features) as f64).sqrt();
            let n = out_features * in_features;
            let data: Vec<f64> = (0..n).map(|_| rng.uniform(-s, s)).collect();
            LayerParams::Dense {
                weight: Tensor::from_parts(vec![out_features, in_features], data),
                bias: Tensor::zeros(vec![out_features]),
            }
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            ..
        } => {
            let field = kernel_h * kernel_w;
            let fan_in = in_channels * field;
            let fan_out = out_channels * field;
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n = out_channels * in_channels * field;
            let data: Vec<f64> = (0..n).map(|_| rng.uniform(-s, s)).collect();
            LayerParams::Conv {
                weight: Tensor::from_parts(
                    vec![out_channels, in_channels, kernel_h, kernel_w],
                    data,
                ),
                bias: Tensor::zeros(vec![out_channels]),
            }
        }
        _ => LayerParams::Empty,
    }
}

/// Run one layer forward.
pub fn layer_forward(spec: &LayerSpec, params: &LayerParams, input: &Tensor) -> Result<Tensor> {
    let out_shape = spec.output_shape(input.shape())?;
    let x = input.data();
    match (spec, params) {
        (
            LayerSpec::Dense { in_features, .. },
            LayerParams::Dense { weight, bias },
        ) => {
            let w = weight.data();
            let out: Vec<f64> = bias
                .data()
                .iter()
                .enumerate()
                .map(|(o, &b)| {
                    let row = &w[o * in_features..(o + 1) * in_features];
                    let mut acc = b;
                    for (wi, xi) in row.iter().zip(x) {
                        acc += wi * xi;
                    }
                    acc
                })
                .collect();
            Ok(Tensor::from_parts(out_shape, out))
        }
        (
            &LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            },
            LayerParams::Conv { weight, bias },
        ) => {
            let [_, in_h, in_w] = *input.shape() else {
                unreachable!("shape checked by output_shape");
            };
            let (out_h, out_w) = (out_shape[1], out_shape[2]);
            let w = weight.data();
            let b = bias.data();
            let mut out = vec![0.0; out_channels * out_h * out_w];
            for oc in 0..out_channels {
                let w_oc = &w[oc * in_channels * kernel_h * kernel_w..];
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        let mut acc = b[oc];
                        for ic in 0..in_channels {
                            let x_c = &x[ic * in_h * in_w..(ic + 1) * in_h * in_w];
                            let w_ic = &w_oc[ic * kernel_h * kernel_w..];
                            for kh in 0..kernel_h {
                                let ih = (oh * stride + kh) as isize - padding as isize;
                                if ih < 0 || ih >= in_h as isize {
                                    continue;
                                }
                                let x_row = &x_c[ih as usize * in_w..(ih as usize + 1) * in_w];
                                let w_row = &w_ic[kh * kernel_w..kh * kernel_w + kernel_w];
                                for kw in 0..kernel_w {
                                    let iw = (ow * stride + kw) as isize - padding as isize;
                                    if iw < 0 || iw >= in_w as isize {
                                        continue;
                                    }
                                    acc += x_row[iw as usize] * w_row[kw];
                                }
                            }
                        }
                        out[(oc * out_h + oh) * out_w + ow] = acc;
                    }
                }
            }
            Ok(Tensor::from_parts(out_shape, out))
        }
        (LayerSpec::ReLU, _) => {
            let out: Vec<f64> = x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            Ok(Tensor::from_parts(out_shape, out))
        }
        (&LayerSpec::MaxPool2d { window, stride }, _) => {
            let [channels, in_h, in_w] = *input.shape() else {
                unreachable!("shape checked by output_shape");
            };
            let (out_h, out_w) = (out_shape[1], out_shape[2]);
            let mut out = vec![0.0; channels * out_h * out_w];
            for c in 0..channels {
                let x_c = &x[c * in_h * in_w..(c + 1) * in_h * in_w];
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        let mut best = f64::NEG_INFINITY;
                        for kh in 0..window {
                            let row = &x_c[(oh * stride + kh) * in_w + ow * stride..];
                            for &v in &row[..window] {
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        out[(c * out_h + oh) * out_w + ow] = best;
                    }
                }
            }
            Ok(Tensor::from_parts(out_shape, out))
        }
        (LayerSpec::Flatten, _) => Ok(Tensor::from_parts(out_shape, x.to_vec())),
        (LayerSpec::Softmax, _) => Ok(Tensor::from_parts(out_shape, softmax(x))),
        _ => unreachable!("parameter kind diverged from layer spec"),
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Run one layer backward.
///
/// `input`/`output` are the tensors seen by the forward pass; `out_grad` is
/// the loss gradient at this layer's output. Returns the loss gradient at the
/// input plus parameter gradients (Empty for parameterless kinds).
pub fn layer_backward(
    spec: &LayerSpec,
    params: &LayerParams,
    input: &Tensor,
    output: &Tensor,
    out_grad: &Tensor,
) -> Result<(Tensor, LayerParams)> {
    if out_grad.shape() != output.shape() {
        return Err(Error::ShapeMismatch {
            expected: output.shape().to_vec(),
            got: out_grad.shape().to_vec(),
            context: "layer_backward gradient",
        });
    }
    let x = input.data();
    let g = out_grad.data();
    match (spec, params) {
        (
            &LayerSpec::Dense {
                in_features,
                out_features,
            },
            LayerParams::Dense { weight, .. },
        ) => {
            let w = weight.data();
            let mut dx = vec![0.0; in_features];
            let mut dw = vec![0.0; out_features * in_features];
            for o in 0..out_features {
                let go = g[o];
                let row = &w[o * in_features..(o + 1) * in_features];
                let drow = &mut dw[o * in_features..(o + 1) * in_features];
                for i in 0..in_features {
                    dx[i] += row[i] * go;
                    drow[i] = go * x[i];
                }
            }
            Ok((
                Tensor::from_parts(vec![in_features], dx),
                LayerParams::Dense {
                    weight: Tensor::from_parts(vec![out_features, in_features], dw),
                    bias: Tensor::from_parts(vec![out_features], g.to_vec()),
                },
            ))
        }
        (
            &LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            },
            LayerParams::Conv { weight, .. },
        ) => {
            let [_, in_h, in_w] = *input.shape() else {
                unreachable!("shape checked in forward");
            };
            let (out_h, out_w) = (output.shape()[1], output.shape()[2]);
            let w = weight.data();
            let mut dx = vec![0.0; in_channels * in_h * in_w];
            let mut dw = vec![0.0; out_channels * in_channels * kernel_h * kernel_w];
            let mut db = vec![0.0; out_channels];
            for oc in 0..out_channels {
                let w_oc = &w[oc * in_channels * kernel_h * kernel_w..];
                let dw_oc_base = oc * in_channels * kernel_h * kernel_w;
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        let go = g[(oc * out_h + oh) * out_w + ow];
                        db[oc] += go;
                        for ic in 0..in_channels {
                            let x_base = ic * in_h * in_w;
                            let w_base = ic * kernel_h * kernel_w;
                            for kh in 0..kernel_h {
                                let ih = (oh * stride + kh) as isize - padding as isize;
                                if ih < 0 || ih >= in_h as isize {
                                    continue;
                                }
                                for kw in 0..kernel_w {
                                    let iw = (ow * stride + kw) as isize - padding as isize;
                                    if iw < 0 || iw >= in_w as isize {
                                        continue;
                                    }
                                    let xi = x_base + ih as usize * in_w + iw as usize;
                                    let wi = w_base + kh * kernel_w + kw;
                                    dx[xi] += w_oc[wi] * go;
                                    dw[dw_oc_base + wi] += x[xi] * go;
                                }
                            }
                        }
                    }
                }
            }
            Ok((
                Tensor::from_parts(input.shape().to_vec(), dx),
                LayerParams::Conv {
                    weight: Tensor::from_parts(
                        vec![out_channels, in_channels, kernel_h, kernel_w],
                        dw,
                    ),
                    bias: Tensor::from_parts(vec![out_channels], db),
                },
            ))
        }
        (LayerSpec::ReLU, _) => {
            // Subgradient at exactly 0 is 0.
            let dx: Vec<f64> = x
                .iter()
                .zip(g)
                .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                .collect();
            Ok((
                Tensor::from_parts(input.shape().to_vec(), dx),
                LayerParams::Empty,
            ))
        }
        (&LayerSpec::MaxPool2d { window, stride }, _) => {
            let [channels, in_h, in_w] = *input.shape() else {
                unreachable!("shape checked in forward");
            };
            let (out_h, out_w) = (output.shape()[1], output.shape()[2]);
            let mut dx = vec![0.0; x.len()];
            for c in 0..channels {
                let x_base = c * in_h * in_w;
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        // Ties route the gradient to the first maximal element
                        // in row-major window order.
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for kh in 0..window {
                            for kw in 0..window {
                                let idx =
                                    x_base + (oh * stride + kh) * in_w + ow * stride + kw;
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        dx[best_idx] += g[(c * out_h + oh) * out_w + ow];
                    }
                }
            }
            Ok((
                Tensor::from_parts(input.shape().to_vec(), dx),
                LayerParams::Empty,
            ))
        }
        (LayerSpec::Flatten, _) => Ok((
            Tensor::from_parts(input.shape().to_vec(), g.to_vec()),
            LayerParams::Empty,
        )),
        (LayerSpec::Softmax, _) => {
            let p = output.data();
            let dot: f64 = p.iter().zip(g).map(|(pi, gi)| pi * gi).sum();
            let dx: Vec<f64> = p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)).collect();
            Ok((
                Tensor::from_parts(input.shape().to_vec(), dx),
                LayerParams::Empty,
            ))
        }
        _ => unreachable!("parameter kind diverged from layer spec"),
    }
}
