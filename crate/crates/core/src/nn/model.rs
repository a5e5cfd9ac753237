use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Image, ImageShape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    Mlp { hidden: Vec<usize> },
    /// One `3x3` same-padded convolution + ReLU + `2x2` average pool per
    /// entry, followed by a linear head.
    TinyConv { channels: Vec<usize> },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::TinyConv {
            channels: vec![8, 16],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
        w: usize,
        b: usize,
    },
    Conv3x3 {
        in_c: usize,
        out_c: usize,
        height: usize,
        width: usize,
        w: usize,
        b: usize,
    },
    Relu,
    AvgPool2 {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl Layer {
    fn output_len(&self, input_len: usize) -> usize {
        match *self {
            Layer::Dense { outputs, .. } => outputs,
            Layer::Conv3x3 {
                out_c,
                height,
                width,
                ..
            } => out_c * height * width,
            Layer::Relu => input_len,
            Layer::AvgPool2 {
                channels,
                height,
                width,
            } => channels * (height / 2) * (width / 2),
        }
    }

    fn fan_in(&self) -> Option<(usize, usize, usize)> {
        match *self {
            Layer::Dense { inputs, w, .. } => Some((w, self.weight_count(), inputs)),
            Layer::Conv3x3 { in_c, w, .. } => Some((w, self.weight_count(), in_c * 9)),
            _ => None,
        }
    }

    fn weight_count(&self) -> usize {
        match *self {
            Layer::Dense {
                inputs, outputs, ..
            } => inputs * outputs,
            Layer::Conv3x3 { in_c, out_c, .. } => in_c * out_c * 9,
            _ => 0,
        }
    }
}

/// Feed-forward classifier over flattened `C x H x W` inputs. All parameters
/// live in one flat vector so optimizers and checkpoints stay layout-agnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    input: ImageShape,
    num_classes: usize,
    layers: Vec<Layer>,
    params: Vec<f64>,
}

/// Activations recorded during a forward pass; `acts[i]` is the input of
/// layer `i` and the last entry holds the logits.
pub(crate) struct Trace {
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub(crate) fn logits(&self) -> &[f64] {
        self.acts.last().expect("trace holds the input")
    }
}

fn build_layers(arch: &Architecture, input: ImageShape, num_classes: usize) -> Result<(Vec<Layer>, usize)> {
    let mut layers = Vec::new();
    let mut offset = 0;
    let mut dense = |layers: &mut Vec<Layer>, inputs: usize, outputs: usize| {
        let w = offset;
        let b = w + inputs * outputs;
        offset = b + outputs;
        layers.push(Layer::Dense {
            inputs,
            outputs,
            w,
            b,
        });
    };
    let flat = input.len();
    match arch {
        Architecture::Linear => dense(&mut layers, flat, num_classes),
        Architecture::Mlp { hidden } => {
            let mut width = flat;
            for &h in hidden {
                if h == 0 {
                    return Err(Error::invalid("hidden layer width must be positive"));
                }
                dense(&mut layers, width, h);
                layers.push(Layer::Relu);
                width = h;
            }
            dense(&mut layers, width, num_classes);
        }
        Architecture::TinyConv { channels } => {
            let (mut c, mut h, mut w) = (input.channels, input.height, input.width);
            let mut conv_offset = 0;
            let mut conv_layers = Vec::new();
            for &out_c in channels {
                if out_c == 0 {
                    return Err(Error::invalid("conv channel count must be positive"));
                }
                let wo = conv_offset;
                let bo = wo + c * out_c * 9;
                conv_offset = bo + out_c;
                conv_layers.push(Layer::Conv3x3 {
                    in_c: c,
                    out_c,
                    height: h,
                    width: w,
                    w: wo,
                    b: bo,
                });
                conv_layers.push(Layer::Relu);
                c = out_c;
                if h >= 2 && w >= 2 {
                    conv_layers.push(Layer::AvgPool2 {
                        channels: c,
                        height: h,
                        width: w,
                    });
                    h /= 2;
                    w /= 2;
                }
            }
            layers.extend(conv_layers);
            offset = conv_offset;
            let w_off = offset;
            let b_off = w_off + c * h * w * num_classes;
            offset = b_off + num_classes;
            layers.push(Layer::Dense {
                inputs: c * h * w,
                outputs: num_classes,
                w: w_off,
                b: b_off,
            });
        }
    }
    Ok((layers, offset))
}

impl Model {
    /// Model with every parameter set to zero.
    pub fn zeros(arch: Architecture, input: ImageShape, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("a classifier needs at least 2 classes"));
        }
        let (layers, count) = build_layers(&arch, input, num_classes)?;
        Ok(Self {
            arch,
            input,
            num_classes,
            layers,
            params: vec![0.0; count],
        })
    }

    /// He-normal weights (`1 / fan_in` variance for the output layer), zero
    /// biases.
    pub fn new<R: Rng + ?Sized>(
        arch: Architecture,
        input: ImageShape,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut model = Self::zeros(arch, input, num_classes)?;
        let last = model.layers.len() - 1;
        for (i, layer) in model.layers.iter().enumerate() {
            if let Some((start, len, fan_in)) = layer.fan_in() {
                let gain = if i == last { 1.0 } else { 2.0 };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
                for p in &mut model.params[start..start + len] {
                    *p = normal.sample(rng);
                }
            }
        }
        Ok(model)
    }

    /// Rebuilds a model from a parameter vector, checking its length.
    pub fn from_params(
        arch: Architecture,
        input: ImageShape,
        num_classes: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut model = Self::zeros(arch, input, num_classes)?;
        if params.len() != model.params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", model.params.len()),
                actual: format!("{} parameters", params.len()),
            });
        }
        model.params = params;
        Ok(model)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_shape(&self) -> ImageShape {
        self.input
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Converts an interleaved `H x W x Ch` image into the `Ch x H x W`
    /// vector consumed by the network.
    pub fn encode_input(&self, image: &Image) -> Result<Vec<f64>> {
        if image.shape() != self.input {
            return Err(Error::ShapeMismatch {
                expected: self.input.to_string(),
                actual: image.shape().to_string(),
            });
        }
        Ok(encode_chw(image))
    }

    /// Logits for each image of the batch, shape `(batch, C)`.
    pub fn forward(&self, batch: &[&Image]) -> Result<Vec<Vec<f64>>> {
        batch
            .iter()
            .map(|img| {
                let x = self.encode_input(img)?;
                let trace = self.forward_encoded(x)?;
                Ok(trace.acts.into_iter().next_back().expect("logits"))
            })
            .collect()
    }

    pub(crate) fn forward_encoded(&self, input: Vec<f64>) -> Result<Trace> {
        if input.len() != self.input.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} inputs", self.input.len()),
                actual: format!("{} inputs", input.len()),
            });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input);
        for layer in &self.layers {
            let x = acts.last().expect("non-empty");
            let y = self.layer_forward(layer, x);
            acts.push(y);
        }
        if acts.last().expect("logits").iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network produced non-finite logits".into()));
        }
        Ok(Trace { acts })
    }

    fn layer_forward(&self, layer: &Layer, x: &[f64]) -> Vec<f64> {
        let p = &self.params;
        let mut y = vec![0.0; layer.output_len(x.len())];
        match *layer {
            Layer::Dense {
                inputs,
                outputs,
                w,
                b,
            } => {
                for (o, out) in y.iter_mut().enumerate().take(outputs) {
                    let row = &p[w + o * inputs..w + (o + 1) * inputs];
                    *out = p[b + o] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
                }
            }
            Layer::Conv3x3 {
                in_c,
                out_c,
                height,
                width,
                w,
                b,
            } => {
                let plane = height * width;
                for oc in 0..out_c {
                    let out = &mut y[oc * plane..(oc + 1) * plane];
                    out.fill(p[b + oc]);
                    for ic in 0..in_c {
                        let src = &x[ic * plane..(ic + 1) * plane];
                        let k = &p[w + (oc * in_c + ic) * 9..w + (oc * in_c + ic + 1) * 9];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let wt = k[ky * 3 + kx];
                                let (y0, y1) = valid_range(ky, height);
                                let (x0, x1) = valid_range(kx, width);
                                for yy in y0..y1 {
                                    let sy = yy + ky - 1;
                                    let orow = &mut out[yy * width..(yy + 1) * width];
                                    let srow = &src[sy * width..(sy + 1) * width];
                                    for xx in x0..x1 {
                                        orow[xx] += wt * srow[xx + kx - 1];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Layer::Relu => {
                for (o, &v) in y.iter_mut().zip(x) {
                    *o = v.max(0.0);
                }
            }
            Layer::AvgPool2 {
                channels,
                height,
                width,
            } => {
                let (oh, ow) = (height / 2, width / 2);
                for c in 0..channels {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let base = c * height * width;
                            let s = x[base + 2 * yy * width + 2 * xx]
                                + x[base + 2 * yy * width + 2 * xx + 1]
                                + x[base + (2 * yy + 1) * width + 2 * xx]
                                + x[base + (2 * yy + 1) * width + 2 * xx + 1];
                            y[(c * oh + yy) * ow + xx] = 0.25 * s;
                        }
                    }
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` given `d loss / d logits`.
    pub(crate) fn backward(&self, trace: &Trace, dlogits: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let p = &self.params;
        let mut delta = dlogits.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.acts[i];
            let need_input_grad = i > 0;
            let mut dx = if need_input_grad { vec![0.0; x.len()] } else { Vec::new() };
            match *layer {
                Layer::Dense {
                    inputs,
                    outputs,
                    w,
                    b,
                } => {
                    for o in 0..outputs {
                        let d = delta[o];
                        grad[b + o] += d;
                        if d == 0.0 {
                            continue;
                        }
                        let gw = &mut grad[w + o * inputs..w + (o + 1) * inputs];
                        for (g, v) in gw.iter_mut().zip(x) {
                            *g += d * v;
                        }
                        if need_input_grad {
                            let row = &p[w + o * inputs..w + (o + 1) * inputs];
                            for (dxi, a) in dx.iter_mut().zip(row) {
                                *dxi += d * a;
                            }
                        }
                    }
                }
                Layer::Conv3x3 {
                    in_c,
                    out_c,
                    height,
                    width,
                    w,
                    b,
                } => {
                    let plane = height * width;
                    for oc in 0..out_c {
                        let dout = &delta[oc * plane..(oc + 1) * plane];
                        grad[b + oc] += dout.iter().sum::<f64>();
                        for ic in 0..in_c {
                            let src = &x[ic * plane..(ic + 1) * plane];
                            let kbase = w + (oc * in_c + ic) * 9;
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (y0, y1) = valid_range(ky, height);
                                    let (x0, x1) = valid_range(kx, width);
                                    let mut acc = 0.0;
                                    for yy in y0..y1 {
                                        let sy = yy + ky - 1;
                                        let drow = &dout[yy * width..(yy + 1) * width];
                                        let srow = &src[sy * width..(sy + 1) * width];
                                        for xx in x0..x1 {
                                            acc += drow[xx] * srow[xx + kx - 1];
                                        }
                                    }
                                    grad[kbase + ky * 3 + kx] += acc;
                                    if need_input_grad {
                                        let wt = p[kbase + ky * 3 + kx];
                                        let dsrc = &mut dx[ic * plane..(ic + 1) * plane];
                                        for yy in y0..y1 {
                                            let sy = yy + ky - 1;
                                            for xx in x0..x1 {
                                                dsrc[sy * width + xx + kx - 1] += wt * dout[yy * width + xx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Layer::Relu => {
                    if need_input_grad {
                        for ((dxi, &d), &v) in dx.iter_mut().zip(&delta).zip(x) {
                            *dxi = if v > 0.0 { d } else { 0.0 };
                        }
                    }
                }
                Layer::AvgPool2 {
                    channels,
                    height,
                    width,
                } => {
                    if need_input_grad {
                        let (oh, ow) = (height / 2, width / 2);
                        for c in 0..channels {
                            let base = c * height * width;
                            for yy in 0..oh {
                                for xx in 0..ow {
                                    let d = 0.25 * delta[(c * oh + yy) * ow + xx];
                                    dx[base + 2 * yy * width + 2 * xx] += d;
                                    dx[base + 2 * yy * width + 2 * xx + 1] += d;
                                    dx[base + (2 * yy + 1) * width + 2 * xx] += d;
                                    dx[base + (2 * yy + 1) * width + 2 * xx + 1] += d;
                                }
                            }
                        }
                    }
                }
            }
            delta = dx;
        }
    }
}

/// Interleaved `H x W x Ch` pixels to planar `Ch x H x W`.
pub(crate) fn encode_chw(image: &Image) -> Vec<f64> {
    let s = image.shape();
    let mut out = vec![0.0; s.len()];
    let plane = s.width * s.height;
    for (i, px) in image.data().chunks_exact(s.channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            out[c * plane + i] = v;
        }
    }
    out
}

/// Output rows/cols for which kernel tap `k` (0..3) reads inside the input.
#[inline]
fn valid_range(k: usize, len: usize) -> (usize, usize) {
    let start = if k == 0 { 1 } else { 0 };
    let end = if k == 2 { len.saturating_sub(1) } else { len };
    (start.min(end), end)
}
