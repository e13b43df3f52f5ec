//! The closed operator set and its reference kernels.
//!
//! Every kernel is written with a fixed accumulation order and plain `f32`
//! arithmetic (no fused multiply-add), so a given input produces the same bits
//! on every run. Convolutions and dense layers accumulate input channels
//! first, then kernel rows, then kernel columns.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "Conv2D")]
    Conv2d,
    BatchNorm,
    BiasAdd,
    Add,
    Mul,
    Div,
    Exp,
    #[serde(rename = "LeakyReLU")]
    LeakyRelu,
    Sigmoid,
    MaxPool,
    Dense,
    Flatten,
    Softmax,
}

impl OpKind {
    pub const ALL: [OpKind; 13] = [
        OpKind::Conv2d,
        OpKind::BatchNorm,
        OpKind::BiasAdd,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Exp,
        OpKind::LeakyRelu,
        OpKind::Sigmoid,
        OpKind::MaxPool,
        OpKind::Dense,
        OpKind::Flatten,
        OpKind::Softmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "Conv2D",
            OpKind::BatchNorm => "BatchNorm",
            OpKind::BiasAdd => "BiasAdd",
            OpKind::Add => "Add",
            OpKind::Mul => "Mul",
            OpKind::Div => "Div",
            OpKind::Exp => "Exp",
            OpKind::LeakyRelu => "LeakyReLU",
            OpKind::Sigmoid => "Sigmoid",
            OpKind::MaxPool => "MaxPool",
            OpKind::Dense => "Dense",
            OpKind::Flatten => "Flatten",
            OpKind::Softmax => "Softmax",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            OpKind::Add | OpKind::Mul | OpKind::Div => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownKind(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conv2dParams {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolParams {
    pub window: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeakyReluParams {
    pub slope: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchNormParams {
    pub epsilon: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseParams {
    pub units: usize,
}

/// An operator with its hyper-parameters and weights bound.
#[derive(Clone, Debug, PartialEq)]
pub enum Operator {
    Conv2d {
        params: Conv2dParams,
        /// `(C_out, C_in, K, K)`
        weight: Tensor,
        /// `(C_out)`
        bias: Option<Tensor>,
    },
    BatchNorm {
        params: BatchNormParams,
        mean: Tensor,
        variance: Tensor,
        gamma: Tensor,
        beta: Tensor,
    },
    BiasAdd {
        bias: Tensor,
    },
    Add,
    Mul,
    Div,
    Exp,
    LeakyRelu(LeakyReluParams),
    Sigmoid,
    MaxPool(PoolParams),
    Dense {
        params: DenseParams,
        /// `(units, N_in)`
        weight: Tensor,
        bias: Option<Tensor>,
    },
    Flatten,
    Softmax,
}

impl Operator {
    pub fn kind(&self) -> OpKind {
        match self {
            Operator::Conv2d { .. } => OpKind::Conv2d,
            Operator::BatchNorm { .. } => OpKind::BatchNorm,
            Operator::BiasAdd { .. } => OpKind::BiasAdd,
            Operator::Add => OpKind::Add,
            Operator::Mul => OpKind::Mul,
            Operator::Div => OpKind::Div,
            Operator::Exp => OpKind::Exp,
            Operator::LeakyRelu(_) => OpKind::LeakyRelu,
            Operator::Sigmoid => OpKind::Sigmoid,
            Operator::MaxPool(_) => OpKind::MaxPool,
            Operator::Dense { .. } => OpKind::Dense,
            Operator::Flatten => OpKind::Flatten,
            Operator::Softmax => OpKind::Softmax,
        }
    }

    /// Named weight tensors, in a stable order.
    pub fn weights(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Operator::Conv2d { weight, bias, .. } | Operator::Dense { weight, bias, .. } => {
                let mut v = vec![("weight", weight)];
                if let Some(b) = bias {
                    v.push(("bias", b));
                }
                v
            }
            Operator::BatchNorm {
                mean,
                variance,
                gamma,
                beta,
                ..
            } => vec![
                ("mean", mean),
                ("variance", variance),
                ("gamma", gamma),
                ("beta", beta),
            ],
            Operator::BiasAdd { bias } => vec![("bias", bias)],
            _ => Vec::new(),
        }
    }

    /// Hyper-parameters as a JSON value (`null` for parameterless kinds).
    pub fn hyperparams(&self) -> serde_json::Value {
        let v = match self {
            Operator::Conv2d { params, .. } => serde_json::to_value(params),
            Operator::BatchNorm { params, .. } => serde_json::to_value(params),
            Operator::LeakyRelu(p) => serde_json::to_value(p),
            Operator::MaxPool(p) => serde_json::to_value(p),
            Operator::Dense { params, .. } => serde_json::to_value(params),
            _ => Ok(serde_json::Value::Null),
        };
        v.unwrap_or(serde_json::Value::Null)
    }

    /// Checks hyper-parameter ranges and weight self-consistency. Shape checks
    /// against inputs happen in [`Operator::infer_shape`].
    pub fn validate(&self, node: &str) -> Result<()> {
        match self {
            Operator::Conv2d {
                params,
                weight,
                bias,
            } => {
                if params.kernel == 0 || params.stride == 0 || params.out_channels == 0 {
                    return Err(Error::node(node, "kernel, stride and out_channels must be >= 1"));
                }
                let ws = weight.shape();
                if ws.len() != 4
                    || ws[0] != params.out_channels
                    || ws[2] != params.kernel
                    || ws[3] != params.kernel
                {
                    return Err(Error::ShapeMismatch {
                        node: node.into(),
                        expected: vec![params.out_channels, ws.get(1).copied().unwrap_or(0), params.kernel, params.kernel],
                        actual: ws.to_vec(),
                    });
                }
                check_vector(node, bias.as_ref(), params.out_channels)?;
            }
            Operator::BatchNorm {
                params,
                mean,
                variance,
                gamma,
                beta,
            } => {
                if !(params.epsilon >= 0.0) {
                    return Err(Error::node(node, "epsilon must be >= 0"));
                }
                let c = mean.len();
                for t in [mean, variance, gamma, beta] {
                    check_vector(node, Some(t), c)?;
                }
                if let Some(i) = variance
                    .data()
                    .iter()
                    .position(|v| !(v + params.epsilon > 0.0))
                {
                    return Err(Error::node(
                        node,
                        format!("variance + epsilon must be > 0 (channel {i})"),
                    ));
                }
            }
            Operator::LeakyRelu(p) => {
                if !(p.slope > 0.0 && p.slope < 1.0) {
                    return Err(Error::node(node, format!("slope {} not in (0, 1)", p.slope)));
                }
            }
            Operator::MaxPool(p) => {
                if p.window == 0 || p.stride == 0 {
                    return Err(Error::node(node, "window and stride must be >= 1"));
                }
            }
            Operator::Dense {
                params,
                weight,
                bias,
            } => {
                if params.units == 0 {
                    return Err(Error::node(node, "units must be >= 1"));
                }
                let ws = weight.shape();
                if ws.len() != 2 || ws[0] != params.units {
                    return Err(Error::ShapeMismatch {
                        node: node.into(),
                        expected: vec![params.units, ws.get(1).copied().unwrap_or(0)],
                        actual: ws.to_vec(),
                    });
                }
                check_vector(node, bias.as_ref(), params.units)?;
            }
            Operator::BiasAdd { bias } if bias.shape().len() != 1 => {
                return Err(Error::node(node, "bias must be one-dimensional"));
            }
            _ => {}
        }
        Ok(())
    }

    /// Output shape for the given input shapes.
    pub fn infer_shape(&self, node: &str, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let kind = self.kind();
        if inputs.len() != kind.arity() {
            return Err(Error::node(
                node,
                format!("{kind} takes {} input(s), got {}", kind.arity(), inputs.len()),
            ));
        }
        let x = inputs[0];
        let mismatch = |expected: Vec<usize>| Error::ShapeMismatch {
            node: node.into(),
            expected,
            actual: x.to_vec(),
        };
        let out = match self {
            Operator::Conv2d { params, weight, .. } => {
                let c_in = weight.shape()[1];
                let [c, h, w] = chw(x).ok_or_else(|| mismatch(vec![c_in, 0, 0]))?;
                if c != c_in {
                    return Err(mismatch(vec![c_in, h, w]));
                }
                let oh = window_out(h, params.kernel, params.stride, params.padding);
                let ow = window_out(w, params.kernel, params.stride, params.padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => vec![params.out_channels, oh, ow],
                    _ => return Err(Error::node(node, format!("input {x:?} smaller than kernel"))),
                }
            }
            Operator::BatchNorm { mean, .. } => {
                let [c, h, w] = chw(x).ok_or_else(|| mismatch(vec![mean.len(), 0, 0]))?;
                if c != mean.len() {
                    return Err(mismatch(vec![mean.len(), h, w]));
                }
                x.to_vec()
            }
            Operator::BiasAdd { bias } => {
                let per = bias_axis_len(x);
                if per != bias.len() {
                    let mut expected = x.to_vec();
                    let axis = if x.len() == 3 { 0 } else { x.len() - 1 };
                    expected[axis] = bias.len();
                    return Err(mismatch(expected));
                }
                x.to_vec()
            }
            Operator::Add | Operator::Mul | Operator::Div => {
                if inputs[1] != x {
                    return Err(Error::ShapeMismatch {
                        node: node.into(),
                        expected: x.to_vec(),
                        actual: inputs[1].to_vec(),
                    });
                }
                x.to_vec()
            }
            Operator::Exp | Operator::LeakyRelu(_) | Operator::Sigmoid | Operator::Softmax => {
                x.to_vec()
            }
            Operator::MaxPool(p) => {
                let [c, h, w] = chw(x).ok_or_else(|| mismatch(vec![0, 0, 0]))?;
                match (
                    window_out(h, p.window, p.stride, 0),
                    window_out(w, p.window, p.stride, 0),
                ) {
                    (Some(oh), Some(ow)) => vec![c, oh, ow],
                    _ => return Err(Error::node(node, format!("input {x:?} smaller than window"))),
                }
            }
            Operator::Dense { params, weight, .. } => {
                let n: usize = x.iter().product();
                if n != weight.shape()[1] {
                    return Err(mismatch(vec![1, weight.shape()[1]]));
                }
                vec![1, params.units]
            }
            Operator::Flatten => vec![1, x.iter().product()],
        };
        Ok(out)
    }

    /// Evaluates the operator. Inputs must already have the shapes used for
    /// inference; a mismatch is reported against `node`.
    pub fn apply(&self, node: &str, inputs: &[&Tensor]) -> Result<Tensor> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
        let out_shape = self.infer_shape(node, &shapes)?;
        let x = inputs[0];
        let data = match self {
            Operator::Conv2d {
                params,
                weight,
                bias,
            } => conv2d(x, weight, bias.as_ref(), params, &out_shape),
            Operator::BatchNorm {
                params,
                mean,
                variance,
                gamma,
                beta,
            } => {
                let plane = x.shape()[1] * x.shape()[2];
                let mut out = x.data().to_vec();
                for (c, chunk) in out.chunks_mut(plane).enumerate() {
                    let (m, g, b) = (mean.data()[c], gamma.data()[c], beta.data()[c]);
                    let denom = (variance.data()[c] + params.epsilon).sqrt();
                    for v in chunk {
                        *v = (*v - m) / denom * g + b;
                    }
                }
                out
            }
            Operator::BiasAdd { bias } => {
                let b = bias.data();
                if x.shape().len() == 3 {
                    let plane = x.shape()[1] * x.shape()[2];
                    let mut out = x.data().to_vec();
                    for (c, chunk) in out.chunks_mut(plane).enumerate() {
                        chunk.iter_mut().for_each(|v| *v += b[c]);
                    }
                    out
                } else {
                    let n = b.len();
                    x.data()
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v + b[i % n])
                        .collect()
                }
            }
            Operator::Add => zip_with(x, inputs[1], |a, b| a + b),
            Operator::Mul => zip_with(x, inputs[1], |a, b| a * b),
            Operator::Div => zip_with(x, inputs[1], |a, b| a / b),
            Operator::Exp => x.data().iter().map(|v| v.exp()).collect(),
            Operator::LeakyRelu(p) => x
                .data()
                .iter()
                .map(|&v| leaky_relu(v, p.slope))
                .collect(),
            Operator::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
            Operator::MaxPool(p) => max_pool(x, p, &out_shape),
            Operator::Dense {
                weight,
                bias,
                params,
            } => {
                let n = weight.shape()[1];
                let xs = x.data();
                (0..params.units)
                    .map(|u| {
                        let row = &weight.data()[u * n..(u + 1) * n];
                        let mut acc = 0.0f32;
                        for i in 0..n {
                            acc += row[i] * xs[i];
                        }
                        match bias {
                            Some(b) => acc + b.data()[u],
                            None => acc,
                        }
                    })
                    .collect()
            }
            Operator::Flatten => x.data().to_vec(),
            Operator::Softmax => softmax(x.data()),
        };
        Tensor::new(out_shape, data)
    }
}

pub fn leaky_relu(v: f32, slope: f32) -> f32 {
    if v > 0.0 {
        v
    } else {
        v * slope
    }
}

pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

fn check_vector(node: &str, t: Option<&Tensor>, len: usize) -> Result<()> {
    match t {
        Some(t) if t.shape() != [len] => Err(Error::ShapeMismatch {
            node: node.into(),
            expected: vec![len],
            actual: t.shape().to_vec(),
        }),
        _ => Ok(()),
    }
}

fn chw(shape: &[usize]) -> Option<[usize; 3]> {
    match shape {
        &[c, h, w] => Some([c, h, w]),
        _ => None,
    }
}

fn bias_axis_len(shape: &[usize]) -> usize {
    if shape.len() == 3 {
        shape[0]
    } else {
        shape[shape.len() - 1]
    }
}

fn window_out(len: usize, window: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= window).then(|| (padded - window) / stride + 1)
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

// Work (in multiply-adds) above which a convolution fans out across channels.
const PAR_CONV_WORK: usize = 1 << 18;

fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    p: &Conv2dParams,
    out_shape: &[usize],
) -> Vec<f32> {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1] as isize, x.shape()[2] as isize);
    let (c_out, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let k = p.kernel;
    let plane = oh * ow;
    let xs = x.data();
    let ws = weight.data();

    let fill = |co: usize, out: &mut [f32]| {
        let filt = &ws[co * c_in * k * k..(co + 1) * c_in * k * k];
        for oy in 0..oh {
            for ox in 0..ow {
                let y0 = (oy * p.stride) as isize - p.padding as isize;
                let x0 = (ox * p.stride) as isize - p.padding as isize;
                let mut acc = 0.0f32;
                for ci in 0..c_in {
                    let map = &xs[ci * (h * w) as usize..];
                    let f = &filt[ci * k * k..];
                    for ky in 0..k {
                        let iy = y0 + ky as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = x0 + kx as isize;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            acc += f[ky * k + kx] * map[(iy * w + ix) as usize];
                        }
                    }
                }
                if let Some(b) = bias {
                    acc += b.data()[co];
                }
                out[oy * ow + ox] = acc;
            }
        }
    };

    let mut out = vec![0.0f32; c_out * plane];
    if c_out * plane * c_in * k * k >= PAR_CONV_WORK {
        par::for_each_chunk_mut(&mut out, plane, fill);
    } else {
        out.chunks_mut(plane)
            .enumerate()
            .for_each(|(co, chunk)| fill(co, chunk));
    }
    out
}

fn max_pool(x: &Tensor, p: &PoolParams, out_shape: &[usize]) -> Vec<f32> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (c, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let xs = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let map = &xs[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                // NaN anywhere in the window wins.
                let mut m = f32::NEG_INFINITY;
                'window: for ky in 0..p.window {
                    for kx in 0..p.window {
                        let v = map[(oy * p.stride + ky) * w + ox * p.stride + kx];
                        if v.is_nan() {
                            m = v;
                            break 'window;
                        }
                        if v > m {
                            m = v;
                        }
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

fn softmax(xs: &[f32]) -> Vec<f32> {
    let mut m = f32::NEG_INFINITY;
    for &v in xs {
        if v > m {
            m = v;
        }
    }
    let exps: Vec<f32> = xs.iter().map(|&v| (v - m).exp()).collect();
    let mut sum = 0.0f32;
    for &e in &exps {
        sum += e;
    }
    exps.into_iter().map(|e| e / sum).collect()
}
