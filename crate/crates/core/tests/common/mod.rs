//! Brute-force oracles shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use saboteur_core::ops::{Conv2dParams, Operator};
use saboteur_core::{Graph, Inputs, Tensor};

/// Direct convolution in f64 from the textbook definition. Returns the
/// output and, per element, the sum of |terms| for scaling error bounds.
pub fn conv_oracle(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    p: Conv2dParams,
) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, s, pad, cout) = (p.kernel, p.stride, p.padding, p.out_channels);
    let oh = (h + 2 * pad - k) / s + 1;
    let ow = (wd + 2 * pad - k) / s + 1;
    let xv = |c: usize, y: i64, xx: i64| -> f64 {
        if y < 0 || xx < 0 || y >= h as i64 || xx >= wd as i64 {
            0.0
        } else {
            x.data()[(c * h + y as usize) * wd + xx as usize] as f64
        }
    };
    let mut out = Vec::new();
    let mut mag = Vec::new();
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let bias = b.map_or(0.0, |b| b.data()[co] as f64);
                let (mut acc, mut m) = (bias, bias.abs());
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as i64 - pad as i64;
                            let ix = (ox * s + kx) as i64 - pad as i64;
                            let wv = w.data()[((co * cin + ci) * k + ky) * k + kx] as f64;
                            let t = wv * xv(ci, iy, ix);
                            acc += t;
                            m += t.abs();
                        }
                    }
                }
                out.push(acc);
                mag.push(m);
            }
        }
    }
    (vec![cout, oh, ow], out, mag)
}

/// Random small convolution: `(input, operator, params)`.
pub fn random_conv(r: &mut impl Rng) -> (Tensor, Operator, Conv2dParams) {
    let cin: usize = r.random_range(1..=6);
    let k: usize = r.random_range(1..=3);
    let padding = r.random_range(0..k);
    let h = r.random_range(k.saturating_sub(2 * padding).max(1)..=6);
    let w = r.random_range(k.saturating_sub(2 * padding).max(1)..=6);
    let params = Conv2dParams {
        kernel: k,
        stride: r.random_range(1..=2),
        padding,
        out_channels: r.random_range(1..=6),
    };
    let x = Tensor::from_fn(&[cin, h, w], |_| r.random_range(-2.0f32..2.0));
    let weight = Tensor::from_fn(&[params.out_channels, cin, k, k], |_| r.random_range(-1.0f32..1.0));
    let bias = r
        .random_bool(0.5)
        .then(|| Tensor::from_fn(&[params.out_channels], |_| r.random_range(-1.0f32..1.0)));
    (x, Operator::Conv2d { params, weight, bias }, params)
}

/// Relative error of `got` against the oracle, scaled by the magnitude of
/// the summed terms so cancellation does not inflate it.
pub fn conv_rel_error(got: &Tensor, want: &[f64], mag: &[f64]) -> f64 {
    got.data()
        .iter()
        .zip(want)
        .zip(mag)
        .map(|((g, w), m)| (*g as f64 - w).abs() / m.max(1e-30))
        .fold(0.0, f64::max)
}

/// Re-executes the whole graph node by node, with `site`'s output forced to
/// `replacement`. Independent of the engine's splicing logic.
pub fn reexecute_with(graph: &Graph, inputs: &Inputs, site: &str, replacement: &Tensor) -> BTreeMap<String, Tensor> {
    let mut values: BTreeMap<String, Tensor> = inputs.clone();
    let mut out = BTreeMap::new();
    for node in graph.nodes() {
        let t = if node.id == site {
            replacement.clone()
        } else {
            let args: Vec<&Tensor> = node.inputs.iter().map(|i| &values[i]).collect();
            node.op.apply(&node.id, &args).unwrap()
        };
        values.insert(node.id.clone(), t.clone());
        out.insert(node.id.clone(), t);
    }
    out
}
