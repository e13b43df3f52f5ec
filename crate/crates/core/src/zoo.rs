//! Small reference networks with deterministic pseudo-random weights.

use rand::Rng;

use crate::graph::{Graph, Inputs, Node};
use crate::ops::{Conv2dParams, DenseParams, LeakyReluParams, Operator, PoolParams};
use crate::rng;
use crate::tensor::Tensor;

fn uniform(shape: &[usize], bound: f32, r: &mut rng::Stream) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-bound..=bound))
}

fn conv(
    id: &str,
    input: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    padding: usize,
    r: &mut rng::Stream,
) -> Node {
    let bound = (6.0 / (c_in * kernel * kernel) as f32).sqrt();
    Node::new(
        id,
        Operator::Conv2d {
            params: Conv2dParams {
                kernel,
                stride: 1,
                padding,
                out_channels: c_out,
            },
            weight: uniform(&[c_out, c_in, kernel, kernel], bound, r),
            bias: Some(uniform(&[c_out], 0.1, r)),
        },
        &[input],
    )
}

fn dense(id: &str, input: &str, n_in: usize, units: usize, r: &mut rng::Stream) -> Node {
    let bound = (6.0 / n_in as f32).sqrt();
    Node::new(
        id,
        Operator::Dense {
            params: DenseParams { units },
            weight: uniform(&[units, n_in], bound, r),
            bias: Some(uniform(&[units], 0.1, r)),
        },
        &[input],
    )
}

fn leaky(id: &str, input: &str) -> Node {
    Node::new(id, Operator::LeakyRelu(LeakyReluParams { slope: 0.1 }), &[input])
}

fn pool(id: &str, input: &str) -> Node {
    Node::new(id, Operator::MaxPool(PoolParams { window: 2, stride: 2 }), &[input])
}

/// LeNet-5-style classifier: two convolutions and three dense layers on a
/// `(1, 28, 28)` image named `image`, ending in a 10-way softmax `prob`.
pub fn lenet5(seed: u64) -> Graph {
    let r = &mut rng::stream(seed);
    let nodes = vec![
        conv("conv1", "image", 1, 6, 5, 2, r),
        leaky("act1", "conv1"),
        pool("pool1", "act1"),
        conv("conv2", "pool1", 6, 16, 5, 0, r),
        leaky("act2", "conv2"),
        pool("pool2", "act2"),
        Node::new("flatten", Operator::Flatten, &["pool2"]),
        dense("fc1", "flatten", 400, 120, r),
        leaky("act3", "fc1"),
        dense("fc2", "act3", 120, 84, r),
        leaky("act4", "fc2"),
        dense("fc3", "act4", 84, 10, r),
        Node::new("prob", Operator::Softmax, &["fc3"]),
    ];
    Graph::new(
        vec![("image".into(), vec![1, 28, 28])],
        nodes,
        vec!["prob".into()],
    )
    .expect("lenet5 is well formed")
}

/// Deterministic inputs with values uniform in `[0, 1)`.
pub fn random_inputs(graph: &Graph, seed: u64) -> Inputs {
    let r = &mut rng::stream(seed);
    graph
        .input_spec()
        .iter()
        .map(|(name, shape)| {
            (
                name.clone(),
                Tensor::from_fn(shape, |_| r.random::<f32>()),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet_shapes() {
        let g = lenet5(1);
        assert_eq!(g.len(), 13);
        assert_eq!(g.shape_of("conv1").unwrap(), &[6, 28, 28]);
        assert_eq!(g.shape_of("pool2").unwrap(), &[16, 5, 5]);
        assert_eq!(g.shape_of("prob").unwrap(), &[1, 10]);
        assert_eq!(g.digest(), lenet5(1).digest());
        assert_ne!(g.digest(), lenet5(2).digest());
    }
}
