//! Shared helpers for the integration suites.

#![allow(dead_code)]

use skws_core::graph::{ActivationKind, Padding};
use skws_core::rng::{glorot_uniform, uniform_tensor, SplitMix64};
use skws_core::runtime::{self, StreamSession};
use skws_core::{Graph, LayerKind, Node, Tensor};

/// The worked conversion example: a 6-frame, 3-feature input into a 3x3
/// valid convolution (one filter), flatten, dense scores.
pub fn six_frame_conv_model(seed: u64) -> Graph {
    let mut rng = SplitMix64::new(seed);
    let nodes = vec![
        Node::new(
            "input",
            LayerKind::Input {
                frame_shape: vec![3, 1],
            },
            vec![],
        ),
        Node::new(
            "conv",
            LayerKind::Conv2d {
                kernel_t: 3,
                kernel_f: 3,
                stride_t: 1,
                stride_f: 1,
                dilation_t: 1,
                filters: 1,
                padding: Padding::Valid,
            },
            vec!["input".into()],
        )
        .with_weights(vec![
            ("kernel", glorot_uniform(&mut rng, &[3, 3, 1, 1])),
            ("bias", Tensor::zeros(&[1]).unwrap()),
        ]),
        Node::new("flatten", LayerKind::Flatten, vec!["conv".into()]),
        Node::new(
            "dense",
            LayerKind::Dense {
                units: 2,
                use_bias: true,
            },
            vec!["flatten".into()],
        )
        .with_weights(vec![
            ("kernel", glorot_uniform(&mut rng, &[4, 2])),
            ("bias", Tensor::zeros(&[2]).unwrap()),
        ]),
        Node::new(
            "scores",
            LayerKind::Activation {
                kind: ActivationKind::Softmax,
            },
            vec!["dense".into()],
        ),
    ];
    Graph::new(nodes, vec!["input".into()], vec!["scores".into()]).unwrap()
}

pub fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    uniform_tensor(&mut rng, shape, -1.0, 1.0)
}

/// Random full-length input matching a graph's frame geometry.
pub fn random_sequence(g: &Graph, frames: usize, seed: u64) -> Tensor {
    let mut shape = vec![frames];
    shape.extend(g.input_frame_shape().unwrap());
    random_input(&shape, seed)
}

/// The brute-force reference for streaming equivalence: re-runs the full
/// non-streaming model on the zero-left-padded causal prefix ending at
/// frame `t` (1-based), padded to `total` frames.
pub fn causal_prefix_oracle(g: &Graph, x: &Tensor, t: usize, total: usize) -> Tensor {
    let prefix = x.slice_time(0, t).unwrap();
    let padded = prefix.zero_left_pad_time(total).unwrap();
    runtime::run_non_streaming(g, &padded).unwrap()
}

/// Runs an internal-mode session over every frame of `x`.
pub fn stream_outputs(session: &mut StreamSession, x: &Tensor) -> Vec<Tensor> {
    session.run_sequence(x).unwrap()
}
