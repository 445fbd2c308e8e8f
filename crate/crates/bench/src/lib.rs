//! Shared setup for the latency benchmarks: zoo models with their streaming
//! conversions and deterministic inputs.

use skws_core::rng::{uniform_tensor, SplitMix64};
use skws_core::zoo::{build, ModelId, ZooSpec};
use skws_core::{to_streaming, Graph, StateMode, Tensor};

pub const TRAIN_FRAMES: usize = 49;

/// A zoo model plus its internal-state streaming conversion.
pub fn model_pair(model: ModelId, seed: u64) -> (Graph, Graph) {
    let g = build(&ZooSpec::new(model).with_seed(seed)).expect("zoo build");
    let s = to_streaming(&g, StateMode::Internal, TRAIN_FRAMES).expect("streamable model");
    (g, s)
}

/// Deterministic input sequence matching the graph's frame geometry.
pub fn input_sequence(g: &Graph, frames: usize, seed: u64) -> Tensor {
    let mut shape = vec![frames];
    shape.extend(g.input_frame_shape().expect("single input"));
    let mut rng = SplitMix64::new(seed);
    uniform_tensor(&mut rng, &shape, -1.0, 1.0)
}
