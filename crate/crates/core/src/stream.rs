//! Automatic conversion of whole-sequence graphs into frame-by-frame
//! streaming graphs.
//!
//! The conversion (1) fixes the input time length to one frame and
//! (2) inserts a ring-buffer state in front of every node whose computation
//! spans more than one time frame, sized by that node's effective time
//! filter size. Recurrent nodes switch to single-step execution with their
//! hidden state registered alongside the buffers. States are either owned
//! by the session (internal mode) or exposed as extra model inputs and
//! outputs the caller threads between calls (external mode).
//!
//! Buffers start zero-filled. Together with causal padding, and additive
//! parameters (biases, batch-norm offsets) that are zero until trained
//! values are loaded, this makes a fresh stream behave exactly like the
//! non-streaming model on a zero-padded history.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, LayerKind, Mode, Node, Shape};
use crate::tensor::Tensor;

/// Where streaming state lives: inside the session, or threaded through
/// extra model inputs/outputs by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateMode {
    Internal,
    External,
}

/// A FIFO of the most recent `length` frames feeding `owner`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingBufferSpec {
    /// Node whose computation reads the buffered window.
    pub owner: String,
    /// Frames held; always >= 2 (a length-1 buffer would be a no-op and is
    /// never created).
    pub length: usize,
    /// Shape of one buffered frame.
    pub frame_shape: Vec<usize>,
    /// State name; doubles as the id of the inserted ring-buffer node.
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruStateSpec {
    pub owner: String,
    pub units: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateSpec {
    RingBuffer(RingBufferSpec),
    GruHidden(GruStateSpec),
}

impl StateSpec {
    pub fn name(&self) -> &str {
        match self {
            StateSpec::RingBuffer(s) => &s.name,
            StateSpec::GruHidden(s) => &s.name,
        }
    }

    pub fn owner(&self) -> &str {
        match self {
            StateSpec::RingBuffer(s) => &s.owner,
            StateSpec::GruHidden(s) => &s.owner,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            StateSpec::RingBuffer(s) => {
                let mut dims = vec![s.length];
                dims.extend_from_slice(&s.frame_shape);
                dims
            }
            StateSpec::GruHidden(s) => vec![s.units],
        }
    }
}

/// Number of consecutive input frames one output frame of this layer
/// depends on. `1` means the layer is pointwise in time and needs no
/// buffer. Recurrent layers also report `1`: their history lives in the
/// cell state, not in a frame buffer.
///
/// Layers that read future frames (bidirectional recurrences, whole-sequence
/// attention, center selection) have no finite causal filter size and are
/// rejected.
pub fn effective_time_filter_size(kind: &LayerKind, in_shapes: &[&Shape]) -> Result<usize> {
    match kind.core_kind() {
        LayerKind::Conv2d {
            kernel_t,
            dilation_t,
            ..
        }
        | LayerKind::Conv1d {
            kernel_t,
            dilation_t,
            ..
        } => Ok(dilation_t * (kernel_t - 1) + 1),
        LayerKind::DepthwiseConv1d { kernel_t, .. } => Ok(*kernel_t),
        LayerKind::Flatten | LayerKind::GlobalAvgPoolTime => {
            // These consume their whole concrete time window at once.
            let s = in_shapes.first().ok_or_else(|| {
                Error::shape_mismatch("flatten/pool filter size needs the input shape")
            })?;
            Ok(s.time_len().unwrap_or(1))
        }
        LayerKind::AvgPool2d { pool_t, .. } => Ok(*pool_t),
        LayerKind::BidirectionalGru { .. } => Err(not_streamable(
            "bidirectional recurrence depends on future frames",
        )),
        LayerKind::MultiHeadAttention { .. } => Err(not_streamable(
            "attention over the whole sequence depends on future frames",
        )),
        LayerKind::CenterSelect => Err(not_streamable("center selection depends on future frames")),
        // Dense, activations, batch norm, add, feature-axis concat are
        // pointwise in time; GRU keeps its state in the cell.
        _ => Ok(1),
    }
}

fn not_streamable(reason: &str) -> Error {
    Error::NotStreamable {
        node: String::new(),
        reason: reason.to_string(),
    }
}

fn with_node(err: Error, id: &str) -> Error {
    match err {
        Error::NotStreamable { reason, .. } => Error::NotStreamable {
            node: id.to_string(),
            reason,
        },
        other => other,
    }
}

/// Rejects layers the streaming executor cannot reproduce exactly:
/// anything that strides or pools over more than one frame in time, or
/// that reads future frames.
fn streaming_blocker(node: &Node, in_shapes: &[&Shape]) -> Option<String> {
    match node.kind.core_kind() {
        LayerKind::Conv2d { stride_t, .. } | LayerKind::Conv1d { stride_t, .. }
            if *stride_t > 1 =>
        {
            Some("stride greater than 1 in the time dimension".into())
        }
        LayerKind::AvgPool2d {
            pool_t, stride_t, ..
        } if *pool_t > 1 || *stride_t > 1 => {
            Some("pooling over more than one frame in the time dimension".into())
        }
        LayerKind::Concat { axis: 0 } if in_shapes.first().is_some_and(|s| s.has_time) => {
            Some("concatenation along the time axis".into())
        }
        _ => None,
    }
}

/// One streaming update of a ring buffer: drops the oldest frame, appends
/// the new one. Purely functional; callers decide where the result lives.
pub fn ring_buffer_step(state: &Tensor, frame: &Tensor) -> Result<Tensor> {
    if frame.shape().len() != state.shape().len()
        || frame.shape()[0] != 1
        || frame.frame_shape() != state.frame_shape()
    {
        return Err(Error::ShapeMismatch(format!(
            "ring buffer holds {:?} frames, got a {:?} update",
            state.frame_shape(),
            frame.shape()
        )));
    }
    let row = state.frame_numel();
    let k = state.shape()[0];
    let mut data = Vec::with_capacity(state.numel());
    data.extend_from_slice(&state.data()[row..k * row]);
    data.extend_from_slice(frame.data());
    Tensor::from_vec(state.shape().to_vec(), data)
}

/// Converts a non-streaming graph into a streaming one.
///
/// `train_time_len` is the sequence length the model was built for; it
/// determines the window sizes of whole-sequence layers (flatten, time
/// pooling) and must make `infer_shapes` succeed on the input graph.
///
/// Nodes that span k >= 2 frames get a `RingBuffer{length: k}` predecessor
/// and then compute on the buffered window exactly as a valid convolution
/// over k frames; models built with valid time padding are thereby
/// reinterpreted as causal, which is the only convention a one-frame-at-a-
/// time executor can honor. GRU nodes switch to single-step execution with
/// their hidden state registered as a state. Weights are shared with the
/// source graph, not copied.
pub fn to_streaming(g: &Graph, mode: StateMode, train_time_len: usize) -> Result<Graph> {
    if g.mode != Mode::NonStreaming {
        return Err(Error::WrongMode {
            expected: Mode::NonStreaming.name().into(),
            found: g.mode.name().into(),
        });
    }
    let inferred = g.infer_shapes(train_time_len)?;
    let order = inferred.topo_order()?;

    let shape_of = |id: &str| -> &Shape {
        inferred.nodes[id]
            .out_shape
            .as_ref()
            .expect("infer_shapes filled every node")
    };

    // Reject non-streamable layers first so the error names the offending
    // node rather than a half-built graph.
    for id in &order {
        let node = &inferred.nodes[id];
        let in_shapes: Vec<&Shape> = node.inputs.iter().map(|i| shape_of(i)).collect();
        if let Some(reason) = streaming_blocker(node, &in_shapes) {
            return Err(Error::NotStreamable {
                node: id.clone(),
                reason,
            });
        }
        effective_time_filter_size(&node.kind, &in_shapes).map_err(|e| with_node(e, id))?;
    }

    let mut used_ids: BTreeSet<String> = inferred.nodes.keys().cloned().collect();
    let mut unique_name = |base: String| -> String {
        let mut name = base;
        while used_ids.contains(&name) {
            name.push('_');
        }
        used_ids.insert(name.clone());
        name
    };

    let mut nodes: Vec<Node> = Vec::with_capacity(inferred.nodes.len());
    let mut states: Vec<StateSpec> = Vec::new();
    for id in &order {
        let mut node = inferred.nodes[id].clone();
        node.out_shape = None;

        let filter_size = {
            let in_shapes: Vec<&Shape> = node.inputs.iter().map(|i| shape_of(i)).collect();
            effective_time_filter_size(&node.kind, &in_shapes).map_err(|e| with_node(e, id))?
        };

        if filter_size >= 2 {
            if node.inputs.len() != 1 {
                return Err(Error::InvalidSpec(format!(
                    "node `{id}` buffers frames but has {} inputs",
                    node.inputs.len()
                )));
            }
            let frame_shape = shape_of(&node.inputs[0]).frame_dims().to_vec();
            let buffer_id = unique_name(format!("{id}_state"));
            let buffer = Node::new(
                buffer_id.clone(),
                LayerKind::RingBuffer {
                    length: filter_size,
                },
                vec![node.inputs[0].clone()],
            );
            node.inputs = vec![buffer_id.clone()];
            // The buffer materializes the padding; the node itself now
            // computes a valid convolution over the buffered window.
            set_padding_valid(&mut node.kind);
            states.push(StateSpec::RingBuffer(RingBufferSpec {
                owner: id.clone(),
                length: filter_size,
                frame_shape,
                name: buffer_id,
            }));
            nodes.push(buffer);
        }

        if let LayerKind::Gru { units, .. } = node.kind.core_kind() {
            states.push(StateSpec::GruHidden(GruStateSpec {
                owner: id.clone(),
                units: *units,
                name: unique_name(format!("{id}_h")),
            }));
        }
        nodes.push(node);
    }

    let graph_mode = match mode {
        StateMode::Internal => Mode::StreamingInternal,
        StateMode::External => Mode::StreamingExternal,
    };
    let streamed = Graph::assemble(
        nodes,
        g.input_ids.clone(),
        g.output_ids.clone(),
        graph_mode,
        states,
    )?;
    // Concretize for one-frame input; also re-validates every edge.
    streamed.infer_shapes(1)
}

fn set_padding_valid(kind: &mut LayerKind) {
    match kind {
        LayerKind::Conv2d { padding, .. }
        | LayerKind::Conv1d { padding, .. }
        | LayerKind::DepthwiseConv1d { padding, .. } => *padding = crate::graph::Padding::Valid,
        LayerKind::Stream { inner } => set_padding_valid(inner),
        _ => {}
    }
}

/// Looks up the hidden-state name registered for a GRU node.
pub(crate) fn gru_state_name<'a>(g: &'a Graph, node_id: &str) -> Result<&'a str> {
    g.states
        .iter()
        .find_map(|s| match s {
            StateSpec::GruHidden(spec) if spec.owner == node_id => Some(spec.name.as_str()),
            _ => None,
        })
        .ok_or_else(|| Error::MissingState {
            name: format!("{node_id}_h"),
        })
}
